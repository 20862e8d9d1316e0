"""Per-pattern proxies for the augmentation terms.

Each augmentation pattern ``r`` gets a proxy F_r(x_r, theta) for the
conditional expectation of the full-data residual given the pattern-``r``
features.  Two modes:

* ``expectation`` -- the proxy outputs the conditional residual directly
  (a point prediction turned into ``f(x) - theta`` for the mean target, or
  exact Gaussian conditional moments for regression);
* ``imputation`` -- an imputer fills in the missing blocks and the full-data
  residual is evaluated on the spliced row.

Proxies are deterministic per row: stochastic pieces key their draws on
(seed, row_id), so evaluation order and batching never change results.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import (
    EmptyFile,
    InvalidConfig,
    InvalidQ,
    MaskMismatch,
    MissingPredictor,
    NonGaussianSpec,
    NotPositiveDefinite,
    RankDeficient,
)
from .estfun import Blocks, EstimatingFunction, LinearRegression
from .data import ObservedDataset, Schema

MODE_EXPECTATION = "expectation"
MODE_IMPUTATION = "imputation"

_MAX_INDEXED_ROW_ID = 10_000_000


def _row_keyed_normals(seed: int, row_ids: np.ndarray, width: int = 1) -> np.ndarray:
    """Standard normals keyed by (seed, row_id); independent of batch shape."""
    row_ids = np.asarray(row_ids, dtype=np.int64)
    top = int(row_ids.max()) + 1 if row_ids.size else 0
    if top <= _MAX_INDEXED_ROW_ID:
        rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
        pool = rng.standard_normal((top, width))
        return pool[row_ids]
    out = np.empty((row_ids.size, width))
    for i, rid in enumerate(row_ids):
        rng = np.random.Generator(
            np.random.Philox(key=np.array([seed, rid], dtype=np.uint64))
        )
        out[i] = rng.standard_normal(width)
    return out


# -- point predictors (x_r -> predicted values) ------------------------------

class PointPredictor:
    """Deterministic map from observed features to predicted columns."""

    inputs: tuple[str, ...]
    d_out: int

    def predict(self, blocks: Blocks, row_ids: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass
class LinearPredictorMap(PointPredictor):
    """Affine map from the concatenated input blocks to target columns.

    Doubles as an imputer: ``targets``/``target_dims`` describe how the
    output columns split back into modality blocks.
    """

    inputs: tuple[str, ...]
    targets: tuple[str, ...]
    target_dims: tuple[int, ...]
    coef: np.ndarray  # (p_in, p_out)
    intercept: np.ndarray  # (p_out,)

    @property
    def d_out(self) -> int:
        return int(self.intercept.shape[0])

    def _design(self, blocks: Blocks) -> np.ndarray:
        return np.hstack([np.atleast_2d(np.asarray(blocks[n], dtype=float)) for n in self.inputs])

    def predict(self, blocks: Blocks, row_ids: np.ndarray) -> np.ndarray:
        return self._design(blocks) @ self.coef + self.intercept

    def impute(self, blocks: Blocks, row_ids: np.ndarray) -> dict[str, np.ndarray]:
        pred = self.predict(blocks, row_ids)
        out: dict[str, np.ndarray] = {}
        start = 0
        for name, dim in zip(self.targets, self.target_dims):
            out[name] = pred[:, start : start + dim]
            start += dim
        return out


def train_linear_predictor(
    dataset: ObservedDataset, inputs: Sequence[str], targets: Sequence[str]
) -> LinearPredictorMap:
    """Least-squares map (with intercept) from input blocks to target blocks.

    Fit on the rows observing all inputs and targets.  Raises
    ``RankDeficient`` when the augmented design loses full column rank.
    """
    schema = dataset.schema
    needed = schema.mask_of(tuple(inputs) + tuple(targets))
    sel = dataset.rows_containing(needed)
    if not sel.any():
        raise RankDeficient("no training rows observe all inputs and targets")
    x = np.hstack([dataset.blocks[n][sel] for n in inputs])
    y = np.hstack([dataset.blocks[n][sel] for n in targets])
    design = np.hstack([np.ones((x.shape[0], 1)), x])
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < design.shape[1]:
        raise RankDeficient(
            f"training design has rank {rank} < {design.shape[1]} columns"
        )
    return LinearPredictorMap(
        inputs=tuple(inputs),
        targets=tuple(targets),
        target_dims=tuple(schema.dim_of(t) for t in targets),
        coef=coef[1:],
        intercept=coef[0],
    )


@dataclass
class NoisyMixturePredictor(PointPredictor):
    """Convex mixture (1-q) * base(x) + q * noise of a predictor with noise.

    ``q=0`` reproduces the base predictor exactly; ``q=1`` is pure noise.
    Noise is N(0, noise_sd^2), drawn deterministically per (seed, row_id).
    """

    base: PointPredictor
    q: float
    noise_sd: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.q <= 1.0:
            raise InvalidQ(f"mixture weight must be in [0, 1], got {self.q}")

    @property
    def inputs(self) -> tuple[str, ...]:
        return self.base.inputs

    @property
    def d_out(self) -> int:
        return self.base.d_out

    def predict(self, blocks: Blocks, row_ids: np.ndarray) -> np.ndarray:
        clean = self.base.predict(blocks, row_ids)
        if self.q == 0.0:
            return clean
        eps = self.noise_sd * _row_keyed_normals(self.seed, row_ids, clean.shape[1])
        return (1.0 - self.q) * clean + self.q * eps


def noisy_mixture_predictor(
    base: PointPredictor, q: float, noise_sd: float = 2.0, seed: int = 0
) -> NoisyMixturePredictor:
    return NoisyMixturePredictor(base=base, q=q, noise_sd=noise_sd, seed=seed)


@dataclass
class TablePointPredictor(PointPredictor):
    """Precomputed predictions keyed by row_id (external model output)."""

    values: Mapping[int, np.ndarray]
    width: int
    inputs: tuple[str, ...] = ()

    @property
    def d_out(self) -> int:
        return self.width

    def predict(self, blocks: Blocks, row_ids: np.ndarray) -> np.ndarray:
        out = np.empty((len(row_ids), self.width))
        for i, rid in enumerate(np.asarray(row_ids, dtype=np.int64)):
            try:
                out[i] = self.values[int(rid)]
            except KeyError:
                raise MissingPredictor(f"no stored prediction for row_id {rid}") from None
        return out

    def impute(self, blocks: Blocks, row_ids: np.ndarray) -> dict[str, np.ndarray]:
        raise MissingPredictor("point table has no block structure; use a TableImputer")


@dataclass
class TableImputer:
    """Precomputed imputed blocks keyed by row_id."""

    targets: tuple[str, ...]
    target_dims: tuple[int, ...]
    values: Mapping[int, np.ndarray]  # row_id -> concatenated target values
    inputs: tuple[str, ...] = ()

    def impute(self, blocks: Blocks, row_ids: np.ndarray) -> dict[str, np.ndarray]:
        width = sum(self.target_dims)
        flat = np.empty((len(row_ids), width))
        for i, rid in enumerate(np.asarray(row_ids, dtype=np.int64)):
            try:
                flat[i] = self.values[int(rid)]
            except KeyError:
                raise MissingPredictor(f"no stored imputation for row_id {rid}") from None
        out: dict[str, np.ndarray] = {}
        start = 0
        for name, dim in zip(self.targets, self.target_dims):
            out[name] = flat[:, start : start + dim]
            start += dim
        return out


def load_prediction_table(path) -> tuple[dict[int, np.ndarray], list[str]]:
    """Read a ``row_id, c1..ck`` CSV into an id-keyed array mapping."""
    frame = pd.read_csv(path)
    if frame.shape[0] == 0:
        raise EmptyFile(f"{path}: no rows")
    if "row_id" not in frame.columns:
        raise InvalidConfig(f"{path}: prediction files need a row_id column")
    cols = [c for c in frame.columns if c != "row_id"]
    arr = frame[cols].to_numpy(dtype=float)
    ids = frame["row_id"].to_numpy(dtype=np.int64)
    return {int(i): arr[k] for k, i in enumerate(ids)}, cols


# -- Gaussian machinery -------------------------------------------------------

@dataclass(frozen=True)
class GaussianSpec:
    """Joint Gaussian law over all data columns, in schema order."""

    schema: Schema
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        p = sum(self.schema.dim_of(n) for n in self.schema.modalities)
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.cov, dtype=float)
        if mean.shape != (p,) or cov.shape != (p, p):
            raise InvalidConfig("Gaussian spec dimensions do not match the schema")
        eigmin = float(np.linalg.eigvalsh((cov + cov.T) / 2).min())
        if eigmin <= 0:
            raise NotPositiveDefinite(f"covariance has min eigenvalue {eigmin:.3g}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", (cov + cov.T) / 2)

    def offsets(self) -> dict[str, tuple[int, int]]:
        out: dict[str, tuple[int, int]] = {}
        start = 0
        for name in self.schema.modalities:
            dim = self.schema.dim_of(name)
            out[name] = (start, start + dim)
            start += dim
        return out

    def coord_indices(self, names: Sequence[str]) -> np.ndarray:
        offs = self.offsets()
        return np.concatenate([np.arange(*offs[n]) for n in names])

    def conditional(
        self, observed_names: Sequence[str], blocks: Blocks
    ) -> tuple[np.ndarray, np.ndarray]:
        """Per-row conditional mean (full vector) and residual covariance.

        Observed coordinates keep their values and carry zero residual
        variance; unobserved coordinates get the Gaussian regression mean.
        """
        p = self.mean.shape[0]
        obs_idx = self.coord_indices(observed_names) if observed_names else np.array([], dtype=int)
        mis_idx = np.setdiff1d(np.arange(p), obs_idx)
        x_obs = (
            np.hstack([np.atleast_2d(np.asarray(blocks[n], dtype=float)) for n in observed_names])
            if observed_names
            else np.zeros((_first_len(blocks), 0))
        )
        n = x_obs.shape[0]
        m = np.empty((n, p))
        S = np.zeros((p, p))
        if obs_idx.size:
            m[:, obs_idx] = x_obs
        if mis_idx.size:
            if obs_idx.size:
                c_oo = self.cov[np.ix_(obs_idx, obs_idx)]
                c_uo = self.cov[np.ix_(mis_idx, obs_idx)]
                beta = np.linalg.solve(c_oo, c_uo.T).T  # (p_u, p_o)
                m[:, mis_idx] = self.mean[mis_idx] + (x_obs - self.mean[obs_idx]) @ beta.T
                S[np.ix_(mis_idx, mis_idx)] = (
                    self.cov[np.ix_(mis_idx, mis_idx)] - beta @ c_uo.T
                )
            else:
                m[:, mis_idx] = self.mean[mis_idx]
                S[np.ix_(mis_idx, mis_idx)] = self.cov[np.ix_(mis_idx, mis_idx)]
        return m, S

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        chol = np.linalg.cholesky(self.cov)
        return self.mean + rng.standard_normal((n, self.mean.shape[0])) @ chol.T

    def conditional_sample(
        self,
        observed_names: Sequence[str],
        blocks: Blocks,
        n_draws: int,
        rng: np.random.Generator,
    ) -> np.ndarray:
        """Draws of the full vector given the observed blocks: (n, draws, p)."""
        m, S = self.conditional(observed_names, blocks)
        p = self.mean.shape[0]
        mis = np.flatnonzero(np.diag(S) > 0)
        out = np.repeat(m[:, None, :], n_draws, axis=1)
        if mis.size:
            chol = np.linalg.cholesky(S[np.ix_(mis, mis)] + 1e-12 * np.eye(mis.size))
            noise = rng.standard_normal((m.shape[0], n_draws, mis.size)) @ chol.T
            out[:, :, mis] += noise
        return out


def _first_len(blocks: Blocks) -> int:
    for arr in blocks.values():
        return np.atleast_2d(np.asarray(arr)).shape[0]
    return 0


def joint_gaussian_from_regression(
    schema: Schema,
    covariate_names: Sequence[str],
    outcome: str,
    mean_x: np.ndarray,
    cov_x: np.ndarray,
    beta: np.ndarray,
    intercept: float = 0.0,
    noise_var: float = 1.0,
) -> GaussianSpec:
    """Joint Gaussian over (X, Y) for Y = intercept + X' beta + noise."""
    mean_x = np.asarray(mean_x, dtype=float).reshape(-1)
    cov_x = np.asarray(cov_x, dtype=float)
    beta = np.asarray(beta, dtype=float).reshape(-1)
    p = mean_x.shape[0]
    mean = np.concatenate([mean_x, [intercept + mean_x @ beta]])
    cov = np.zeros((p + 1, p + 1))
    cov[:p, :p] = cov_x
    cov[:p, p] = cov_x @ beta
    cov[p, :p] = cov_x @ beta
    cov[p, p] = beta @ cov_x @ beta + noise_var
    names = tuple(covariate_names) + (outcome,)
    if tuple(schema.modalities) != names:
        raise InvalidConfig("schema modality order must be covariates then outcome")
    return GaussianSpec(schema=schema, mean=mean, cov=cov)


def ols_conditional_moments(
    spec: GaussianSpec,
    ef: LinearRegression,
    observed_names: Sequence[str],
    theta: np.ndarray,
    blocks: Blocks,
) -> np.ndarray:
    """Exact conditional expectation of the regression residual function.

    Evaluates E[x (y - x' theta) | observed blocks] under the joint Gaussian
    spec; with everything observed this reduces to the residual itself.
    """
    if not isinstance(spec, GaussianSpec):
        raise NonGaussianSpec(
            "exact conditional moments need a Gaussian spec (or plug in a sampler)"
        )
    m, S = spec.conditional(observed_names, blocks)
    x_idx = spec.coord_indices(ef.covariates)
    y_idx = spec.coord_indices((ef.outcome,))
    theta = np.asarray(theta, dtype=float)
    xm = m[:, x_idx]
    ym = m[:, y_idx].reshape(-1)
    s_xy = S[np.ix_(x_idx, y_idx)].reshape(-1)
    s_xx = S[np.ix_(x_idx, x_idx)]
    return (s_xy - s_xx @ theta)[None, :] + xm * ym[:, None] - xm * (xm @ theta)[:, None]


# -- proxies (F_r) ------------------------------------------------------------

class Predictor:
    """Proxy F_r(x_r, theta) with its theta-Jacobian."""

    d: int
    inputs: tuple[str, ...]

    def values(self, blocks: Blocks, row_ids: np.ndarray, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, blocks: Blocks, row_ids: np.ndarray, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass
class MeanProxy(Predictor):
    """Point prediction of the outcome turned into a mean-target residual."""

    point: PointPredictor

    @property
    def d(self) -> int:
        return self.point.d_out

    @property
    def inputs(self) -> tuple[str, ...]:
        return self.point.inputs

    def values(self, blocks, row_ids, theta):
        return self.point.predict(blocks, row_ids) - np.asarray(theta, dtype=float)[None, :]

    def jacobian(self, blocks, row_ids, theta):
        n = len(row_ids)
        return np.broadcast_to(-np.eye(self.d), (n, self.d, self.d)).copy()


@dataclass
class EstimatingFunctionProxy(Predictor):
    """The residual itself, for patterns observing everything it needs."""

    ef: EstimatingFunction

    @property
    def d(self) -> int:
        return self.ef.d

    @property
    def inputs(self) -> tuple[str, ...]:
        return tuple(self.ef.required_modalities)

    def values(self, blocks, row_ids, theta):
        return self.ef.evaluate(blocks, theta)

    def jacobian(self, blocks, row_ids, theta):
        return self.ef.jacobian(blocks, theta)


@dataclass
class ImputationProxy(Predictor):
    """Impute the missing blocks, then evaluate the residual on the splice."""

    imputer: object  # anything with .impute(blocks, row_ids) and .inputs
    ef: EstimatingFunction

    @property
    def d(self) -> int:
        return self.ef.d

    @property
    def inputs(self) -> tuple[str, ...]:
        return tuple(self.imputer.inputs)

    def _splice(self, blocks: Blocks, row_ids: np.ndarray) -> dict[str, np.ndarray]:
        imputed = self.imputer.impute(blocks, row_ids)
        spliced: dict[str, np.ndarray] = {}
        for name in self.ef.required_modalities:
            arr = blocks.get(name)
            if arr is not None and not np.isnan(np.asarray(arr)).any():
                spliced[name] = np.atleast_2d(np.asarray(arr, dtype=float))
            elif name in imputed:
                spliced[name] = np.atleast_2d(np.asarray(imputed[name], dtype=float))
            else:
                raise MissingPredictor(
                    f"imputer provides no values for required block {name!r}"
                )
        return spliced

    def values(self, blocks, row_ids, theta):
        return self.ef.evaluate(self._splice(blocks, row_ids), theta)

    def jacobian(self, blocks, row_ids, theta):
        return self.ef.jacobian(self._splice(blocks, row_ids), theta)


@dataclass
class GaussianMomentProxy(Predictor):
    """Exact conditional residual moments under a Gaussian spec."""

    spec: GaussianSpec
    ef: LinearRegression
    observed_names: tuple[str, ...]

    @property
    def d(self) -> int:
        return self.ef.d

    @property
    def inputs(self) -> tuple[str, ...]:
        return self.observed_names

    def values(self, blocks, row_ids, theta):
        return ols_conditional_moments(self.spec, self.ef, self.observed_names, theta, blocks)

    def jacobian(self, blocks, row_ids, theta):
        m, S = self.spec.conditional(self.observed_names, blocks)
        x_idx = self.spec.coord_indices(self.ef.covariates)
        xm = m[:, x_idx]
        s_xx = S[np.ix_(x_idx, x_idx)]
        return -(s_xx[None, :, :] + np.einsum("ni,nj->nij", xm, xm))


@dataclass
class MonteCarloExpectationProxy(Predictor):
    """Conditional residual expectation by averaging generative draws.

    Draws come from a conditional sampler (``GaussianSpec`` here) with a
    per-row stream keyed on (seed, row_id), so results are reproducible and
    order-independent.
    """

    spec: GaussianSpec
    ef: EstimatingFunction
    observed_names: tuple[str, ...]
    n_draws: int = 64
    seed: int = 0

    @property
    def d(self) -> int:
        return self.ef.d

    @property
    def inputs(self) -> tuple[str, ...]:
        return self.observed_names

    def _draws(self, blocks: Blocks, row_ids: np.ndarray) -> dict[str, np.ndarray]:
        offs = self.spec.offsets()
        row_ids = np.asarray(row_ids, dtype=np.int64)
        n = row_ids.shape[0]
        p = self.spec.mean.shape[0]
        draws = np.empty((n, self.n_draws, p))
        for i, rid in enumerate(row_ids):
            rng = np.random.Generator(
                np.random.Philox(key=np.array([self.seed, rid], dtype=np.uint64))
            )
            row_blocks = {name: np.atleast_2d(np.asarray(blocks[name]))[i : i + 1] for name in self.observed_names}
            draws[i] = self.spec.conditional_sample(self.observed_names, row_blocks, self.n_draws, rng)[0]
        flat = draws.reshape(n * self.n_draws, p)
        return {name: flat[:, offs[name][0] : offs[name][1]] for name in self.spec.schema.modalities}

    def values(self, blocks, row_ids, theta):
        split = self._draws(blocks, row_ids)
        vals = self.ef.evaluate(split, theta)
        return vals.reshape(len(row_ids), self.n_draws, self.d).mean(axis=1)

    def jacobian(self, blocks, row_ids, theta):
        split = self._draws(blocks, row_ids)
        jac = self.ef.jacobian(split, theta)
        return jac.reshape(len(row_ids), self.n_draws, self.d, self.d).mean(axis=1)


# -- the bank -----------------------------------------------------------------

@dataclass
class PredictorBank:
    """Per-pattern proxies, keyed by augmentation pattern mask."""

    mode: str
    entries: dict[int, Predictor]
    d: int

    def __post_init__(self):
        if self.mode not in (MODE_EXPECTATION, MODE_IMPUTATION):
            raise InvalidConfig(f"unknown prediction mode {self.mode!r}")
        for mask, pred in self.entries.items():
            if pred.d != self.d:
                raise InvalidConfig(
                    f"predictor for pattern {mask:b} outputs {pred.d} dims, expected {self.d}"
                )

    def patterns(self) -> tuple[int, ...]:
        return tuple(sorted(self.entries))

    def predictor_for(self, r: int) -> Predictor:
        try:
            return self.entries[r]
        except KeyError:
            raise MissingPredictor(f"no predictor for pattern mask {r:b}") from None

    def evaluate(
        self,
        r: int,
        dataset: ObservedDataset,
        sel: np.ndarray,
        theta: np.ndarray,
    ) -> np.ndarray:
        """Evaluate F_r on the selected rows; their masks must contain r."""
        pred = self.predictor_for(r)
        if not np.all((dataset.masks[sel] & r) == r):
            raise MaskMismatch(
                f"some selected rows do not observe pattern {mask_str(dataset, r)}"
            )
        names = dataset.schema.names_of(r)
        blocks = dataset.block_values(names, sel)
        return pred.values(blocks, dataset.row_ids[sel], theta)

    def jacobian(self, r: int, dataset: ObservedDataset, sel: np.ndarray, theta: np.ndarray) -> np.ndarray:
        pred = self.predictor_for(r)
        names = dataset.schema.names_of(r)
        blocks = dataset.block_values(names, sel)
        return pred.jacobian(blocks, dataset.row_ids[sel], theta)


def mask_str(dataset: ObservedDataset, mask: int) -> str:
    from .patterns import mask_to_string

    return mask_to_string(mask, dataset.schema.n_modalities)


def mean_bank(
    schema: Schema,
    ef,
    point_predictors: Mapping[int, PointPredictor],
    mode: str = MODE_EXPECTATION,
) -> PredictorBank:
    """Bank for the outcome-mean target from per-pattern point predictors.

    Patterns that already observe the outcome get the residual itself; both
    modes coincide for the mean target, so the mode tag is informational.
    """
    entries: dict[int, Predictor] = {}
    outcome_bit = 1 << schema.bit_of(ef.outcome)
    for mask, point in point_predictors.items():
        if mask & outcome_bit:
            entries[mask] = EstimatingFunctionProxy(ef)
        else:
            entries[mask] = MeanProxy(point)
    return PredictorBank(mode=mode, entries=entries, d=ef.d)
