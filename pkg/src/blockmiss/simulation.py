"""Synthetic designs, the remainder-variance study, and the replication harness.

Three data-generating processes are shipped: a high-dimensional outcome-mean
design, a low-dimensional correlated regression design, and a 3-variable
exchangeable Gaussian used to study the projection remainders exactly.  The
harness runs seeded replications (optionally in parallel) and accumulates
RMSE, empirical coverage, interval width, and covariance-trace metrics.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .data import ObservedDataset, Schema
from .errors import InvalidConfig, NotPositiveDefinite, SimulationFailure
from .estfun import LinearRegression, OutcomeMean
from .estimators import (
    TRACE,
    EstimateReport,
    Scalarization,
    cross_fit,
    naive_estimate,
    ppi_estimate,
    ppi_pp_estimate,
)
from .patterns import mask_to_string
from .predictors import (
    GaussianMomentProxy,
    GaussianSpec,
    LinearPredictorMap,
    NoisyMixturePredictor,
    PointPredictor,
    PredictorBank,
    joint_gaussian_from_regression,
    mean_bank,
)

# 3-modality layout shared by all shipped designs: X1 -> bit 0, X2 -> bit 1,
# Y -> bit 2.  Observed patterns: {X1}, {X1,X2}, {X1,Y}, full.
MASK_X1 = 0b001
MASK_X1X2 = 0b011
MASK_X1Y = 0b101
MASK_FULL = 0b111
WARMUP_MASKS = (MASK_X1, MASK_X1X2, MASK_X1Y, MASK_FULL)


def three_block_schema(p1: int, p2: int) -> Schema:
    return Schema(
        modalities=("X1", "X2", "Y"),
        columns={
            "X1": tuple(f"x1_{j}" for j in range(p1)),
            "X2": tuple(f"x2_{j}" for j in range(p2)),
            "Y": ("y",),
        },
    )


@dataclass(frozen=True)
class MeanDesign:
    """Outcome-mean design: independent unit-variance blocks, linear outcome.

    Pattern counts map onto the four shipped patterns; the misspecified
    variant adds a squared term to the outcome (used to train biased
    predictors on a shifted distribution).
    """

    kind: str = "mean41"
    n_complete: int = 500
    n_x1y: int = 500
    n_x1x2: int = 2000
    n_x1: int = 2000
    p1: int = 10
    p2: int = 20
    noise_sd: float = 1.0
    misspecified: bool = False
    multinomial_patterns: bool = False

    def __post_init__(self):
        counts = (self.n_complete, self.n_x1y, self.n_x1x2, self.n_x1)
        if min(counts) < 0 or self.n_complete <= 0:
            raise InvalidConfig("pattern counts must be nonnegative, complete count positive")

    @property
    def schema(self) -> Schema:
        return three_block_schema(self.p1, self.p2)

    @property
    def theta_star(self) -> np.ndarray:
        base = float(self.p1 + self.p2)
        if self.misspecified:
            base += 2.0 * self.p1  # E[X^2] = mu^2 + 1 = 2 per squared coordinate
        return np.array([base])

    def counts_by_mask(self) -> dict[int, int]:
        return {
            MASK_FULL: self.n_complete,
            MASK_X1Y: self.n_x1y,
            MASK_X1X2: self.n_x1x2,
            MASK_X1: self.n_x1,
        }


@dataclass(frozen=True)
class OLSDesign:
    """Regression design: equicorrelated Gaussian design, unit coefficients."""

    kind: str = "ols42"
    n_complete: int = 800
    n_x1y: int = 2000
    n_x1x2: int = 2000
    n_x1: int = 2000
    p1: int = 2
    p2: int = 2
    rho: float = 0.4
    noise_sd: float = 1.0
    multinomial_patterns: bool = False

    @property
    def schema(self) -> Schema:
        return three_block_schema(self.p1, self.p2)

    @property
    def theta_star(self) -> np.ndarray:
        return np.ones(self.p1 + self.p2)

    def cov_x(self) -> np.ndarray:
        p = self.p1 + self.p2
        cov = np.full((p, p), self.rho)
        np.fill_diagonal(cov, 1.0)
        return cov

    def gaussian_spec(self) -> GaussianSpec:
        return joint_gaussian_from_regression(
            self.schema,
            ("X1", "X2"),
            "Y",
            mean_x=np.zeros(self.p1 + self.p2),
            cov_x=self.cov_x(),
            beta=np.ones(self.p1 + self.p2),
            noise_var=self.noise_sd**2,
        )

    def counts_by_mask(self) -> dict[int, int]:
        return {
            MASK_FULL: self.n_complete,
            MASK_X1Y: self.n_x1y,
            MASK_X1X2: self.n_x1x2,
            MASK_X1: self.n_x1,
        }


@dataclass(frozen=True)
class ExchangeableDesign:
    """Three scalar variables with exchangeable correlation rho."""

    kind: str = "exchangeable3"
    rho: float = 0.0
    n_rows: int = 1000
    proportions: tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)  # canonical mask order
    multinomial_patterns: bool = False

    def __post_init__(self):
        if not -0.5 < self.rho < 1.0:
            raise NotPositiveDefinite(f"exchangeable 3x3 needs rho in (-0.5, 1), got {self.rho}")
        props = np.asarray(self.proportions, dtype=float)
        if props.shape != (4,) or np.any(props <= 0) or abs(props.sum() - 1.0) > 1e-9:
            raise InvalidConfig("proportions must be 4 positive values summing to 1")

    @property
    def schema(self) -> Schema:
        return three_block_schema(1, 1)

    @property
    def theta_star(self) -> np.ndarray:
        return np.array([0.0])

    def cov(self) -> np.ndarray:
        cov = np.full((3, 3), self.rho)
        np.fill_diagonal(cov, 1.0)
        return cov

    def counts_by_mask(self) -> dict[int, int]:
        counts = np.floor(np.asarray(self.proportions) * self.n_rows).astype(int)
        counts[-1] += self.n_rows - counts.sum()  # remainder to the full pattern
        return dict(zip(WARMUP_MASKS, counts.tolist()))


Design = MeanDesign | OLSDesign | ExchangeableDesign


def _assign_masks(design: Design, n_total: int, rng: np.random.Generator) -> np.ndarray:
    counts = design.counts_by_mask()
    masks_sorted = sorted(counts)
    if design.multinomial_patterns:
        probs = np.array([counts[m] for m in masks_sorted], dtype=float)
        probs /= probs.sum()
        draw = rng.multinomial(n_total, probs)
        per = dict(zip(masks_sorted, draw.tolist()))
    else:
        per = counts
    out = np.concatenate([np.full(per[m], m, dtype=np.int64) for m in masks_sorted])
    return out


def generate(design: Design, seed: int) -> tuple[ObservedDataset, np.ndarray]:
    """Draw a dataset from the design; masks are assigned independently of
    the values, so the missingness is completely at random by construction."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    counts = design.counts_by_mask()
    n = int(sum(counts.values()))
    if isinstance(design, MeanDesign):
        x1 = rng.standard_normal((n, design.p1)) + 1.0
        x2 = rng.standard_normal((n, design.p2)) + 1.0
        y = x1.sum(axis=1) + x2.sum(axis=1) + design.noise_sd * rng.standard_normal(n)
        if design.misspecified:
            y = y + (x1**2).sum(axis=1)
        blocks = {"X1": x1, "X2": x2, "Y": y[:, None]}
    elif isinstance(design, OLSDesign):
        chol = np.linalg.cholesky(design.cov_x())
        x = rng.standard_normal((n, design.p1 + design.p2)) @ chol.T
        y = x.sum(axis=1) + design.noise_sd * rng.standard_normal(n)
        blocks = {"X1": x[:, : design.p1], "X2": x[:, design.p1 :], "Y": y[:, None]}
    elif isinstance(design, ExchangeableDesign):
        chol = np.linalg.cholesky(design.cov())
        v = rng.standard_normal((n, 3)) @ chol.T
        blocks = {"X1": v[:, :1], "X2": v[:, 1:2], "Y": v[:, 2:]}
    else:
        raise InvalidConfig(f"unknown design {design!r}")
    masks = _assign_masks(design, n, rng)
    dataset = ObservedDataset(
        schema=design.schema,
        masks=masks,
        blocks=blocks,
        row_ids=np.arange(n, dtype=np.int64),
    )
    for m, name in enumerate(dataset.schema.modalities):
        absent = (masks >> m & 1) == 0
        dataset.blocks[name][absent] = np.nan
    return dataset, design.theta_star


# -- predictors for the shipped designs ----------------------------------------

def oracle_mean_points(design: MeanDesign) -> tuple[LinearPredictorMap, LinearPredictorMap]:
    """Exact conditional-mean predictors of the outcome under the correct DGP."""
    f = LinearPredictorMap(
        inputs=("X1",),
        targets=("Y",),
        target_dims=(1,),
        coef=np.ones((design.p1, 1)),
        intercept=np.array([float(design.p2)]),
    )
    g = LinearPredictorMap(
        inputs=("X1", "X2"),
        targets=("Y",),
        target_dims=(1,),
        coef=np.ones((design.p1 + design.p2, 1)),
        intercept=np.array([0.0]),
    )
    return f, g


def train_mean_points(
    design: MeanDesign, train_seed: int, n_train: int = 40000
) -> tuple[LinearPredictorMap, LinearPredictorMap]:
    """Least-squares predictors fit on an independent training draw.

    The training outcome follows the design's ``misspecified`` flag, so a
    misspecified design yields deliberately biased predictors for the
    correct-outcome evaluation data.
    """
    train_design = replace(
        design,
        n_complete=n_train,
        n_x1y=0,
        n_x1x2=0,
        n_x1=0,
        multinomial_patterns=False,
    )
    train_ds, _ = generate(train_design, train_seed)
    from .predictors import train_linear_predictor

    f = train_linear_predictor(train_ds, ("X1",), ("Y",))
    g = train_linear_predictor(train_ds, ("X1", "X2"), ("Y",))
    return f, g


def mean_target_bank(design: MeanDesign, f: PointPredictor, g: PointPredictor) -> PredictorBank:
    ef = OutcomeMean("Y")
    return mean_bank(
        design.schema,
        ef,
        {MASK_X1: f, MASK_X1X2: g, MASK_X1Y: f},  # X1Y pattern uses the residual itself
    )


def ols_oracle_bank(design: OLSDesign) -> PredictorBank:
    ef = LinearRegression(("X1", "X2"), "Y", dims=(design.p1, design.p2))
    spec = design.gaussian_spec()
    entries = {
        MASK_X1: GaussianMomentProxy(spec, ef, ("X1",)),
        MASK_X1X2: GaussianMomentProxy(spec, ef, ("X1", "X2")),
        MASK_X1Y: GaussianMomentProxy(spec, ef, ("X1", "Y")),
    }
    return PredictorBank(mode="expectation", entries=entries, d=ef.d)


# -- exact remainder algebra ----------------------------------------------------

def _projection_matrix(cov: np.ndarray, observed: Sequence[int]) -> np.ndarray:
    """Matrix B with E[V | V_obs] = B V for a zero-mean Gaussian vector."""
    p = cov.shape[0]
    B = np.zeros((p, p))
    obs = list(observed)
    mis = [i for i in range(p) if i not in obs]
    for i in obs:
        B[i, i] = 1.0
    if mis and obs:
        c_oo = cov[np.ix_(obs, obs)]
        c_uo = cov[np.ix_(mis, obs)]
        B[np.ix_(mis, obs)] = np.linalg.solve(c_oo, c_uo.T).T
    return B


def remainder_study(
    rho_grid: Sequence[float],
    proportions: Sequence[float] = (0.25, 0.25, 0.25, 0.25),
    mc_draws: int = 0,
    seed: int = 0,
) -> pd.DataFrame:
    """Exact variances of the almost-eigen main terms and their remainders.

    Works on the 3-variable exchangeable Gaussian with the shipped pattern
    set and f = Y.  Conditional expectation maps a linear function to a
    linear function, so every projection composes exactly on coefficient
    vectors; variances follow from the covariance quadratic form.  Each row
    reports lam_s * P_s(f) and Rem_s(f) variances; the remainder columns of
    a grid point sum to zero as coefficient vectors by construction, and
    optional Monte Carlo columns re-estimate both variances from draws.
    """
    props = np.asarray(proportions, dtype=float)
    if props.shape != (4,) or np.any(props <= 0) or abs(props.sum() - 1.0) > 1e-9:
        raise InvalidConfig("proportions must be 4 positive values summing to 1")
    pi = dict(zip(WARMUP_MASKS, props))
    observed_coords = {MASK_X1: [0], MASK_X1X2: [0, 1], MASK_X1Y: [0, 2], MASK_FULL: [0, 1, 2]}
    f = np.array([0.0, 0.0, 1.0])  # coefficients of (X1, X2, Y); f = Y
    rows = []
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    for rho in rho_grid:
        cov = np.full((3, 3), float(rho))
        np.fill_diagonal(cov, 1.0)
        eigmin = float(np.linalg.eigvalsh(cov).min())
        if eigmin <= 0:
            raise NotPositiveDefinite(f"rho={rho} gives min eigenvalue {eigmin:.3g}")
        B = {r: _projection_matrix(cov, observed_coords[r]) for r in WARMUP_MASKS}
        lam = {
            s: sum(pi[r] for r in WARMUP_MASKS if r & s == s)
            for s in range(1, 8)
        }
        p_coeff: dict[int, np.ndarray] = {}
        for s in range(1, 8):
            total = np.zeros(3)
            for r in WARMUP_MASKS:
                if r & s == r:  # r subset of s
                    sign = (-1.0) ** (bin(s).count("1") - bin(r).count("1"))
                    total += sign * (B[r].T @ f)
            p_coeff[s] = total
        rem_coeff: dict[int, np.ndarray] = {}
        for s in range(1, 8):
            total = np.zeros(3)
            for r in WARMUP_MASKS:
                if r & s != s:  # s not a subset of r
                    total += pi[r] * (B[r].T @ p_coeff[s])
            rem_coeff[s] = total
        identity_gap = float(np.max(np.abs(sum(rem_coeff.values()))))
        draws = None
        if mc_draws:
            chol = np.linalg.cholesky(cov)
            draws = rng.standard_normal((mc_draws, 3)) @ chol.T
        for s in sorted(p_coeff):
            if not any(r & s == r for r in WARMUP_MASKS):
                continue  # no observed pattern inside s: both terms vanish identically
            main = lam[s] * p_coeff[s]
            row = {
                "s": mask_to_string(s, 3),
                "rho": float(rho),
                "lam_s": lam[s],
                "var_main": float(main @ cov @ main),
                "var_rem": float(rem_coeff[s] @ cov @ rem_coeff[s]),
                "remainder_identity_gap": identity_gap,
            }
            if draws is not None:
                vm = draws @ main
                vr = draws @ rem_coeff[s]
                row["mc_var_main"] = float(vm.var(ddof=1))
                row["mc_var_rem"] = float(vr.var(ddof=1))
                row["mc_se_main"] = float(vm.var(ddof=1) * np.sqrt(2.0 / (mc_draws - 1)))
                row["mc_se_rem"] = float(vr.var(ddof=1) * np.sqrt(2.0 / (mc_draws - 1)))
            rows.append(row)
    return pd.DataFrame(rows)


# -- replication harness ---------------------------------------------------------

ESTIMATOR_NAMES = ("naive", "ppi", "ppi_pp", "ibm_ps", "ibm_ray", "ibm_adaptive")


@dataclass(frozen=True)
class ReplicationPlan:
    """Everything a worker needs to run one replication (picklable)."""

    design: Design
    estimators: tuple[str, ...]
    f_point: PointPredictor | None = None
    g_point: PointPredictor | None = None
    ols_bank: PredictorBank | None = None
    level: float = 0.95
    scalarization: Scalarization = TRACE
    split: str = "stratified"

    def __post_init__(self):
        for name in self.estimators:
            if name not in ESTIMATOR_NAMES:
                raise InvalidConfig(f"unknown estimator {name!r}")

    def bank(self) -> PredictorBank | None:
        if isinstance(self.design, MeanDesign):
            if self.f_point is None or self.g_point is None:
                return None
            return mean_target_bank(self.design, self.f_point, self.g_point)
        return self.ols_bank

    def ef(self):
        if isinstance(self.design, OLSDesign):
            return LinearRegression(("X1", "X2"), "Y", dims=(self.design.p1, self.design.p2))
        return OutcomeMean("Y")


def _rep_seed(seed: int, rep: int, slot: int = 0) -> int:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(rep, slot))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def run_one_replication(plan: ReplicationPlan, seed: int, rep: int) -> dict[str, dict]:
    """One dataset draw, all estimators; errors recorded per estimator."""
    dataset, theta_star = generate(plan.design, _rep_seed(seed, rep, 0))
    ef = plan.ef()
    bank = plan.bank()
    out: dict[str, dict] = {"_theta_star": {"theta": theta_star.tolist()}}
    for j, name in enumerate(plan.estimators):
        try:
            if name == "naive":
                report = naive_estimate(dataset, ef, level=plan.level)
            elif name == "ppi":
                report = ppi_estimate(dataset, ef, plan.f_point, level=plan.level)
            elif name == "ppi_pp":
                report = ppi_pp_estimate(dataset, ef, plan.f_point, level=plan.level)
            else:
                scheme = name.removeprefix("ibm_")
                report = cross_fit(
                    dataset,
                    ef,
                    bank,
                    scheme=scheme,
                    scalarization=plan.scalarization,
                    seed=_rep_seed(seed, rep, 1 + j),
                    level=plan.level,
                    split=plan.split,
                )
            out[name] = _summarize_report(report, theta_star)
        except Exception as exc:  # noqa: BLE001 - failures are data, not crashes
            out[name] = {"error": f"{type(exc).__name__}: {exc}"}
    return out


def _summarize_report(report: EstimateReport, theta_star: np.ndarray) -> dict:
    ci = np.asarray(report.ci)
    covered = (ci[:, 0] <= theta_star) & (theta_star <= ci[:, 1])
    diag = report.diagnostics
    cond = diag.get("cond_G")
    return {
        "theta": report.theta_hat.tolist(),
        "sq_err": float(np.sum((report.theta_hat - theta_star) ** 2)),
        "covered": float(np.mean(covered)),
        "width": float(np.mean(ci[:, 1] - ci[:, 0])),
        "trace": float(np.trace(report.sigma_hat) / report.n_rows),
        "cond": float(np.max(cond)) if cond else float("nan"),
        "gain": float(np.mean(diag["gain"])) if "gain" in diag else float("nan"),
    }


def _worker(args) -> tuple[int, dict]:
    plan, seed, rep = args
    return rep, run_one_replication(plan, seed, rep)


@dataclass
class MetricsTable:
    """Aggregated replication metrics, one row per estimator (and grid point)."""

    rows: list[dict]
    n_reps: int
    seed: int

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    def to_json(self) -> str:
        import json

        return json.dumps(
            {"n_reps": self.n_reps, "seed": self.seed, "rows": self.rows},
            sort_keys=True,
        )


def run_replications(
    plan: ReplicationPlan,
    n_reps: int,
    seed: int,
    jobs: int = 1,
    max_failure_rate: float = 0.01,
    extra_fields: Mapping[str, object] | None = None,
    raw: bool = False,
) -> MetricsTable | tuple[MetricsTable, list[dict]]:
    """Run seeded replications and aggregate metrics.

    Replication ``rep`` always uses the seed stream (seed, rep), so results
    are identical for any ``jobs`` setting; failed replications are dropped
    from the metrics and counted, and a failure rate above
    ``max_failure_rate`` raises.
    """
    if n_reps < 1:
        raise InvalidConfig("n_reps must be at least 1")
    results: list[dict | None] = [None] * n_reps
    if jobs <= 1:
        for rep in range(n_reps):
            results[rep] = run_one_replication(plan, seed, rep)
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for rep, res in pool.map(
                _worker, [(plan, seed, rep) for rep in range(n_reps)], chunksize=8
            ):
                results[rep] = res
    rows = []
    for name in plan.estimators:
        oks = [r[name] for r in results if "error" not in r[name]]
        failures = n_reps - len(oks)
        if failures > max_failure_rate * n_reps:
            messages = {r[name]["error"] for r in results if "error" in r[name]}
            raise SimulationFailure(
                f"{name}: {failures}/{n_reps} replications failed: {sorted(messages)[:3]}"
            )
        sq = np.array([o["sq_err"] for o in oks])
        row = {
            "estimator": name,
            "n_reps": n_reps,
            "failures": failures,
            "rmse": float(np.sqrt(sq.mean())),
            "coverage": float(np.mean([o["covered"] for o in oks])),
            "mean_ci_width": float(np.mean([o["width"] for o in oks])),
            "mean_trace": float(np.mean([o["trace"] for o in oks])),
        }
        if extra_fields:
            row.update(extra_fields)
        rows.append(row)
    table = MetricsTable(rows=rows, n_reps=n_reps, seed=seed)
    if raw:
        return table, [r for r in results]
    return table


def quality_sweep(
    q_grid: Sequence[float],
    labeled_size: int,
    n_reps: int,
    seed: int,
    unlabeled_size: int = 2000,
    estimators: Sequence[str] = ("naive", "ppi_pp", "ibm_ps", "ibm_ray", "ibm_adaptive"),
    jobs: int = 1,
    noise_sd: float = 2.0,
) -> MetricsTable:
    """Metrics across predictor-quality mixtures f_q, g_q.

    ``q=0`` uses the exact conditional means, ``q=1`` pure noise.  Each grid
    point also reports how often the pattern-stratified tuning matrix is
    worse conditioned than the superset-weighted one on the same data.
    """
    design = MeanDesign(
        n_complete=labeled_size,
        n_x1y=labeled_size,
        n_x1x2=unlabeled_size,
        n_x1=unlabeled_size,
    )
    f0, g0 = oracle_mean_points(design)
    all_rows: list[dict] = []
    for i_q, q in enumerate(q_grid):
        f_q = NoisyMixturePredictor(base=f0, q=float(q), noise_sd=noise_sd, seed=_rep_seed(seed, 10_000 + i_q, 0))
        g_q = NoisyMixturePredictor(base=g0, q=float(q), noise_sd=noise_sd, seed=_rep_seed(seed, 20_000 + i_q, 0))
        plan = ReplicationPlan(design=design, estimators=tuple(estimators), f_point=f_q, g_point=g_q)
        table, raw_results = run_replications(
            plan, n_reps, _rep_seed(seed, i_q, 0), jobs=jobs,
            extra_fields={"q": float(q), "labeled_size": labeled_size},
            raw=True,
        )
        frac = _fraction_ps_worse_conditioned(raw_results)
        for row in table.rows:
            row["frac_ps_cond_greater"] = frac
        all_rows.extend(table.rows)
    return MetricsTable(rows=all_rows, n_reps=n_reps, seed=seed)


def _fraction_ps_worse_conditioned(raw_results: Sequence[dict]) -> float:
    pairs = [
        (r["ibm_ps"]["cond"], r["ibm_ray"]["cond"])
        for r in raw_results
        if "ibm_ps" in r
        and "ibm_ray" in r
        and "error" not in r["ibm_ps"]
        and "error" not in r["ibm_ray"]
    ]
    if not pairs:
        return float("nan")
    return float(np.mean([ps > ray for ps, ray in pairs]))
