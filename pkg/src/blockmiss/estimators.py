"""Estimators for blockwise-missing data.

Implements the complete-case (naive) estimator, the two-group
prediction-augmented mean estimators (plain and variance-tuned), and the
pattern-augmented family: a full-pattern inverse-probability term plus one
tuned augmentation term per observed pattern, weighted by the ``ps`` or
``ray`` profiles or by explicit per-(pattern, dataset) coefficients chosen
through an equality-constrained quadratic program.  Tuning minimizes a
linear scalarization (trace or contrast) of the sandwich covariance; a
two-fold cross-fit separates tuning from solving.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import norm

from . import patterns
from .data import ObservedDataset, fold_is_degenerate, split_indices
from .errors import (
    DegenerateProgram,
    FoldDegenerate,
    InsufficientCompleteRows,
    InsufficientData,
    InvalidConfig,
    InvalidLevel,
    MaskMismatch,
    NotMeanTarget,
    NoUnlabeledRows,
    SingularA,
    SingularG,
    SingularKKT,
)
from .estfun import EstimatingFunction, OutcomeMean, solve_root
from .patterns import (
    SCHEME_ADAPTIVE,
    SCHEME_PS,
    SCHEME_RAY,
    PatternTable,
    WeightScheme,
    gamma_eta,
    mask_to_string,
    weight_profile,
)
from .predictors import PointPredictor, PredictorBank

RIDGE_EIG_THRESHOLD = 1e-10
RIDGE_SCALE = 1e-8
KKT_RESIDUAL_TOL = 1e-10


# -- scalarization ------------------------------------------------------------

@dataclass(frozen=True)
class Scalarization:
    """Linear functional of the sandwich covariance being minimized."""

    kind: str = "trace"
    contrast: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("trace", "contrast"):
            raise InvalidConfig(f"unknown scalarization {self.kind!r}")
        if self.kind == "contrast":
            if self.contrast is None:
                raise InvalidConfig("contrast scalarization needs a vector")
            object.__setattr__(
                self, "contrast", np.asarray(self.contrast, dtype=float).reshape(-1)
            )


TRACE = Scalarization("trace")


def _block_scalarize(S4: np.ndarray, a_inv: np.ndarray, scal: Scalarization) -> np.ndarray:
    """Apply C -> l(A^-1 C A^-T) to every (d x d) block of the joint covariance."""
    if scal.kind == "trace":
        w = a_inv.T @ a_inv  # l(C) = tr(A^-1 C A^-T) = <C, A^-T A^-1>
        return np.einsum("aibj,ij->ab", S4, w)
    u = a_inv.T @ scal.contrast
    return np.einsum("aibj,i,j->ab", S4, u, u)


# -- reports ------------------------------------------------------------------

def zscore(level: float) -> float:
    if not 0.0 < level < 1.0:
        raise InvalidLevel(f"confidence level must be in (0, 1), got {level}")
    return float(norm.ppf(0.5 + level / 2.0))


@dataclass
class EstimateReport:
    """Point estimate, scaled covariance, intervals, and diagnostics.

    ``sigma_hat`` estimates the covariance of sqrt(N) (theta_hat - theta*),
    so the per-coordinate half-width is z * sqrt(sigma_hat[j, j] / N).
    """

    estimator: str
    theta_hat: np.ndarray
    sigma_hat: np.ndarray
    n_rows: int
    level: float
    alpha: dict[str, float] = field(default_factory=dict)
    ci: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta_hat = np.asarray(self.theta_hat, dtype=float).reshape(-1)
        self.sigma_hat = np.atleast_2d(np.asarray(self.sigma_hat, dtype=float))
        if self.ci is None:
            self.ci = confidence_interval(self, self.level)

    @property
    def d(self) -> int:
        return self.theta_hat.shape[0]

    def half_widths(self) -> np.ndarray:
        return zscore(self.level) * np.sqrt(np.diag(self.sigma_hat) / self.n_rows)

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "n_rows": int(self.n_rows),
            "level": self.level,
            "theta_hat": [float(v) for v in self.theta_hat],
            "sigma_hat": [float(v) for v in self.sigma_hat.ravel()],
            "alpha": {k: float(v) for k, v in self.alpha.items()},
            "ci": [[float(lo), float(hi)] for lo, hi in self.ci],
            "diagnostics": _jsonable(self.diagnostics),
        }

    def to_json(self, indent: int | None = None) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=indent)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    return obj


def confidence_interval(report: EstimateReport, level: float) -> np.ndarray:
    """Per-coordinate normal intervals theta_j +/- z sqrt(sigma_jj / N)."""
    half = zscore(level) * np.sqrt(np.diag(report.sigma_hat) / report.n_rows)
    return np.column_stack([report.theta_hat - half, report.theta_hat + half])


# -- naive (complete-case on the rows the residual needs) ---------------------

def _usable_rows(dataset: ObservedDataset, ef: EstimatingFunction) -> np.ndarray:
    mask = dataset.schema.mask_of(ef.required_modalities)
    return dataset.rows_containing(mask)


def naive_estimate(
    dataset: ObservedDataset,
    ef: EstimatingFunction,
    level: float = 0.95,
    theta0: np.ndarray | None = None,
) -> EstimateReport:
    """Solve the residual equation on the rows observing what it needs."""
    sel = _usable_rows(dataset, ef)
    n_usable = int(sel.sum())
    if n_usable < ef.d + 1:
        raise InsufficientData(
            f"{n_usable} usable rows for a {ef.d}-dimensional target"
        )
    blocks = dataset.block_values(ef.required_modalities, sel)
    theta0 = np.zeros(ef.d) if theta0 is None else np.asarray(theta0, dtype=float)
    theta = solve_root(
        lambda t: ef.evaluate(blocks, t).mean(axis=0),
        lambda t: ef.jacobian(blocks, t).mean(axis=0),
        theta0,
        affine=ef.affine,
    )
    a_hat = ef.jacobian(blocks, theta).mean(axis=0)
    resid = ef.evaluate(blocks, theta)
    v_hat = np.atleast_2d(np.cov(resid, rowvar=False, ddof=1))
    a_inv = np.linalg.inv(a_hat)
    pi_usable = n_usable / dataset.n_rows
    sigma = a_inv @ v_hat @ a_inv.T / pi_usable
    return EstimateReport(
        estimator="naive",
        theta_hat=theta,
        sigma_hat=sigma,
        n_rows=dataset.n_rows,
        level=level,
        diagnostics={"n_usable": n_usable, "pi_usable": pi_usable},
    )


# -- two-group augmented mean (labeled vs unlabeled) ---------------------------

def _ppi_core(
    dataset: ObservedDataset,
    ef: EstimatingFunction,
    point: PointPredictor,
    tuned: bool,
    level: float,
) -> EstimateReport:
    if not isinstance(ef, OutcomeMean):
        raise NotMeanTarget("two-group augmentation is defined for the outcome mean")
    schema = dataset.schema
    outcome_mask = schema.mask_of((ef.outcome,))
    labeled = dataset.rows_containing(outcome_mask)
    unlabeled = ~labeled
    if not unlabeled.any():
        raise NoUnlabeledRows("every row observes the outcome")
    input_mask = schema.mask_of(point.inputs)
    if not bool(np.all((dataset.masks & input_mask) == input_mask)):
        raise MaskMismatch("the predictor inputs are not observed on every row")

    f_all = point.predict(dataset.block_values(point.inputs), dataset.row_ids)
    y_l = dataset.blocks[ef.outcome][labeled]
    f_l, f_u = f_all[labeled], f_all[unlabeled]
    n, n_l, n_u = dataset.n_rows, int(labeled.sum()), int(unlabeled.sum())
    pi_l, pi_u = n_l / n, n_u / n

    v_y = np.atleast_2d(np.cov(y_l, rowvar=False, ddof=1))
    v_f = np.var(f_all, axis=0, ddof=1)
    c_yf = _cross_cov(y_l, f_l)

    lever = 1.0 / pi_u + 1.0 / pi_l
    if tuned:
        with np.errstate(divide="ignore", invalid="ignore"):
            alpha = np.where(v_f > 0, np.diag(c_yf) / pi_l / (v_f * lever), 0.0)
    else:
        alpha = np.ones(ef.d)

    theta = y_l.mean(axis=0) + alpha * (f_u.mean(axis=0) - f_l.mean(axis=0))
    d_a = np.diag(alpha)
    sigma = (
        v_y / pi_l
        + d_a @ np.atleast_2d(np.cov(f_all, rowvar=False, ddof=1)) @ d_a * lever
        - (d_a @ c_yf.T + c_yf @ d_a) / pi_l
    )
    name = "ppi++" if tuned else "ppi"
    return EstimateReport(
        estimator=name,
        theta_hat=theta,
        sigma_hat=sigma,
        n_rows=n,
        level=level,
        alpha={"alpha_f" if ef.d == 1 else f"alpha_f_{j}": float(a) for j, a in enumerate(alpha)}
        if tuned
        else {},
        diagnostics={"n_labeled": n_l, "n_unlabeled": n_u},
    )


def _cross_cov(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    return ac.T @ bc / (a.shape[0] - 1)


def ppi_estimate(dataset, ef, point_predictor, level: float = 0.95) -> EstimateReport:
    """Augmented mean with unit weight on the prediction correction."""
    return _ppi_core(dataset, ef, point_predictor, tuned=False, level=level)


def ppi_pp_estimate(dataset, ef, point_predictor, level: float = 0.95) -> EstimateReport:
    """Augmented mean with the variance-minimizing correction weight."""
    return _ppi_core(dataset, ef, point_predictor, tuned=True, level=level)


# -- shared fold moments -------------------------------------------------------

@dataclass
class FoldMoments:
    """Complete-row moment estimates a fold's tuning and variance share."""

    index: tuple[int, ...]
    a_hat: np.ndarray
    a_inv: np.ndarray
    S4: np.ndarray  # (k+1, d, k+1, d) joint covariance of (psi, F_1..F_k)
    n_complete: int
    pilot: np.ndarray

    def scalarized(self, scal: Scalarization) -> np.ndarray:
        return _block_scalarize(self.S4, self.a_inv, scal)


def augmentation_index(table: PatternTable, bank: PredictorBank) -> tuple[int, ...]:
    """Observed non-full patterns with a predictor, canonical order."""
    return tuple(r for r in table.augmentation_masks() if r in bank.entries)


def fold_moments(
    fold: ObservedDataset,
    ef: EstimatingFunction,
    bank: PredictorBank,
    index: Sequence[int],
    pilot: np.ndarray | None = None,
) -> FoldMoments:
    """Jacobian and joint residual/proxy covariance from complete rows."""
    full = fold.schema.full_mask
    sel = fold.rows_matching(full)
    n_c = int(sel.sum())
    if n_c < ef.d + 2:
        raise InsufficientCompleteRows(
            f"{n_c} complete rows; need at least {ef.d + 2}"
        )
    if pilot is None:
        pilot = naive_estimate(fold, ef).theta_hat
    blocks = fold.block_values(ef.required_modalities, sel)
    cols = [ef.evaluate(blocks, pilot)]
    for r in index:
        cols.append(bank.evaluate(r, fold, sel, pilot))
    stack = np.hstack(cols)
    S = np.atleast_2d(np.cov(stack, rowvar=False, ddof=1))
    k1 = len(index) + 1
    S4 = S.reshape(k1, ef.d, k1, ef.d)
    a_hat = ef.jacobian(blocks, pilot).mean(axis=0)
    if not np.all(np.isfinite(a_hat)) or np.linalg.cond(a_hat) > 1e12:
        raise SingularA("mean residual Jacobian is numerically singular")
    return FoldMoments(
        index=tuple(index),
        a_hat=a_hat,
        a_inv=np.linalg.inv(a_hat),
        S4=S4,
        n_complete=n_c,
        pilot=np.asarray(pilot, dtype=float),
    )


# -- G / L and the optimal per-pattern weights ---------------------------------

@dataclass
class GLEstimate:
    """Quadratic model of the scalarized variance in the tuning weights.

    The scalarized variance is ``c0 + 2 L' a + a' G a`` for weight vector
    ``a`` over ``index``.
    """

    G: np.ndarray
    L: np.ndarray
    a_hat: np.ndarray
    index: tuple[int, ...]
    scalarization: Scalarization
    c0: float
    cond_g: float
    ridged: bool
    pi_full: float


def _ridge(mat: np.ndarray) -> tuple[np.ndarray, float, bool]:
    """Symmetrize; report condition number; add a ridge when near-singular."""
    mat = (mat + mat.T) / 2.0
    k = mat.shape[0]
    if k == 0:
        return mat, 1.0, False
    eig = np.linalg.eigvalsh(mat)
    scale = np.trace(mat) / k
    if scale <= 0:
        scale = max(float(np.abs(eig).max()), 1.0)
    cond = float(eig.max() / eig.min()) if eig.min() > 0 else float("inf")
    if eig.min() < RIDGE_EIG_THRESHOLD * scale:
        return mat + RIDGE_SCALE * scale * np.eye(k), cond, True
    return mat, cond, False


def assemble_G_L(
    K: np.ndarray, gamma: np.ndarray, eta: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Combine scalarized covariances with the weight moments.

    ``K`` is the (k+1) x (k+1) scalarized block matrix with the residual in
    slot 0; entries of G are eta * K and of L gamma * K.
    """
    G = eta * K[1:, 1:]
    L = gamma * K[0, 1:]
    return (G + G.T) / 2.0, L


def estimate_G_L(
    fold: ObservedDataset,
    ef: EstimatingFunction,
    bank: PredictorBank,
    scheme: WeightScheme,
    scalarization: Scalarization = TRACE,
    table: PatternTable | None = None,
    pilot: np.ndarray | None = None,
    moments: FoldMoments | None = None,
) -> GLEstimate:
    """Estimate the tuning quadratic for a ``ps`` or ``ray`` scheme."""
    if scheme.kind == SCHEME_ADAPTIVE:
        raise InvalidConfig("use fit_adaptive for the adaptive scheme")
    if table is None:
        table = fold.pattern_table(min_count=0)
    index = augmentation_index(table, bank)
    if moments is None:
        moments = fold_moments(fold, ef, bank, index, pilot)
    K = moments.scalarized(scalarization)
    gamma, eta = gamma_eta(scheme, table, index)
    G, L = assemble_G_L(K, gamma, eta)
    G, cond_g, ridged = _ridge(G)
    return GLEstimate(
        G=G,
        L=L,
        a_hat=moments.a_hat,
        index=index,
        scalarization=scalarization,
        c0=float(K[0, 0]) / table.pi_full,
        cond_g=cond_g,
        ridged=ridged,
        pi_full=table.pi_full,
    )


def optimal_alpha(gl: GLEstimate, allow_ridge: bool = True) -> tuple[np.ndarray, float]:
    """Minimizer of the tuning quadratic and the variance reduction it buys."""
    if gl.index == ():
        return np.zeros(0), 0.0
    G = gl.G
    if not allow_ridge and not np.isfinite(gl.cond_g):
        raise SingularG("G is singular and ridging is disabled")
    try:
        alpha = np.linalg.solve(G, -gl.L)
    except np.linalg.LinAlgError:
        raise SingularG("G is numerically singular") from None
    gain = float(-gl.L @ alpha)
    return alpha, gain


def quadratic_value(gl: GLEstimate, alpha: np.ndarray) -> float:
    """Scalarized variance of the tuned equation at the given weights."""
    alpha = np.asarray(alpha, dtype=float)
    return gl.c0 + float(alpha @ gl.G @ alpha) + 2.0 * float(gl.L @ alpha)


# -- estimating-equation solve with sandwich ----------------------------------

def _coefficient_profiles(
    scheme: WeightScheme,
    alpha: np.ndarray | None,
    table: PatternTable,
    index: Sequence[int],
) -> np.ndarray:
    """Rows: coefficient of (psi, F_1..F_k) under each observed pattern."""
    n_pat = len(table.masks)
    U = np.zeros((len(index) + 1, n_pat))
    U[0, table.index_of(table.full_mask)] = 1.0 / table.pi_full
    if scheme.kind in (SCHEME_PS, SCHEME_RAY):
        if alpha is None:
            raise InvalidConfig("ps/ray schemes need a weight vector")
        alpha = np.asarray(alpha, dtype=float)
        if alpha.shape != (len(index),):
            raise InvalidConfig(
                f"weight vector has length {alpha.shape}, index has {len(index)}"
            )
        W = weight_profile(scheme, table, index)
        U[1:] = alpha[:, None] * W
    else:
        for j, r in enumerate(index):
            for i, p in enumerate(table.masks):
                coeff = scheme.alpha.get((r, p), 0.0)
                if coeff:
                    U[1 + j, i] = coeff / table.pi[i]
    return U


def ibm_solve(
    fold: ObservedDataset,
    ef: EstimatingFunction,
    bank: PredictorBank,
    scheme: WeightScheme,
    alpha: np.ndarray | None = None,
    table: PatternTable | None = None,
    pilot: np.ndarray | None = None,
    moments: FoldMoments | None = None,
) -> tuple[np.ndarray, np.ndarray, dict]:
    """Solve the pattern-augmented estimating equation on one fold.

    Returns the estimate, the sandwich covariance of sqrt(n_fold) times the
    estimation error, and solver diagnostics.  Pattern proportions come from
    ``table`` (by default the full-data table is what callers pass in, which
    keeps the weights stable on small folds).
    """
    if table is None:
        table = fold.pattern_table(min_count=0)
    index = augmentation_index(table, bank)
    U = _coefficient_profiles(scheme, alpha, table, index)
    pat_idx = np.array([table.index_of(int(m)) for m in fold.masks])
    n = fold.n_rows

    full = fold.schema.full_mask
    sel_full = fold.rows_matching(full)
    blocks_full = fold.block_values(ef.required_modalities, sel_full)
    c_psi = U[0, pat_idx[sel_full]]
    term_rows = []
    for j, r in enumerate(index):
        coeffs = U[1 + j, pat_idx]
        sel_j = coeffs != 0.0
        if not np.all((fold.masks[sel_j] & r) == r):
            raise MaskMismatch(
                f"nonzero weight on rows not observing pattern {mask_to_string(r, fold.schema.n_modalities)}"
            )
        term_rows.append((r, sel_j, coeffs[sel_j]))

    def residual(theta):
        out = (c_psi[:, None] * ef.evaluate(blocks_full, theta)).sum(axis=0)
        for r, sel_j, coeffs in term_rows:
            if sel_j.any():
                out = out + (coeffs[:, None] * bank.evaluate(r, fold, sel_j, theta)).sum(axis=0)
        return out / n

    def jacobian(theta):
        out = (c_psi[:, None, None] * ef.jacobian(blocks_full, theta)).sum(axis=0)
        for r, sel_j, coeffs in term_rows:
            if sel_j.any():
                out = out + (coeffs[:, None, None] * bank.jacobian(r, fold, sel_j, theta)).sum(axis=0)
        return out / n

    if moments is None:
        moments = fold_moments(fold, ef, bank, index, pilot)
    theta = solve_root(residual, jacobian, moments.pilot, affine=ef.affine)

    gram = (U * table.pi) @ U.T
    inner = np.einsum("ab,aibj->ij", gram, moments.S4)
    sigma = moments.a_inv @ inner @ moments.a_inv.T
    sigma = (sigma + sigma.T) / 2.0
    info = {
        "n_fold": n,
        "n_complete": moments.n_complete,
        "residual_norm": float(np.max(np.abs(residual(theta)))),
    }
    return theta, sigma, info


# -- adaptive scheme: equality-constrained quadratic program -------------------

@dataclass
class AdaptiveFit:
    """Solved tuning program for the per-(pattern, dataset) coefficients."""

    variables: tuple[tuple[int, int], ...]  # (augmentation r, dataset s)
    alpha_vec: np.ndarray
    alpha: dict[tuple[int, int], float]
    H: np.ndarray  # post-ridge quadratic term
    g: np.ndarray
    c0: float
    objective_value: float
    constraint_residual: float
    cond_h: float
    ridged: bool
    index: tuple[int, ...]

    def objective(self, alpha_vec: np.ndarray) -> float:
        alpha_vec = np.asarray(alpha_vec, dtype=float)
        return self.c0 + float(alpha_vec @ self.H @ alpha_vec) + float(self.g @ alpha_vec)

    def embed(self, coefficients: Mapping[tuple[int, int], float]) -> np.ndarray:
        """Stack an (r, s) coefficient map onto this fit's variable order."""
        return np.array([coefficients.get(v, 0.0) for v in self.variables])

    def scheme(self) -> WeightScheme:
        return WeightScheme(SCHEME_ADAPTIVE, alpha=self.alpha)


def fit_adaptive(
    fold: ObservedDataset,
    ef: EstimatingFunction,
    bank: PredictorBank,
    scalarization: Scalarization = TRACE,
    table: PatternTable | None = None,
    pilot: np.ndarray | None = None,
    moments: FoldMoments | None = None,
) -> AdaptiveFit:
    """Choose the adaptive coefficients by a KKT solve of the tuning QP.

    Minimizes the scalarized sandwich variance over all coefficients with
    zero row sums; the quadratic term is block-diagonal across dataset
    patterns, with the full pattern contributing both its quadratic block
    and the linear cross-covariance with the residual.
    """
    if table is None:
        table = fold.pattern_table(min_count=0)
    index = augmentation_index(table, bank)
    if moments is None:
        moments = fold_moments(fold, ef, bank, index, pilot)
    K = moments.scalarized(scalarization)

    variables: list[tuple[int, int]] = []
    kept: list[int] = []
    for r in index:
        admissible = [s for s in table.masks if patterns.is_subset(r, s)]
        if len(admissible) < 2:
            continue  # the constraint would force all coefficients to zero
        kept.append(r)
        variables.extend((r, s) for s in admissible)
    if not variables:
        raise DegenerateProgram("no free tuning coefficients")
    pos = {v: i for i, v in enumerate(variables)}
    j_of = {r: j for j, r in enumerate(index)}
    n_var = len(variables)

    H = np.zeros((n_var, n_var))
    g = np.zeros(n_var)
    full = table.full_mask
    K_ff = K[1:, 1:]
    for i_s, s in enumerate(table.masks):
        members = [r for r in kept if patterns.is_subset(r, s)]
        if not members:
            continue
        idx = [pos[(r, s)] for r in members]
        jdx = [j_of[r] for r in members]
        H[np.ix_(idx, idx)] += K_ff[np.ix_(jdx, jdx)] / table.pi[i_s]
        if s == full:
            for r in members:
                g[pos[(r, full)]] = 2.0 * K[0, 1 + j_of[r]] / table.pi_full

    H, cond_h, ridged = _ridge(H)

    n_con = len(kept)
    C = np.zeros((n_con, n_var))
    for row, r in enumerate(kept):
        for s in table.masks:
            if patterns.is_subset(r, s):
                C[row, pos[(r, s)]] = 1.0
    kkt = np.block([[2.0 * H, C.T], [C, np.zeros((n_con, n_con))]])
    rhs = np.concatenate([-g, np.zeros(n_con)])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        raise SingularKKT("KKT system is singular") from None
    if not np.all(np.isfinite(sol)):
        raise SingularKKT("KKT solution is not finite")
    alpha_vec = sol[:n_var]
    residual = float(np.max(np.abs(C @ alpha_vec))) if n_con else 0.0
    if residual > KKT_RESIDUAL_TOL:
        raise SingularKKT(f"constraint residual {residual:.3g} exceeds {KKT_RESIDUAL_TOL}")

    c0 = float(K[0, 0]) / table.pi_full
    alpha = {v: float(alpha_vec[i]) for v, i in pos.items()}
    value = c0 + float(alpha_vec @ H @ alpha_vec) + float(g @ alpha_vec)
    return AdaptiveFit(
        variables=tuple(variables),
        alpha_vec=alpha_vec,
        alpha=alpha,
        H=H,
        g=g,
        c0=c0,
        objective_value=value,
        constraint_residual=residual,
        cond_h=cond_h,
        ridged=ridged,
        index=tuple(kept),
    )


def adaptive_qp(
    fold: ObservedDataset,
    ef: EstimatingFunction,
    bank: PredictorBank,
    scalarization: Scalarization = TRACE,
    table: PatternTable | None = None,
    pilot: np.ndarray | None = None,
) -> tuple[dict[tuple[int, int], float], np.ndarray, np.ndarray]:
    """Fit the adaptive coefficients and solve on the same fold."""
    if table is None:
        table = fold.pattern_table(min_count=0)
    index = augmentation_index(table, bank)
    moments = fold_moments(fold, ef, bank, index, pilot)
    fit = fit_adaptive(fold, ef, bank, scalarization, table, moments=moments)
    theta, sigma, _ = ibm_solve(
        fold, ef, bank, fit.scheme(), table=table, moments=moments
    )
    return fit.alpha, theta, sigma


# -- cross-fitting -------------------------------------------------------------

def cross_fit(
    dataset: ObservedDataset,
    ef: EstimatingFunction,
    bank: PredictorBank,
    scheme: str = SCHEME_RAY,
    scalarization: Scalarization = TRACE,
    seed: int = 0,
    level: float = 0.95,
    split: str = "stratified",
    table: PatternTable | None = None,
) -> EstimateReport:
    """Two-fold cross-fit: tune on one fold, solve on the other, average.

    The final estimate is the fold average; its variance estimate is the
    average of the per-fold variances divided by four.  Pattern proportions
    inside the weights always come from the full dataset.
    """
    if scheme not in (SCHEME_PS, SCHEME_RAY, SCHEME_ADAPTIVE):
        raise InvalidConfig(f"unknown scheme {scheme!r}")
    if split not in ("stratified", "plain"):
        raise InvalidConfig(f"unknown split policy {split!r}")
    if table is None:
        table = dataset.pattern_table()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    idx_a, idx_b = split_indices(dataset.masks, rng, stratified=split == "stratified")
    folds = [dataset.subset(idx_a), dataset.subset(idx_b)]
    for fold in folds:
        if fold_is_degenerate(fold.masks, table.masks):
            raise FoldDegenerate(
                "a pattern has fewer than 2 rows in a fold; use more data or the plain split"
            )
    index = augmentation_index(table, bank)

    fits = []
    all_moments = []
    for fold in folds:
        moments = fold_moments(fold, ef, bank, index)
        if scheme == SCHEME_ADAPTIVE:
            fits.append(fit_adaptive(fold, ef, bank, scalarization, table, moments=moments))
        else:
            fits.append(
                estimate_G_L(fold, ef, bank, WeightScheme(scheme), scalarization, table, moments=moments)
            )
        all_moments.append(moments)

    thetas, sigmas, infos = [], [], []
    gains, conds, ridge_flags, residuals = [], [], [], []
    fold_alpha_dicts = []
    for solve_on in (0, 1):
        fit = fits[1 - solve_on]
        if scheme == SCHEME_ADAPTIVE:
            w_scheme, alpha_vec = fit.scheme(), None
            gains.append(fit.c0 - fit.objective_value)
            conds.append(fit.cond_h)
            ridge_flags.append(fit.ridged)
            residuals.append(fit.constraint_residual)
            fold_alpha_dicts.append(_alpha_map_to_strings(fit.alpha, dataset.schema.n_modalities))
        else:
            alpha_vec, gain = optimal_alpha(fit)
            w_scheme = WeightScheme(scheme)
            gains.append(gain)
            conds.append(fit.cond_g)
            ridge_flags.append(fit.ridged)
            fold_alpha_dicts.append(
                {
                    mask_to_string(r, dataset.schema.n_modalities): float(a)
                    for r, a in zip(index, alpha_vec)
                }
            )
        theta, sigma, info = ibm_solve(
            folds[solve_on],
            ef,
            bank,
            w_scheme,
            alpha=alpha_vec,
            table=table,
            moments=all_moments[solve_on],
        )
        thetas.append(theta)
        sigmas.append(sigma)
        infos.append(info)

    theta_hat = (thetas[0] + thetas[1]) / 2.0
    n0, n1 = folds[0].n_rows, folds[1].n_rows
    var_theta = (sigmas[0] / n0 + sigmas[1] / n1) / 4.0
    sigma_hat = dataset.n_rows * var_theta

    alpha_avg: dict[str, float] = {}
    for key in fold_alpha_dicts[0]:
        alpha_avg[key] = (fold_alpha_dicts[0][key] + fold_alpha_dicts[1].get(key, 0.0)) / 2.0

    report = EstimateReport(
        estimator=f"ibm_{scheme}",
        theta_hat=theta_hat,
        sigma_hat=sigma_hat,
        n_rows=dataset.n_rows,
        level=level,
        alpha=alpha_avg,
        diagnostics={
            "scheme": scheme,
            "fold_sizes": [n0, n1],
            "fold_thetas": [t.tolist() for t in thetas],
            "fold_alphas": fold_alpha_dicts,
            "cond_G": conds,
            "gain": gains,
            "ridged": ridge_flags,
            "residual_norms": [i["residual_norm"] for i in infos],
            **({"constraint_residuals": residuals} if residuals else {}),
        },
    )
    return report


def _alpha_map_to_strings(alpha: Mapping[tuple[int, int], float], M: int) -> dict[str, float]:
    return {
        f"{mask_to_string(r, M)}->{mask_to_string(s, M)}": float(v)
        for (r, s), v in sorted(alpha.items())
    }


# -- diagnostics ----------------------------------------------------------------

def diagonal_efficiency_gains(
    table: PatternTable, ell: Mapping[int, float]
) -> dict[str, object]:
    """Efficiency gains of the two schemes when the proxies are uncorrelated.

    With a diagonal predictor covariance the gain is a per-pattern sum of
    gamma^2 / eta times the fixed proxy constant.  The second-moment matrix
    eta is computed exactly from the pattern distribution; a variant that
    replaces the superset-pair proportion lambda(union) with
    lambda(intersection) is reported alongside for comparison, since the two
    differ whenever the lattice is not a chain.
    """
    out: dict[str, object] = {}
    for kind in (SCHEME_PS, SCHEME_RAY):
        scheme = WeightScheme(kind)
        gamma, eta = gamma_eta(scheme, table)
        gain = 0.0
        for j, r in enumerate(table.augmentation_masks()):
            if eta[j, j] > 0:
                gain += gamma[j] ** 2 / eta[j, j] * float(ell.get(r, 0.0))
        out[f"gain_{kind}"] = gain
    union, intersect = _ray_eta_variants(table)
    out["eta_ray_exact_vs_union_max_abs_diff"] = float(
        np.max(np.abs(gamma_eta(WeightScheme(SCHEME_RAY), table)[1] - union))
        if union.size
        else 0.0
    )
    out["eta_ray_union_vs_intersection_max_abs_diff"] = float(
        np.max(np.abs(union - intersect)) if union.size else 0.0
    )
    return out


def _ray_eta_variants(table: PatternTable) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form eta for the ray weights with union/intersection pairing."""
    index = table.augmentation_masks()
    k = len(index)
    union = np.zeros((k, k))
    intersect = np.zeros((k, k))
    full = table.full_mask
    for a, r1 in enumerate(index):
        for b, r2 in enumerate(index):
            tot_u = 0.0
            tot_i = 0.0
            for t1 in patterns.iter_supersets(r1, full):
                for t2 in patterns.iter_supersets(r2, full):
                    sign = (-1.0) ** ((t1.bit_count() - r1.bit_count()) + (t2.bit_count() - r2.bit_count()))
                    denom = table.lam[t1] * table.lam[t2]
                    tot_u += sign * table.lam[t1 | t2] / denom
                    inter = t1 & t2
                    lam_i = table.lam[inter] if inter else 1.0
                    tot_i += sign * lam_i / denom
            union[a, b] = tot_u
            intersect[a, b] = tot_i
    return union, intersect
