"""Missingness-pattern lattice.

A pattern is a bitmask over ``M`` modalities: bit ``m`` set means modality
``m`` is observed.  This module holds the empirical pattern table (counts,
proportions ``pi``, superset sums ``lam``) and the combinatorial weights the
estimators attach to each augmentation term: pattern-stratified (``ps``),
signed inclusion-exclusion over observed supersets (``ray``), and explicit
per-(pattern, dataset) coefficients (``adaptive``).

All functions are pure; ``PatternTable`` is immutable after construction and
safe to share across threads/processes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import (
    EmptyInput,
    EmptyMask,
    FullPatternArgument,
    InvalidConfig,
    MissingFullPattern,
    UnknownPattern,
)

MAX_MODALITIES = 16

SCHEME_PS = "ps"
SCHEME_RAY = "ray"
SCHEME_ADAPTIVE = "adaptive"


def mask_to_string(mask: int, n_modalities: int) -> str:
    """Render a mask as a fixed-length 0/1 string, first modality leftmost."""
    return "".join("1" if mask >> m & 1 else "0" for m in range(n_modalities))


def mask_from_string(s: str) -> int:
    """Parse a 0/1 pattern string (first modality leftmost)."""
    if not s or set(s) - {"0", "1"}:
        raise InvalidConfig(f"not a 0/1 pattern string: {s!r}")
    return sum(1 << m for m, ch in enumerate(s) if ch == "1")


def is_subset(a: int, b: int) -> bool:
    """True when every modality in ``a`` is also in ``b``."""
    return a & ~b == 0


def iter_supersets(mask: int, full: int) -> Iterator[int]:
    """Yield all s with ``mask`` <= s <= ``full`` (set order), ascending."""
    u = full & ~mask
    sub = 0
    while True:
        yield mask | sub
        if sub == u:
            return
        sub = (sub - u) & u


def signed_superset_sum(r: int, n_modalities: int) -> int:
    """Sum of (-1)^(|s|-|r|) over all supersets s of r within the lattice.

    Equals 1 when ``r`` is the full pattern and 0 otherwise; the empty mask
    is rejected because the empty projection is defined as zero.
    """
    if r == 0:
        raise EmptyMask("empty pattern has no lattice coefficient")
    full = (1 << n_modalities) - 1
    if not is_subset(r, full):
        raise UnknownPattern(f"mask {r:b} exceeds {n_modalities} modalities")
    total = 0
    base = r.bit_count()
    for s in iter_supersets(r, full):
        total += -1 if (s.bit_count() - base) % 2 else 1
    return total


@dataclass(frozen=True)
class WeightScheme:
    """Weighting scheme for the augmentation terms.

    ``kind`` is one of ``"ps"``, ``"ray"``, ``"adaptive"``.  The adaptive
    scheme carries explicit coefficients ``alpha[(r, s)]`` for dataset
    pattern ``s`` containing augmentation pattern ``r``; each row must sum
    to zero so the augmentation term stays mean-zero.
    """

    kind: str
    alpha: Mapping[tuple[int, int], float] | None = None

    def __post_init__(self):
        if self.kind not in (SCHEME_PS, SCHEME_RAY, SCHEME_ADAPTIVE):
            raise InvalidConfig(f"unknown weight scheme {self.kind!r}")
        if self.kind == SCHEME_ADAPTIVE:
            if self.alpha is None:
                raise InvalidConfig("adaptive scheme requires alpha coefficients")
            rows: dict[int, float] = {}
            for (r, s), value in self.alpha.items():
                if not is_subset(r, s):
                    raise InvalidConfig(
                        f"adaptive coefficient for r={r:b} attached to non-superset s={s:b}"
                    )
                rows[r] = rows.get(r, 0.0) + value
            for r, total in rows.items():
                if abs(total) > 1e-6:
                    raise InvalidConfig(
                        f"adaptive coefficients for pattern {r:b} sum to {total:.3g}, not 0"
                    )
        elif self.alpha is not None:
            raise InvalidConfig("alpha coefficients are only valid for the adaptive scheme")


PS = WeightScheme(SCHEME_PS)
RAY = WeightScheme(SCHEME_RAY)


@dataclass(frozen=True)
class PatternTable:
    """Empirical table of observed missingness patterns.

    ``masks`` are the distinct observed patterns in ascending mask order,
    ``counts`` the per-pattern row counts (floats allowed so a table can be
    built from population proportions), ``pi`` the proportions, and ``lam``
    an array over all ``2**M`` masks with ``lam[s]`` the total proportion of
    patterns containing ``s``.
    """

    n_modalities: int
    masks: tuple[int, ...]
    counts: tuple[float, ...]
    total: float = field(init=False)
    pi: np.ndarray = field(init=False)
    lam: np.ndarray = field(init=False)

    def __post_init__(self):
        M = self.n_modalities
        if not 1 <= M <= MAX_MODALITIES:
            raise InvalidConfig(f"modality count must be in [1, {MAX_MODALITIES}], got {M}")
        if not self.masks:
            raise EmptyInput("no patterns")
        full = (1 << M) - 1
        if len(set(self.masks)) != len(self.masks):
            raise InvalidConfig("duplicate patterns")
        if list(self.masks) != sorted(self.masks):
            raise InvalidConfig("patterns must be in ascending mask order")
        for mask in self.masks:
            if mask == 0:
                raise EmptyMask("a row observing no modality is not a pattern")
            if not is_subset(mask, full):
                raise UnknownPattern(f"mask {mask:b} exceeds {M} modalities")
        if full not in self.masks:
            raise MissingFullPattern("no fully observed rows; positivity fails")
        counts = np.asarray(self.counts, dtype=float)
        if np.any(counts <= 0):
            raise InvalidConfig("pattern counts must be positive")
        total = float(counts.sum())
        pi = counts / total
        lam = np.zeros(1 << M)
        lam[list(self.masks)] = pi
        idx = np.arange(1 << M)
        for m in range(M):
            bit = 1 << m
            lower = idx[(idx & bit) == 0]
            lam[lower] += lam[lower | bit]
        object.__setattr__(self, "total", total)
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "lam", lam)
        self.pi.setflags(write=False)
        self.lam.setflags(write=False)

    @property
    def full_mask(self) -> int:
        return (1 << self.n_modalities) - 1

    @property
    def pi_full(self) -> float:
        return float(self.pi[self.index_of(self.full_mask)])

    def index_of(self, mask: int) -> int:
        try:
            return self.masks.index(mask)
        except ValueError:
            raise UnknownPattern(
                f"pattern {mask_to_string(mask, self.n_modalities)} not observed"
            ) from None

    def pi_of(self, mask: int) -> float:
        return float(self.pi[self.index_of(mask)])

    def lam_of(self, mask: int) -> float:
        if mask == 0:
            raise EmptyMask("lambda is defined for nonempty subsets only")
        if not is_subset(mask, self.full_mask):
            raise UnknownPattern(f"mask {mask:b} exceeds {self.n_modalities} modalities")
        return float(self.lam[mask])

    def augmentation_masks(self) -> tuple[int, ...]:
        """Observed patterns other than the full one, canonical order."""
        return tuple(m for m in self.masks if m != self.full_mask)


def build_pattern_table(
    rows: Sequence[int] | np.ndarray,
    n_modalities: int,
    min_count: int = 2,
) -> PatternTable:
    """Aggregate per-row pattern masks into a :class:`PatternTable`.

    Proportions are raw sample proportions.  Patterns rarer than
    ``min_count`` rows trigger a warning (not an error) since their inverse
    weights are noisy.
    """
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        raise EmptyInput("no rows")
    if np.any(rows == 0):
        raise EmptyMask("a row observes no modality")
    masks, counts = np.unique(rows, return_counts=True)
    full = (1 << n_modalities) - 1
    if full not in masks:
        raise MissingFullPattern("no row observes all modalities")
    if min_count > 0 and np.any(counts < min_count):
        rare = [
            mask_to_string(int(m), n_modalities)
            for m, c in zip(masks, counts)
            if c < min_count
        ]
        warnings.warn(
            f"patterns with fewer than {min_count} rows: {', '.join(rare)}",
            stacklevel=2,
        )
    return PatternTable(
        n_modalities=n_modalities,
        masks=tuple(int(m) for m in masks),
        counts=tuple(float(c) for c in counts),
    )


def table_from_proportions(
    masks: Sequence[int], probs: Sequence[float], n_modalities: int
) -> PatternTable:
    """Build a table directly from (population) pattern proportions."""
    order = np.argsort(masks)
    return PatternTable(
        n_modalities=n_modalities,
        masks=tuple(int(masks[i]) for i in order),
        counts=tuple(float(probs[i]) for i in order),
    )


def _check_augmentation_mask(table: PatternTable, r: int) -> None:
    if r == table.full_mask:
        raise FullPatternArgument("the full pattern carries no augmentation weight")
    table.index_of(r)  # raises UnknownPattern


def omega(scheme: WeightScheme, observed: int, r: int, table: PatternTable) -> float:
    """Weight attached to the pattern-``r`` augmentation term for a row.

    ``ps``:  I(observed = r)/pi_r - I(observed = full)/pi_full.
    ``ray``: sum over supersets s of r of (-1)^(|s|-|r|) I(observed >= s)/lam_s.
    ``adaptive``: alpha[(r, observed)] / pi_observed.
    """
    _check_augmentation_mask(table, r)
    if scheme.kind == SCHEME_PS:
        value = 0.0
        if observed == r:
            value += 1.0 / table.pi_of(r)
        if observed == table.full_mask:
            value -= 1.0 / table.pi_full
        return value
    if scheme.kind == SCHEME_RAY:
        if not is_subset(r, observed):
            return 0.0
        total = 0.0
        base = r.bit_count()
        for s in iter_supersets(r, observed):
            sign = -1.0 if (s.bit_count() - base) % 2 else 1.0
            total += sign / table.lam[s]
        return total
    coeff = scheme.alpha.get((r, observed), 0.0)
    if coeff == 0.0:
        return 0.0
    return coeff / table.pi_of(observed)


def omega_profile(scheme: WeightScheme, r: int, table: PatternTable) -> np.ndarray:
    """Vector of omega values over the table's patterns (canonical order)."""
    return np.array([omega(scheme, p, r, table) for p in table.masks])


def weight_profile(
    scheme: WeightScheme, table: PatternTable, index: Sequence[int]
) -> np.ndarray:
    """Matrix W with W[j, i] = omega(scheme, pattern_i, index_j)."""
    return np.vstack([omega_profile(scheme, r, table) for r in index]) if index else np.zeros((0, len(table.masks)))


def alpha_characterization(kind: str, table: PatternTable) -> dict[tuple[int, int], float]:
    """Express the ``ps`` / ``ray`` weights as adaptive coefficients.

    Returns ``alpha[(r, s)]`` over augmentation patterns ``r`` and observed
    patterns ``s >= r`` such that ``omega(kind, s, r) == alpha[(r, s)]/pi_s``
    and every row sums to zero.
    """
    if kind not in (SCHEME_PS, SCHEME_RAY):
        raise InvalidConfig(f"characterization is defined for ps/ray, got {kind!r}")
    full = table.full_mask
    out: dict[tuple[int, int], float] = {}
    for r in table.augmentation_masks():
        if kind == SCHEME_PS:
            out[(r, r)] = 1.0
            out[(r, full)] = -1.0
            continue
        base = r.bit_count()
        for s in table.masks:
            if not is_subset(r, s):
                continue
            total = 0.0
            for t in iter_supersets(r, s):
                sign = -1.0 if (t.bit_count() - base) % 2 else 1.0
                total += sign / table.lam[t]
            out[(r, s)] = table.pi_of(s) * total
    return out


def gamma_eta(
    scheme: WeightScheme, table: PatternTable, index: Sequence[int] | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Exact first and second moments of the augmentation weights.

    Over the empirical pattern distribution: ``gamma[j]`` is the expectation
    of ``omega_j`` times the inverse-probability-weighted full-pattern
    indicator, ``eta[j, l]`` the expectation of ``omega_j * omega_l``.
    """
    if index is None:
        index = table.augmentation_masks()
    W = weight_profile(scheme, table, index)
    i_full = table.index_of(table.full_mask)
    gamma = W[:, i_full].copy()  # pi_full * omega(full) / pi_full
    eta = (W * table.pi) @ W.T
    return gamma, eta
