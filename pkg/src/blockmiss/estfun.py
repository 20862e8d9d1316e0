"""Full-data estimating functions and root solving.

An estimating function maps (row blocks, theta) to a length-``d`` residual
whose expectation at the true parameter is zero.  The two built-ins cover
the targets used throughout: the outcome mean and linear regression
coefficients.  Both are affine in theta, so estimators can solve their
equations with a single linear step; a damped Newton iteration handles
user-supplied nonlinear functions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import MissingModality, NoConvergence, SingularJacobian

Blocks = Mapping[str, np.ndarray]

COND_LIMIT = 1e12


class EstimatingFunction:
    """Interface: residual ``evaluate`` and its theta-Jacobian per row."""

    d: int
    required_modalities: tuple[str, ...]
    affine: bool = False

    def evaluate(self, blocks: Blocks, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, blocks: Blocks, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _require(self, blocks: Blocks) -> None:
        for name in self.required_modalities:
            if name not in blocks:
                raise MissingModality(f"modality {name!r} required but not supplied")
            if np.isnan(np.asarray(blocks[name])).any():
                raise MissingModality(f"modality {name!r} has missing values")


@dataclass
class OutcomeMean(EstimatingFunction):
    """Residual y - theta for the mean of the outcome block."""

    outcome: str = "Y"
    d: int = 1
    affine: bool = True

    @property
    def required_modalities(self) -> tuple[str, ...]:
        return (self.outcome,)

    def evaluate(self, blocks: Blocks, theta: np.ndarray) -> np.ndarray:
        self._require(blocks)
        y = np.atleast_2d(np.asarray(blocks[self.outcome], dtype=float))
        return y - np.asarray(theta, dtype=float)[None, :]

    def jacobian(self, blocks: Blocks, theta: np.ndarray) -> np.ndarray:
        self._require(blocks)
        n = np.asarray(blocks[self.outcome]).shape[0]
        return np.broadcast_to(-np.eye(self.d), (n, self.d, self.d)).copy()


@dataclass
class LinearRegression(EstimatingFunction):
    """Normal-equation residual x (y - x' theta).

    The design is the concatenation of the covariate blocks in order
    (``dims`` gives each block's width); no intercept column is added
    implicitly -- include a constant column in a block to get one.
    """

    covariates: tuple[str, ...] = ("X1", "X2")
    outcome: str = "Y"
    dims: tuple[int, ...] = (1, 1)
    affine: bool = True

    @classmethod
    def from_schema(cls, schema, covariates=("X1", "X2"), outcome="Y"):
        return cls(
            covariates=tuple(covariates),
            outcome=outcome,
            dims=tuple(schema.dim_of(c) for c in covariates),
        )

    @property
    def d(self) -> int:
        return int(sum(self.dims))

    @property
    def required_modalities(self) -> tuple[str, ...]:
        return tuple(self.covariates) + (self.outcome,)

    def design(self, blocks: Blocks) -> np.ndarray:
        return np.hstack([np.atleast_2d(np.asarray(blocks[c], dtype=float)) for c in self.covariates])

    def evaluate(self, blocks: Blocks, theta: np.ndarray) -> np.ndarray:
        self._require(blocks)
        x = self.design(blocks)
        y = np.asarray(blocks[self.outcome], dtype=float).reshape(-1)
        resid = y - x @ np.asarray(theta, dtype=float)
        return x * resid[:, None]

    def jacobian(self, blocks: Blocks, theta: np.ndarray) -> np.ndarray:
        self._require(blocks)
        x = self.design(blocks)
        return -np.einsum("ni,nj->nij", x, x)


def finite_difference_jacobian(
    fn: Callable[[np.ndarray], np.ndarray], theta: np.ndarray, eps: float = 1e-6
) -> np.ndarray:
    """Central-difference Jacobian of a vector function of theta."""
    theta = np.asarray(theta, dtype=float)
    d_out = np.asarray(fn(theta)).shape[-1]
    jac = np.zeros((d_out, theta.size))
    for j in range(theta.size):
        step = eps * max(1.0, abs(theta[j]))
        up, down = theta.copy(), theta.copy()
        up[j] += step
        down[j] -= step
        jac[:, j] = (np.asarray(fn(up)) - np.asarray(fn(down))) / (2 * step)
    return jac


def solve_root(
    residual: Callable[[np.ndarray], np.ndarray],
    jacobian: Callable[[np.ndarray], np.ndarray],
    theta0: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 100,
    affine: bool = False,
) -> np.ndarray:
    """Solve ``residual(theta) = 0`` by damped Newton.

    ``affine=True`` takes a single exact step (the Jacobian is constant).
    Steps are halved while the sup-norm of the residual fails to decrease.

    Raises
    ------
    SingularJacobian
        Condition number of the Jacobian exceeds 1e12.
    NoConvergence
        Tolerance not reached within ``max_iter`` iterations.
    """
    theta = np.asarray(theta0, dtype=float).copy()
    u = np.asarray(residual(theta), dtype=float)
    if not np.all(np.isfinite(u)):
        raise NoConvergence("residual not finite at the starting point")
    for _ in range(max_iter):
        norm = np.max(np.abs(u))
        if norm <= tol:
            return theta
        jac = np.asarray(jacobian(theta), dtype=float)
        if not np.all(np.isfinite(jac)) or np.linalg.cond(jac) > COND_LIMIT:
            raise SingularJacobian("estimating-equation Jacobian is numerically singular")
        step = np.linalg.solve(jac, -u)
        if affine:
            theta = theta + step
            u = np.asarray(residual(theta), dtype=float)
            if np.max(np.abs(u)) <= max(tol, norm * 1e-12):
                return theta
            # fall through to damped iteration when the single step was not exact
            affine = False
            continue
        scale = 1.0
        while scale > 2.0 ** -30:
            candidate = theta + scale * step
            u_new = np.asarray(residual(candidate), dtype=float)
            if np.all(np.isfinite(u_new)) and np.max(np.abs(u_new)) < norm:
                theta, u = candidate, u_new
                break
            scale /= 2.0
        else:
            raise NoConvergence("step halving failed to reduce the residual")
    if np.max(np.abs(u)) <= tol:
        return theta
    raise NoConvergence(f"no root within {max_iter} iterations (|U| = {np.max(np.abs(u)):.3g})")
