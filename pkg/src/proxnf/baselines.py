"""Low-rank reference methods and the discrepancy-principle sweep.

The semiseparable approximation SS(r) is the truncated SVD of the M x K
coefficient matrix, the Frobenius-optimal rank-r representation.  The
nuclear-norm reconstruction (STIR-NN) minimizes the frame-concatenated data
fidelity plus ``lam_nuc * ||F||_*`` with FISTA: gradient steps at 1/L,
singular-value soft-thresholding as the proximal map, Nesterov momentum
restarted whenever the objective would increase (which makes the recorded
objective nonincreasing).  Regularization weights are selected by sweeping
a grid and picking the weight whose measurement-residual standard deviation
is closest to the noise level.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from proxnf.crt import DynamicCRTOperator, Measurements
from proxnf.grid import ImageStack, SpacetimeGrid
from proxnf.solver import DivergenceError, ProxTrace, operator_norm_estimate


@dataclass(frozen=True)
class SemiseparableApprox:
    """Rank-r factorization ``U diag(s) V^T`` of a spacetime coefficient matrix."""

    spatial_factors: np.ndarray
    singular_values: np.ndarray
    temporal_factors: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.singular_values, dtype=np.float64)
        if np.any(s < 0) or np.any(np.diff(s) > 0):
            raise ValueError("singular values must be nonnegative and nonincreasing")
        object.__setattr__(self, "singular_values", s)

    @property
    def rank(self) -> int:
        return self.singular_values.size

    @property
    def n_params(self) -> int:
        return self.rank * (
            self.spatial_factors.shape[0] + self.temporal_factors.shape[0] + 1
        )

    def matrix(self) -> np.ndarray:
        return (self.spatial_factors * self.singular_values) @ self.temporal_factors.T

    def stack(self, grid: SpacetimeGrid) -> ImageStack:
        return ImageStack(grid, self.matrix())


def ss_embed(stack: ImageStack, rank: int) -> SemiseparableApprox:
    """Frobenius-optimal rank-r approximation via dense SVD."""
    m, k = stack.coeffs.shape
    if not 1 <= rank <= min(m, k):
        raise ValueError(f"rank must be in 1..{min(m, k)}")
    u, s, vt = np.linalg.svd(stack.coeffs, full_matrices=False)
    return SemiseparableApprox(
        spatial_factors=u[:, :rank],
        singular_values=s[:rank],
        temporal_factors=vt[:rank].T,
    )


def svt(matrix: np.ndarray, tau: float) -> np.ndarray:
    """Singular-value soft-thresholding, the proximal map of ``tau ||.||_*``."""
    if tau < 0:
        raise ValueError("threshold must be nonnegative")
    u, s, vt = np.linalg.svd(np.asarray(matrix, dtype=np.float64), full_matrices=False)
    keep = np.maximum(s - tau, 0.0)
    return (u * keep) @ vt


def nuclear_norm(matrix: np.ndarray) -> float:
    return float(np.sum(np.linalg.svd(matrix, compute_uv=False)))


@dataclass(frozen=True)
class FistaConfig:
    """Accelerated proximal-gradient settings for the nuclear-norm solve.

    The step is ``sigma^2 / max_k ||H_k||^2`` (inverse Lipschitz constant of
    the data-fidelity gradient); iterations stop when the relative objective
    change drops below ``tol``.
    """

    lam_nuc: float
    sigma: float | None = None
    max_iterations: int = 2000
    tol: float = 1e-6
    restart: bool = True
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.lam_nuc < 0:
            raise ValueError("lam_nuc must be nonnegative")


def stirnn_reconstruct(
    measurements: Measurements,
    ops: DynamicCRTOperator,
    config: FistaConfig,
) -> tuple[ImageStack, ProxTrace]:
    """Nuclear-norm-regularized spatiotemporal reconstruction by FISTA."""
    grid = ops.grid
    sigma = config.sigma if config.sigma is not None else measurements.sigma
    if sigma <= 0:
        raise ValueError("sigma must be positive; set FistaConfig.sigma for clean data")
    lip = operator_norm_estimate(ops) ** 2 / sigma**2
    step = 1.0 / lip

    def gradient(F):
        g = np.empty_like(F)
        for k in range(grid.frames):
            op = ops.frame_operator(k)
            g[:, k] = op.adjoint(op.apply(F[:, k]) - measurements.frame(k)) / sigma**2
        return g

    def fidelity(F):
        total = 0.0
        for k in range(grid.frames):
            r = ops.frame_operator(k).apply(F[:, k]) - measurements.frame(k)
            total += 0.5 * float(r @ r) / sigma**2
        return total

    def objective(F):
        fid = fidelity(F)
        nuc = config.lam_nuc * nuclear_norm(F) if config.lam_nuc > 0 else 0.0
        return fid, nuc

    M, K = grid.n_pixels, grid.frames
    F = np.zeros((M, K))
    Z = F.copy()
    t = 1.0
    fid, nuc = objective(F)
    obj_prev = fid + nuc
    obj_initial = obj_prev
    trace = ProxTrace()
    for it in range(1, config.max_iterations + 1):
        candidate = svt(Z - step * gradient(Z), step * config.lam_nuc)
        fid, nuc = objective(candidate)
        if config.restart and fid + nuc > obj_prev:
            # momentum restart: plain proximal-gradient step from the last
            # iterate is guaranteed not to increase the objective
            t = 1.0
            Z = F.copy()
            candidate = svt(Z - step * gradient(Z), step * config.lam_nuc)
            fid, nuc = objective(candidate)
        obj = fid + nuc
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        Z = candidate + ((t - 1.0) / t_next) * (candidate - F)
        F = candidate
        t = t_next
        trace.append(iteration=it, objective=obj, data_fidelity=fid, nuclear=nuc)
        if obj > config.divergence_factor * max(obj_initial, 1e-300):
            raise DivergenceError(
                f"objective {obj:.3e} exceeded {config.divergence_factor} x initial",
                trace,
            )
        if obj_prev > 0 and abs(obj_prev - obj) / obj_prev < config.tol:
            obj_prev = obj
            break
        obj_prev = obj
    return ImageStack(grid, F), trace


@dataclass(frozen=True)
class MorozovResult:
    chosen: float
    table: tuple[dict, ...]
    bracketed: bool


def morozov_sweep(
    solve,
    measurements: Measurements,
    ops: DynamicCRTOperator,
    sigma: float,
    lam_grid,
) -> MorozovResult:
    """Pick the regularization weight matching the noise level.

    ``solve(lam)`` must return an :class:`ImageStack`; for each weight the
    standard deviation of the measurement residual is computed and the
    weight with residual std closest to ``sigma`` wins.  If every residual
    std falls on one side of ``sigma`` a warning is issued and the boundary
    weight is returned (``bracketed`` is False).
    """
    lams = np.asarray(lam_grid, dtype=np.float64)
    if lams.ndim != 1 or lams.size == 0:
        raise ValueError("lam_grid must be a nonempty 1-D sequence")
    if np.any(lams <= 0) or np.any(np.diff(lams) <= 0):
        raise ValueError("lam_grid must be positive and strictly increasing")
    table = []
    for lam in lams:
        stack = solve(float(lam))
        resid = np.empty_like(measurements.data)
        for k in range(ops.frames):
            resid[:, k] = ops.frame_operator(k).apply(stack.frame(k)) - measurements.frame(k)
        table.append({"lam": float(lam), "residual_std": float(np.std(resid))})
    stds = np.array([row["residual_std"] for row in table])
    bracketed = bool(stds.min() <= sigma <= stds.max())
    if not bracketed:
        warnings.warn(
            f"residual std range [{stds.min():.3e}, {stds.max():.3e}] does not "
            f"bracket sigma={sigma:.3e}; returning boundary weight",
            stacklevel=2,
        )
    chosen = float(lams[int(np.argmin(np.abs(stds - sigma)))])
    return MorozovResult(chosen=chosen, table=tuple(table), bracketed=bracketed)
