"""Proximal-splitting reconstruction of a neural field from arc measurements.

Each outer iteration draws a random batch of frames, computes the
data-fidelity gradient for those frames only (image domain, one forward and
one adjoint arc-operator application per sampled frame), and then applies a
proximal update: the field is re-embedded onto targets that equal its own
snapshots except on the sampled frames, which are shifted against the
gradient.  The embedding uses misfit weight ``1/step`` so its fixed points
satisfy ``grad L + lam_s D^T D f = 0`` (plus the temporal term), and the
stochastic gradients carry an optional ``K/J`` rescale so they are unbiased
estimates of the full gradient.  No momentum or acceleration is used
anywhere.  Iterations stop once the proximal-gradient norm, measured on a
small fixed set of audit frames, drops below ``stop_ratio`` times its
first-iteration value.
"""

from __future__ import annotations

import time
import tracemalloc
from dataclasses import dataclass, field, replace

import numpy as np

from proxnf.crt import DynamicCRTOperator, CRTFrameOperator, Measurements, operator_norm_estimate
from proxnf.grid import ImageStack, SpacetimeGrid
from proxnf.pounet import (
    AdamConfig,
    POUNetField,
    embed,
    init_partition_net,
    partition_matrix,
    spatial_laplacian,
)


@dataclass(frozen=True)
class ProxNFConfig:
    """Settings for the outer proximal iteration.

    ``step`` may be a positive float or "auto", which resolves to
    ``sigma^2 J / (K max_k ||H_k||^2)``, the inverse Lipschitz constant of
    the rescaled sampled gradient.  ``batch_frames`` of None means K // 4
    (the full-scale studies use 324).  ``unbias`` applies the K/J factor to
    sampled gradients; ``prox_all_frames`` anchors unsampled frames to the
    field's own snapshots during the proximal embedding (the alternative
    constrains sampled frames only).
    """

    step: float | str = "auto"
    batch_frames: int | None = None
    max_iterations: int = 50
    stop_ratio: float = 0.1
    lam_s: float = 0.0
    lam_t: float = 0.0
    prox_rounds: int = 2
    adam: AdamConfig = field(default_factory=lambda: AdamConfig(steps=200, learning_rate=1e-3))
    cg_tol: float = 1e-8
    cg_max_iter: int = 500
    seed: int = 0
    sigma: float | None = None
    unbias: bool = True
    prox_all_frames: bool = True
    audit_frames: int = 32
    divergence_factor: float = 10.0
    init_lam_s: float | None = None
    hidden: tuple[int, ...] = (140, 140, 140, 140)
    partitions: int = 10
    track_memory: bool = False


@dataclass(frozen=True)
class FrameDirection:
    """Framewise update direction supported on the sampled frames only."""

    frames: np.ndarray
    values: np.ndarray  # (M, J)

    def column(self, k: int) -> np.ndarray | None:
        hits = np.nonzero(self.frames == k)[0]
        return self.values[:, hits[0]] if hits.size else None


@dataclass
class ProxTrace:
    """Append-only per-iteration log of the outer iteration."""

    records: list[dict] = field(default_factory=list)

    def append(self, **kwargs):
        self.records.append(kwargs)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> list:
        return [r[name] for r in self.records]


class DivergenceError(RuntimeError):
    """Raised when the objective explodes; carries the trace so far."""

    def __init__(self, message: str, trace: ProxTrace):
        super().__init__(message)
        self.trace = trace


def frame_data_gradient(
    op: CRTFrameOperator, frame: np.ndarray, data: np.ndarray, sigma: float
) -> np.ndarray:
    """Gradient of ``(1/2 sigma^2) ||H f - d||^2`` at the given frame."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    residual = op.apply(frame) - data
    return op.adjoint(residual) / sigma**2


def sampled_update_direction(
    field: POUNetField,
    measurements: Measurements,
    ops: DynamicCRTOperator,
    frames,
    sigma: float | None = None,
) -> FrameDirection:
    """Framewise data-fidelity gradients on a subset of frames.

    Stores only an M x J block; the implied spacetime direction is zero on
    all other frames.  Frames must be distinct.
    """
    frames = np.asarray(frames, dtype=np.int64)
    if frames.size > ops.frames:
        raise ValueError("more sampled frames than acquisition frames")
    if np.unique(frames).size != frames.size:
        raise ValueError("sampled frames must be distinct")
    sig = measurements.sigma if sigma is None else sigma
    values = np.empty((field.grid.n_pixels, frames.size))
    for j, k in enumerate(frames):
        op = ops.frame_operator(int(k))
        values[:, j] = frame_data_gradient(
            op, field.snapshot(int(k)), measurements.frame(int(k)), sig
        )
    return FrameDirection(frames=frames, values=values)


def prox_step(
    field: POUNetField,
    direction: FrameDirection,
    alpha: float,
    lam_s: float = 0.0,
    lam_t: float = 0.0,
    rounds: int = 2,
    adam: AdamConfig | None = None,
    rng: np.random.Generator | None = None,
    cg_tol: float = 1e-8,
    cg_max_iter: int = 500,
    scale: float = 1.0,
    cover_all_frames: bool = True,
) -> POUNetField:
    """Regularized re-embedding of ``field - alpha * scale * direction``.

    Targets are generated lazily frame by frame from the frozen previous
    state, so no M x K array is ever materialized.
    """
    if alpha <= 0:
        raise ValueError("step must be positive")
    grid = field.grid
    frozen = POUNetField(field.net, field.coeffs.copy(), grid)
    index_of = {int(k): j for j, k in enumerate(direction.frames)}

    def target(k: int) -> np.ndarray:
        y = frozen.snapshot(k)
        j = index_of.get(int(k))
        if j is not None:
            y = y - alpha * scale * direction.values[:, j]
        return y

    if cover_all_frames:
        weights = np.full(grid.frames, 1.0 / alpha)
    else:
        weights = np.zeros(grid.frames)
        weights[direction.frames] = 1.0 / alpha

    new_field, _ = embed(
        grid,
        target,
        weights=weights,
        lam_s=lam_s,
        lam_t=lam_t,
        rounds=rounds,
        adam=adam,
        init_field=frozen,
        cg_tol=cg_tol,
        cg_max_iter=cg_max_iter,
        rng=rng,
    )
    return new_field


def reconstruction_objective(
    field: POUNetField,
    measurements: Measurements,
    ops: DynamicCRTOperator,
    sigma: float,
    lam_s: float,
    lam_t: float,
) -> tuple[float, float]:
    """(data fidelity, regularization) streamed frame by frame."""
    grid = field.grid
    psi, dpsi = partition_matrix(field.net, grid.frame_times())
    lap = spatial_laplacian(grid) if lam_s > 0 else None
    fid = 0.0
    spatial = 0.0
    for k in range(grid.frames):
        f = field.coeffs @ psi[:, k]
        r = ops.frame_operator(k).apply(f) - measurements.frame(k)
        fid += 0.5 * float(r @ r) / sigma**2
        if lap is not None:
            spatial += float(f @ (lap @ f))
    # ||C dpsi||_F^2 through P x P forms, never materializing an M x K array
    temporal = (
        float(np.sum((field.coeffs.T @ field.coeffs) * (dpsi @ dpsi.T)))
        if lam_t > 0
        else 0.0
    )
    return fid, lam_s * spatial + lam_t * temporal


def static_reconstruction(
    grid: SpacetimeGrid,
    measurements: Measurements,
    ops: DynamicCRTOperator,
    sigma: float,
    lam_s: float,
    tol: float = 1e-10,
    max_iter: int = 2000,
) -> np.ndarray:
    """Tikhonov solve on time-averaged measurements with the averaged operator."""
    h_bar = ops.time_averaged_matrix()
    d_bar = measurements.data.mean(axis=1)
    lap = spatial_laplacian(grid)

    def apply(x):
        out = h_bar.T @ (h_bar @ x) / sigma**2
        if lam_s > 0:
            out = out + 2.0 * lam_s * (lap @ x)
        return out

    b = h_bar.T @ d_bar / sigma**2
    x = np.zeros(grid.n_pixels)
    r = b - apply(x)
    p = r.copy()
    rs = float(r @ r)
    nb = np.linalg.norm(b) or 1.0
    for _ in range(max_iter):
        if np.sqrt(rs) <= tol * nb:
            break
        ap = apply(p)
        alpha = rs / float(p @ ap)
        x += alpha * p
        r -= alpha * ap
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x


def initialize_field(
    grid: SpacetimeGrid,
    measurements: Measurements,
    ops: DynamicCRTOperator,
    config: ProxNFConfig,
) -> POUNetField:
    """Static reconstruction on time-averaged data, embedded time-constant."""
    sigma = _resolve_sigma(config, measurements)
    lam_init = config.init_lam_s if config.init_lam_s is not None else config.lam_s
    static = static_reconstruction(grid, measurements, ops, sigma, lam_init)
    net = init_partition_net(
        grid.horizon, hidden=config.hidden, partitions=config.partitions, seed=config.seed
    )
    # constants are exactly representable (partitions sum to one), so one
    # coefficient solve embeds the static image as a time-constant field
    stub = POUNetField(net, np.zeros((grid.n_pixels, net.partitions)), grid)
    from proxnf.pounet import solve_coefficients

    C, _ = solve_coefficients(
        stub,
        lambda k: static,
        lam_s=0.0,
        lam_t=0.0,
        tol=config.cg_tol,
        max_iter=config.cg_max_iter,
    )
    return POUNetField(net, C, grid)


def _resolve_sigma(config: ProxNFConfig, measurements: Measurements) -> float:
    sigma = config.sigma if config.sigma is not None else measurements.sigma
    if sigma <= 0:
        raise ValueError(
            "noise level sigma must be positive; set ProxNFConfig.sigma for clean data"
        )
    return float(sigma)


def resolve_step(config: ProxNFConfig, ops: DynamicCRTOperator, sigma: float, batch: int) -> float:
    if config.step == "auto":
        norm = operator_norm_estimate(ops)
        return sigma**2 * batch / (ops.frames * norm**2)
    alpha = float(config.step)
    if alpha <= 0:
        raise ValueError("step must be positive")
    return alpha


def run(
    config: ProxNFConfig,
    measurements: Measurements,
    ops: DynamicCRTOperator,
    field: POUNetField | None = None,
) -> tuple[POUNetField, ProxTrace]:
    """Outer proximal iteration; returns the final field and the trace.

    ``field`` of None triggers the static time-averaged initialization.
    Raises :class:`DivergenceError` if the objective exceeds
    ``divergence_factor`` times its initial value.
    """
    grid = ops.grid
    sigma = _resolve_sigma(config, measurements)
    K = ops.frames
    batch = config.batch_frames if config.batch_frames is not None else max(1, K // 4)
    if not 1 <= batch <= K:
        raise ValueError(f"batch_frames must be in 1..{K}")
    # building every distinct geometry up front keeps the iteration loop's
    # allocations down to the direction block and embedding work arrays
    ops.time_averaged_matrix()
    alpha = resolve_step(config, ops, sigma, batch)
    scale = (K / batch) if config.unbias else 1.0
    rng = np.random.default_rng(config.seed)

    if field is None:
        field = initialize_field(grid, measurements, ops, config)

    fid0, reg0 = reconstruction_objective(field, measurements, ops, sigma, config.lam_s, config.lam_t)
    objective0 = fid0 + reg0
    audit = np.unique(np.linspace(0, K - 1, min(config.audit_frames, K)).round().astype(int))

    trace = ProxTrace()
    ref_norm = None
    started_tracing = False
    if config.track_memory and not tracemalloc.is_tracing():
        tracemalloc.start()
        started_tracing = True
    try:
        for n in range(1, config.max_iterations + 1):
            t0 = time.perf_counter()
            if config.track_memory:
                tracemalloc.reset_peak()
                mem_base = tracemalloc.get_traced_memory()[0]
            frames = np.sort(rng.choice(K, size=batch, replace=False))
            direction = sampled_update_direction(field, measurements, ops, frames, sigma)
            new_field = prox_step(
                field,
                direction,
                alpha,
                lam_s=config.lam_s,
                lam_t=config.lam_t,
                rounds=config.prox_rounds,
                adam=config.adam,
                rng=rng,
                cg_tol=config.cg_tol,
                cg_max_iter=config.cg_max_iter,
                scale=scale,
                cover_all_frames=config.prox_all_frames,
            )
            sq = 0.0
            for k in audit:
                diff = new_field.snapshot(int(k)) - field.snapshot(int(k))
                sq += float(diff @ diff)
            prox_norm = np.sqrt(sq) / alpha
            field = new_field
            fid, reg = reconstruction_objective(
                field, measurements, ops, sigma, config.lam_s, config.lam_t
            )
            peak_bytes = None
            if config.track_memory:
                peak_bytes = max(0, tracemalloc.get_traced_memory()[1] - mem_base)
            trace.append(
                iteration=n,
                frames=tuple(int(k) for k in frames),
                data_fidelity=fid,
                regularization=reg,
                prox_grad_norm=float(prox_norm),
                wall_time=time.perf_counter() - t0,
                peak_bytes=peak_bytes,
            )
            if ref_norm is None:
                ref_norm = prox_norm
            if fid + reg > config.divergence_factor * max(objective0, 1e-300):
                raise DivergenceError(
                    f"objective {fid + reg:.3e} exceeded {config.divergence_factor} x "
                    f"initial {objective0:.3e} at iteration {n}",
                    trace,
                )
            if prox_norm <= config.stop_ratio * ref_norm:
                break
    finally:
        if started_tracing:
            tracemalloc.stop()
    return field, trace
