"""Partition-of-unity neural field over the pixel-indicator basis.

The field is ``phi(r, t) = B(r)^T C psi(t)``: a small time-only network
``psi`` maps t to P nonnegative partition weights summing to one (sinusoidal
hidden layers, softmax output), and the M x P coefficient matrix ``C`` mixes
P coefficient images over the pixel indicators ``B``.  Frame snapshots are
therefore just ``C psi(t_k)``, which keeps every projection onto the grid a
dense matrix-vector product.

Training alternates two half-steps: for frozen ``psi`` the coefficients
solve a linear least-squares problem (conjugate gradient on the normal
equations, with optional spatial-gradient and temporal-derivative Tikhonov
terms), and for frozen ``C`` the network weights take Adam steps on the same
objective.  Temporal derivatives ``dpsi/dt`` come from forward-mode
differentiation through the network, and their gradient with respect to the
weights is propagated with a reverse-over-forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from proxnf.grid import ImageStack, SpacetimeGrid

DEFAULT_HIDDEN = (140, 140, 140, 140)
DEFAULT_PARTITIONS = 10
OMEGA0 = 30.0


# ---------------------------------------------------------------------------
# partition network
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PartitionNet:
    """Time-input MLP producing partition weights.

    ``weights[i]`` has shape (fan_out, fan_in); hidden activations are
    ``sin``, the output activation is a softmax, and the input is normalized
    as ``t -> 2 t / horizon - 1``.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    horizon: float

    def __post_init__(self):
        for w, b in zip(self.weights, self.biases):
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("network weights must be finite")

    @property
    def partitions(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def layer_widths(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    def flatten_params(self) -> np.ndarray:
        return np.concatenate(
            [np.concatenate([w.ravel(), b.ravel()]) for w, b in zip(self.weights, self.biases)]
        )

    def with_params(self, flat: np.ndarray) -> "PartitionNet":
        ws, bs, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(flat[pos : pos + w.size].reshape(w.shape).copy())
            pos += w.size
            bs.append(flat[pos : pos + b.size].reshape(b.shape).copy())
            pos += b.size
        if pos != flat.size:
            raise ValueError("parameter vector length mismatch")
        return PartitionNet(tuple(ws), tuple(bs), self.horizon)


def init_partition_net(
    horizon: float,
    hidden: tuple[int, ...] = DEFAULT_HIDDEN,
    partitions: int = DEFAULT_PARTITIONS,
    seed: int = 0,
    omega0: float = OMEGA0,
) -> PartitionNet:
    """Sinusoidal-network initialization.

    First layer entries are U(-1, 1) * omega0, later layers
    U(-sqrt(6/fan_in), +sqrt(6/fan_in)) / omega0.
    """
    rng = np.random.default_rng(seed)
    widths = (1,) + tuple(hidden) + (partitions,)
    ws, bs = [], []
    for i in range(len(widths) - 1):
        fan_in, fan_out = widths[i], widths[i + 1]
        if i == 0:
            w = rng.uniform(-1.0, 1.0, size=(fan_out, fan_in)) * omega0
            b = rng.uniform(-1.0, 1.0, size=fan_out) * omega0
        else:
            bound = np.sqrt(6.0 / fan_in) / omega0
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            b = rng.uniform(-bound, bound, size=fan_out)
        ws.append(w)
        bs.append(b)
    return PartitionNet(tuple(ws), tuple(bs), horizon)


def _forward_tangent(net: PartitionNet, ts: np.ndarray):
    """Forward pass with forward-mode time tangents.

    Returns (psi, dpsi, cache) for a batch of times; cache holds the
    per-layer pre-activations and activations needed by the backward pass.
    """
    ts = np.atleast_1d(np.asarray(ts, dtype=np.float64))
    x = (2.0 * ts / net.horizon - 1.0)[:, None]
    v = np.full_like(x, 2.0 / net.horizon)
    zs, xs, us, vs = [], [x], [], [v]
    n_layers = len(net.weights)
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = x @ w.T + b
        u = v @ w.T
        if i < n_layers - 1:
            x = np.sin(z)
            v = np.cos(z) * u
        zs.append(z)
        us.append(u)
        if i < n_layers - 1:
            xs.append(x)
            vs.append(v)
    z_out = zs[-1]
    z_shift = z_out - z_out.max(axis=1, keepdims=True)
    e = np.exp(z_shift)
    psi = e / e.sum(axis=1, keepdims=True)
    u_out = us[-1]
    dpsi = psi * u_out - psi * np.sum(psi * u_out, axis=1, keepdims=True)
    cache = {"zs": zs, "xs": xs, "us": us, "vs": vs, "psi": psi, "u_out": u_out}
    return psi, dpsi, cache


def eval_partition(net: PartitionNet, t: float):
    """Partition weights and their time derivative at one time point."""
    psi, dpsi, _ = _forward_tangent(net, np.array([float(t)]))
    return psi[0], dpsi[0]


def partition_matrix(net: PartitionNet, times: np.ndarray):
    """(P, K) partition values and (P, K) time derivatives at given times."""
    psi, dpsi, _ = _forward_tangent(net, times)
    return psi.T.copy(), dpsi.T.copy()


def _backprop(net: PartitionNet, cache, grad_psi, grad_dpsi):
    """Gradients of sum(loss) w.r.t. weights given dloss/dpsi and dloss/dpsi'.

    Reverse pass through the forward-and-tangent computation; the softmax
    Jacobian is applied to both the value and tangent adjoints.
    """
    psi = cache["psi"]
    u_out = cache["u_out"]

    def jpsi(vec):
        return psi * vec - psi * np.sum(psi * vec, axis=1, keepdims=True)

    a = grad_psi
    c = grad_dpsi
    su = np.sum(psi * u_out, axis=1, keepdims=True)
    sc = np.sum(psi * c, axis=1, keepdims=True)
    gz = jpsi(a + c * u_out - su * c - sc * u_out)
    gu = jpsi(c)

    grads_w = [None] * len(net.weights)
    grads_b = [None] * len(net.biases)
    n_layers = len(net.weights)
    dx, dv = None, None
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            z = cache["zs"][i]
            u = cache["us"][i]
            cos_z = np.cos(z)
            gz = cos_z * dx - np.sin(z) * u * dv
            gu = cos_z * dv
        x_prev = cache["xs"][i]
        v_prev = cache["vs"][i]
        grads_w[i] = gz.T @ x_prev + gu.T @ v_prev
        grads_b[i] = gz.sum(axis=0)
        if i > 0:
            w = net.weights[i]
            dx = gz @ w
            dv = gu @ w
    return grads_w, grads_b


# ---------------------------------------------------------------------------
# field container
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class POUNetField:
    """Neural-field state: partition network plus spatial coefficients."""

    net: PartitionNet
    coeffs: np.ndarray  # (M, P)
    grid: SpacetimeGrid

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.float64)
        if c.shape != (self.grid.n_pixels, self.net.partitions):
            raise ValueError(
                f"coefficients {c.shape} do not match grid/partitions "
                f"({self.grid.n_pixels}, {self.net.partitions})"
            )
        object.__setattr__(self, "coeffs", c)

    @property
    def n_params(self) -> int:
        return self.net.n_params + self.coeffs.size

    def snapshot(self, k: int) -> np.ndarray:
        """Frame-k image vector ``C psi(t_k)`` (0-based frame index)."""
        if not 0 <= k < self.grid.frames:
            raise IndexError(f"frame {k} outside 0..{self.grid.frames - 1}")
        psi, _ = eval_partition(self.net, self.grid.frame_times()[k])
        return self.coeffs @ psi

    def evaluate(self, x, y, t: float):
        """Continuous evaluator: coefficient mix at the containing pixel."""
        psi, _ = eval_partition(self.net, t)
        vals = self.coeffs @ psi
        m = self.grid.pixel_index(np.asarray(x), np.asarray(y))
        return np.where(m >= 0, vals[np.where(m >= 0, m, 0)], 0.0)

    def render(self) -> ImageStack:
        psi, _ = partition_matrix(self.net, self.grid.frame_times())
        return ImageStack(self.grid, self.coeffs @ psi)


# ---------------------------------------------------------------------------
# spatial regularization operator
# ---------------------------------------------------------------------------


@lru_cache(maxsize=8)
def spatial_laplacian(grid: SpacetimeGrid) -> sp.csr_matrix:
    """``D^T D`` for the forward-difference gradient with Neumann boundary."""
    ms = grid.side_pixels
    h = grid.pixel_size
    d1 = sp.diags([-np.ones(ms - 1), np.ones(ms - 1)], [0, 1], shape=(ms - 1, ms)) / h
    eye = sp.identity(ms)
    dx = sp.kron(d1, eye)
    dy = sp.kron(eye, d1)
    return (dx.T @ dx + dy.T @ dy).tocsr()


def spatial_penalty(grid: SpacetimeGrid, frame: np.ndarray) -> float:
    """``||D f||^2`` for one frame vector."""
    lap = spatial_laplacian(grid)
    return float(frame @ (lap @ frame))


# ---------------------------------------------------------------------------
# embedding solvers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamConfig:
    """Adam settings for the partition-network half-step.

    Defaults are the full-scale training values (1e-5 learning rate for
    10,000 steps on 100,000-point minibatches); desk-scale presets shrink
    the step count and batch.
    """

    learning_rate: float = 1e-5
    steps: int = 10_000
    batch_points: int = 100_000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def _frame_source(targets) -> tuple:
    if isinstance(targets, ImageStack):
        return (lambda k: targets.coeffs[:, k]), targets.grid.frames
    if callable(targets):
        return targets, None
    raise TypeError("targets must be an ImageStack or a frame-index callable")


def _normalize_weights(weights, frames: int) -> np.ndarray:
    if weights is None:
        return np.ones(frames)
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 0:
        return np.full(frames, float(w))
    if w.shape != (frames,):
        raise ValueError("weights must be scalar or length-K")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    return w


def solve_coefficients(
    field: POUNetField,
    targets,
    weights=None,
    lam_s: float = 0.0,
    lam_t: float = 0.0,
    tol: float = 1e-8,
    max_iter: int = 500,
):
    """Optimal coefficients for frozen partitions: CG on the normal equations.

    Minimizes ``sum_k w_k ||C psi_k - y_k||^2 + lam_s sum_k ||D C psi_k||^2
    + lam_t sum_k ||C psi'_k||^2`` over C, warm-started at the field's
    current coefficients.  Returns ``(C, info)`` with the CG iteration count
    and final relative residual.
    """
    grid = field.grid
    source, _ = _frame_source(targets)
    K = grid.frames
    w = _normalize_weights(weights, K)
    psi, dpsi = partition_matrix(field.net, grid.frame_times())
    return _solve_coefficients_psi(
        grid, psi, dpsi, source, w, lam_s, lam_t, field.coeffs, tol, max_iter
    )


def _solve_coefficients_psi(grid, psi, dpsi, source, w, lam_s, lam_t, c0, tol, max_iter):
    K = psi.shape[1]
    s1w = (psi * w) @ psi.T
    s1 = psi @ psi.T
    s2 = dpsi @ dpsi.T
    M = grid.n_pixels
    B = np.zeros((M, psi.shape[0]))
    norm_y2 = 0.0
    for k in range(K):
        if w[k] == 0.0:
            continue
        y = np.asarray(source(k), dtype=np.float64)
        B += np.outer(y, w[k] * psi[:, k])
        norm_y2 += w[k] * float(y @ y)
    lap = spatial_laplacian(grid) if lam_s > 0 else None

    right = s1w + lam_t * s2

    def apply(C):
        out = C @ right
        if lap is not None:
            out += lam_s * (lap @ (C @ s1))
        return out

    X = np.array(c0, dtype=np.float64, copy=True)
    R = B - apply(X)
    denom = np.linalg.norm(B)
    if denom == 0.0:
        denom = max(np.linalg.norm(R), 1.0)
    P = R.copy()
    rs = float(np.sum(R * R))
    iters = 0
    for iters in range(1, max_iter + 1):
        if np.sqrt(rs) <= tol * denom:
            iters -= 1
            break
        Ap = apply(P)
        pap = float(np.sum(P * Ap))
        if not np.isfinite(pap) or pap <= 0.0:
            raise RuntimeError(f"CG breakdown at iteration {iters} (curvature {pap})")
        alpha = rs / pap
        X += alpha * P
        R -= alpha * Ap
        rs_new = float(np.sum(R * R))
        if not np.isfinite(rs_new):
            raise RuntimeError(f"CG breakdown at iteration {iters} (non-finite residual)")
        P = R + (rs_new / rs) * P
        rs = rs_new
    info = {
        "iterations": iters,
        "relative_residual": float(np.sqrt(rs) / denom),
        "misfit": _misfit_from_forms(X, s1w, B, norm_y2),
    }
    return X, info


def _misfit_from_forms(C, s1w, B, norm_y2):
    """``sum_k w_k ||C psi_k - y_k||^2`` from the accumulated normal forms."""
    val = float(np.sum((C @ s1w) * C) - 2.0 * np.sum(C * B) + norm_y2)
    return max(val, 0.0)


def objective_terms(field: POUNetField, targets, weights=None, lam_s=0.0, lam_t=0.0):
    """(misfit, spatial penalty, temporal penalty) of the embedding objective."""
    grid = field.grid
    source, _ = _frame_source(targets)
    w = _normalize_weights(weights, grid.frames)
    psi, dpsi = partition_matrix(field.net, grid.frame_times())
    C = field.coeffs
    lap = spatial_laplacian(grid)
    misfit = 0.0
    spatial = 0.0
    for k in range(grid.frames):
        f = C @ psi[:, k]
        r = f - np.asarray(source(k), dtype=np.float64)
        misfit += w[k] * float(r @ r)
        if lam_s > 0:
            spatial += float(f @ (lap @ f))
    temporal = float(np.sum((C.T @ C) * (dpsi @ dpsi.T))) if lam_t > 0 else 0.0
    return misfit, lam_s * spatial, lam_t * temporal


def _target_forms(field: POUNetField, targets, weights, lam_s):
    """Per-frame linear forms of the objective restricted to the network.

    With C frozen, the objective only sees the targets through
    ``q_k = C^T y_k`` and ``n_k = ||y_k||^2``, plus the P x P matrices
    ``C^T C`` and ``C^T D^T D C``.
    """
    grid = field.grid
    source, _ = _frame_source(targets)
    K = grid.frames
    w = _normalize_weights(weights, K)
    C = field.coeffs
    a1 = C.T @ C
    a2 = C.T @ (spatial_laplacian(grid) @ C) if lam_s > 0 else None
    q = np.empty((K, C.shape[1]))
    n2 = np.empty(K)
    for k in range(K):
        y = np.asarray(source(k), dtype=np.float64)
        q[k] = y @ C
        n2[k] = float(y @ y)
    return w, q, n2, a1, a2


def _batch_loss_grads(net, times, w, q, n2, a1, a2, lam_s, lam_t, scale):
    """Loss on the given frames (scaled) and its adjoints w.r.t. psi, psi'."""
    psi, dpsi, cache = _forward_tangent(net, times)
    wk = w[:, None]
    resid = psi @ a1 - q
    loss = scale * float(
        np.sum(w * (np.sum(psi * resid, axis=1) - np.sum(q * psi, axis=1) + n2))
    )
    grad_psi = 2.0 * scale * wk * resid
    if lam_s > 0:
        sp_term = psi @ a2
        loss += lam_s * scale * float(np.sum(psi * sp_term))
        grad_psi += 2.0 * lam_s * scale * sp_term
    if lam_t > 0:
        tp_term = dpsi @ a1
        loss += lam_t * scale * float(np.sum(dpsi * tp_term))
        grad_dpsi = 2.0 * lam_t * scale * tp_term
    else:
        grad_dpsi = np.zeros_like(dpsi)
    return loss, grad_psi, grad_dpsi, cache


def objective_and_gradient(field: POUNetField, targets, weights=None,
                           lam_s: float = 0.0, lam_t: float = 0.0):
    """Full-batch embedding objective in the network weights, with gradient.

    Returns ``(value, flat_gradient)`` where the gradient is ordered like
    :meth:`PartitionNet.flatten_params`.
    """
    w, q, n2, a1, a2 = _target_forms(field, targets, weights, lam_s)
    times = field.grid.frame_times()
    loss, gp, gd, cache = _batch_loss_grads(
        field.net, times, w, q, n2, a1, a2, lam_s, lam_t, 1.0
    )
    gw, gb = _backprop(field.net, cache, gp, gd)
    flat = np.concatenate([np.concatenate([a.ravel(), b.ravel()]) for a, b in zip(gw, gb)])
    return loss, flat


def update_partition(
    field: POUNetField,
    targets,
    weights=None,
    lam_s: float = 0.0,
    lam_t: float = 0.0,
    adam: AdamConfig | None = None,
    rng: np.random.Generator | None = None,
):
    """Adam steps on the embedding objective restricted to the network weights.

    Each step estimates the objective from a random subset of frames sized
    to ``batch_points`` spatiotemporal samples (frames x pixels), rescaled
    by K / subset for unbiasedness.  Returns ``(net, info)`` with
    initial/final full objectives recorded.
    """
    adam = adam or AdamConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    grid = field.grid
    K = grid.frames
    M = grid.n_pixels
    times = grid.frame_times()
    w, q, n2, a1, a2 = _target_forms(field, targets, weights, lam_s)

    def full_objective(net):
        loss, _, _, _ = _batch_loss_grads(net, times, w, q, n2, a1, a2, lam_s, lam_t, 1.0)
        return loss

    net = field.net
    params = [np.array(p, copy=True) for wb in zip(net.weights, net.biases) for p in wb]
    m_state = [np.zeros_like(p) for p in params]
    v_state = [np.zeros_like(p) for p in params]
    initial = full_objective(net)
    frames_per_step = max(1, min(K, int(round(adam.batch_points / M))))

    current = net
    for step in range(1, adam.steps + 1):
        sel = np.sort(rng.choice(K, size=frames_per_step, replace=False))
        loss, gp, gd, cache = _batch_loss_grads(
            current, times[sel], w[sel], q[sel], n2[sel], a1, a2,
            lam_s, lam_t, K / frames_per_step,
        )
        if not np.isfinite(loss):
            raise RuntimeError(
                f"non-finite training loss at Adam step {step} (frames {sel.tolist()})"
            )
        gw, gb = _backprop(current, cache, gp, gd)
        grads = [g for pair in zip(gw, gb) for g in pair]
        t_corr1 = 1.0 - adam.beta1**step
        t_corr2 = 1.0 - adam.beta2**step
        for p, g, ms, vs in zip(params, grads, m_state, v_state):
            ms *= adam.beta1
            ms += (1.0 - adam.beta1) * g
            vs *= adam.beta2
            vs += (1.0 - adam.beta2) * g * g
            p -= adam.learning_rate * (ms / t_corr1) / (np.sqrt(vs / t_corr2) + adam.eps)
        ws = tuple(params[2 * i] for i in range(len(net.weights)))
        bs = tuple(params[2 * i + 1] for i in range(len(net.weights)))
        current = PartitionNet(ws, bs, net.horizon)

    final = full_objective(current)
    info = {"initial_objective": initial, "final_objective": final,
            "frames_per_step": frames_per_step, "steps": adam.steps}
    return current, info


def embed(
    grid: SpacetimeGrid,
    targets,
    weights=None,
    lam_s: float = 0.0,
    lam_t: float = 0.0,
    rounds: int = 3,
    adam: AdamConfig | None = None,
    init_field: POUNetField | None = None,
    hidden: tuple[int, ...] = DEFAULT_HIDDEN,
    partitions: int = DEFAULT_PARTITIONS,
    seed: int = 0,
    cg_tol: float = 1e-8,
    cg_max_iter: int = 500,
    rng: np.random.Generator | None = None,
):
    """Fit a field to per-frame targets by alternating minimization.

    Cold starts initialize the network randomly and fit the coefficients to
    the time-averaged target; warm starts (``init_field``) keep the given
    state.  Each round solves the coefficients exactly (CG) and then takes
    Adam steps on the network; a closing coefficient solve follows the last
    round.  Returns ``(field, records)`` where records hold the per-round
    misfit after each coefficient solve.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    source, _ = _frame_source(targets)
    K = grid.frames
    w = _normalize_weights(weights, K)
    adam = adam or AdamConfig()
    rng = rng if rng is not None else np.random.default_rng(seed)

    if init_field is not None:
        field = POUNetField(init_field.net, init_field.coeffs.copy(), grid)
    else:
        net = init_partition_net(grid.horizon, hidden=hidden, partitions=partitions, seed=seed)
        # coefficients start from an embedding of the time-averaged target
        wsum = float(np.sum(w))
        ybar = np.zeros(grid.n_pixels)
        for k in range(K):
            ybar += (w[k] / wsum if wsum > 0 else 1.0 / K) * np.asarray(source(k), dtype=np.float64)
        c0 = np.zeros((grid.n_pixels, net.partitions))
        stub = POUNetField(net, c0, grid)
        C, _ = solve_coefficients(
            stub, lambda k: ybar, weights=w, lam_s=lam_s, lam_t=lam_t,
            tol=cg_tol, max_iter=cg_max_iter,
        )
        field = POUNetField(net, C, grid)

    records = []
    for r in range(1, rounds + 1):
        C, cg_info = solve_coefficients(
            field, source, weights=w, lam_s=lam_s, lam_t=lam_t,
            tol=cg_tol, max_iter=cg_max_iter,
        )
        field = POUNetField(field.net, C, grid)
        records.append({"round": r, "stage": "coefficients", **cg_info})
        net, train_info = update_partition(
            field, source, weights=w, lam_s=lam_s, lam_t=lam_t, adam=adam, rng=rng
        )
        field = POUNetField(net, field.coeffs, grid)
        records.append({"round": r, "stage": "partition", **train_info})
    C, cg_info = solve_coefficients(
        field, source, weights=w, lam_s=lam_s, lam_t=lam_t, tol=cg_tol, max_iter=cg_max_iter
    )
    field = POUNetField(field.net, C, grid)
    records.append({"round": rounds, "stage": "final", **cg_info})
    return field, records
