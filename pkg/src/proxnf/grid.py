"""Spatiotemporal discretization and the projection/embedding algebra.

A dynamic object lives on a square field of view ``[-L/2, L/2]^2`` observed
over ``[0, T]``.  Space is discretized into ``M = M_s**2`` square pixels and
time into ``K`` uniform frames; the expansion basis is the tensor product of
pixel indicator functions and frame-interval indicator functions.  A
discretized object is an ``M x K`` coefficient matrix (:class:`ImageStack`).

`project` maps a continuous object to coefficients by pixel-center sampling
(the midpoint rule for the indicator basis, exact on basis members);
`adjoint_embed` maps coefficients back to a function, carrying the ``1/V``
factor that makes it the adjoint of `project` with respect to the
volume-weighted inner product (`inner_product`).  `to_function` is the plain
isomorphism without that factor: ``project(to_function(F)) == F`` exactly,
while ``project(adjoint_embed(F)) == F / V``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SpacetimeGrid:
    """Uniform Cartesian pixel grid plus uniform frame times.

    Parameters
    ----------
    side_pixels : int
        Pixels per side, ``M_s``; total pixel count is ``M = M_s**2``.
    fov_side : float
        Side length ``L`` of the square field of view (cm).
    frames : int
        Number of frames ``K``.
    horizon : float
        Acquisition time ``T`` (s); frame times are ``t_k = k * T/K``
        for ``k = 0..K-1``.
    """

    side_pixels: int
    fov_side: float
    frames: int
    horizon: float

    def __post_init__(self):
        if self.side_pixels < 1 or self.frames < 1:
            raise ValueError("side_pixels and frames must be positive")
        if self.fov_side <= 0 or self.horizon <= 0:
            raise ValueError("fov_side and horizon must be positive")

    @property
    def n_pixels(self) -> int:
        return self.side_pixels * self.side_pixels

    @property
    def pixel_size(self) -> float:
        return self.fov_side / self.side_pixels

    @property
    def frame_interval(self) -> float:
        return self.horizon / self.frames

    @property
    def voxel_volume(self) -> float:
        """Spatiotemporal voxel volume ``V = h**2 * dT`` (cm^2 s)."""
        return self.pixel_size**2 * self.frame_interval

    def pixel_centers(self) -> np.ndarray:
        """(M, 2) array of pixel centers, row-major with y varying fastest."""
        h = self.pixel_size
        edge = -0.5 * self.fov_side
        c = edge + h * (np.arange(self.side_pixels) + 0.5)
        x = np.repeat(c, self.side_pixels)
        y = np.tile(c, self.side_pixels)
        return np.column_stack([x, y])

    def frame_times(self) -> np.ndarray:
        """(K,) array of frame times ``t_k = k * dT``."""
        return np.arange(self.frames) * self.frame_interval

    def pixel_index(self, x, y):
        """Flat pixel index containing (x, y), or -1 outside the FOV.

        Pixel bins are half-open ``[edge_i, edge_{i+1})`` except the last,
        which includes the upper FOV edge.
        """
        x = np.asarray(x)
        y = np.asarray(y)
        h = self.pixel_size
        half = 0.5 * self.fov_side
        ix = np.floor((x + half) / h).astype(np.int64)
        iy = np.floor((y + half) / h).astype(np.int64)
        # points exactly on the upper boundary belong to the last pixel
        ix = np.where(x == half, self.side_pixels - 1, ix)
        iy = np.where(y == half, self.side_pixels - 1, iy)
        inside = (x >= -half) & (x <= half) & (y >= -half) & (y <= half)
        m = ix * self.side_pixels + iy
        return np.where(inside, m, -1)

    def frame_index(self, t):
        """Index of the frame interval containing time t (nearest frame time).

        Intervals are centered on frame times; the trailing half interval
        ``(T - dT/2, T]`` maps to the last frame so the map is total on
        ``[0, T]``.  Returns -1 outside ``[0, T]``.
        """
        t = np.asarray(t)
        k = np.floor(t / self.frame_interval + 0.5).astype(np.int64)
        k = np.clip(k, 0, self.frames - 1)
        inside = (t >= 0) & (t <= self.horizon)
        return np.where(inside, k, -1)


@dataclass(frozen=True)
class ImageStack:
    """Discretized spatiotemporal object: column k is the frame-k snapshot."""

    grid: SpacetimeGrid
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.float64)
        if c.shape != (self.grid.n_pixels, self.grid.frames):
            raise ValueError(
                f"coefficient shape {c.shape} does not match grid "
                f"({self.grid.n_pixels}, {self.grid.frames})"
            )
        if not np.all(np.isfinite(c)):
            raise ValueError("image stack contains non-finite entries")
        object.__setattr__(self, "coeffs", c)

    def frame(self, k: int) -> np.ndarray:
        return self.coeffs[:, k]

    def frame_image(self, k: int) -> np.ndarray:
        """Frame k as an (M_s, M_s) array indexed [ix, iy]."""
        s = self.grid.side_pixels
        return self.coeffs[:, k].reshape(s, s)


@dataclass(frozen=True)
class RoiMask:
    """Region of interest as a set of flat pixel indices."""

    member_pixels: np.ndarray

    def __post_init__(self):
        p = np.unique(np.asarray(self.member_pixels, dtype=np.int64))
        if p.size == 0:
            raise ValueError("RoiMask must contain at least one pixel")
        if p.min() < 0:
            raise ValueError("pixel indices must be nonnegative")
        object.__setattr__(self, "member_pixels", p)

    @property
    def size(self) -> int:
        return self.member_pixels.size


def project(grid: SpacetimeGrid, obj) -> ImageStack:
    """Project a continuous object onto grid coefficients.

    ``obj(x, y, t)`` must accept coordinate arrays ``x, y`` and a scalar
    time ``t`` and return values of the same shape.  Entry (m, k) is the
    object value at the pixel-m center and frame time ``t_k`` (midpoint
    rule for the indicator basis; exact for piecewise-constant objects).
    """
    centers = grid.pixel_centers()
    out = np.empty((grid.n_pixels, grid.frames), dtype=np.float64)
    for k, t in enumerate(grid.frame_times()):
        vals = np.asarray(obj(centers[:, 0], centers[:, 1], t), dtype=np.float64)
        bad = ~np.isfinite(vals)
        if np.any(bad):
            m = int(np.argmax(bad))
            raise ValueError(f"object evaluated non-finite at pixel m={m}, frame k={k}")
        out[:, k] = vals
    return ImageStack(grid, out)


def to_function(grid: SpacetimeGrid, stack: ImageStack):
    """Piecewise-constant evaluator with the stack's own coefficients.

    Inverse of `project` on grid-representable objects:
    ``project(grid, to_function(grid, F)) == F`` bit-for-bit.
    """
    return _indicator_evaluator(grid, stack.coeffs)


def adjoint_embed(grid: SpacetimeGrid, stack: ImageStack):
    """Adjoint of `project` under `inner_product`: coefficients scaled by 1/V.

    Evaluates to ``f[m, k] / V`` inside pixel m during frame interval k and
    to 0 outside the spacetime domain.
    """
    return _indicator_evaluator(grid, stack.coeffs / grid.voxel_volume)


def _indicator_evaluator(grid: SpacetimeGrid, values: np.ndarray):
    def evaluate(x, y, t):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        m = grid.pixel_index(x, y)
        k = grid.frame_index(t)
        m_safe = np.where(m >= 0, m, 0)
        k_safe = np.where(k >= 0, k, 0)
        out = values[m_safe, k_safe]
        return np.where((m >= 0) & (k >= 0), out, 0.0)

    return evaluate


def inner_product(a: ImageStack, b: ImageStack) -> float:
    """Volume-weighted inner product ``sum_{m,k} a[m,k] b[m,k] V``."""
    if a.grid != b.grid:
        raise ValueError("image stacks live on different grids")
    return float(np.sum(a.coeffs * b.coeffs) * a.grid.voxel_volume)
