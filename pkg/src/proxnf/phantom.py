"""Synthetic dynamic perfusion phantom.

Static anatomy is a stack of ellipse "organs" painted over a background in
order (later regions overwrite earlier ones) with a disk lesion painted
last.  The lesion brightens over time following a two-compartment
pharmacokinetic uptake curve driven by a ramp-then-decay plasma input, and
an optional periodic breathing term stretches the whole anatomy along y.
Values are induced-pressure amplitudes in the display range used throughout
the package (roughly 1e-4 .. 0.06).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from proxnf.grid import ImageStack, RoiMask, SpacetimeGrid, project


@dataclass(frozen=True)
class ToftsTAC:
    """Two-compartment uptake curve parameters.

    The plasma input is zero before ``t_injection``, ramps linearly to
    ``plasma_peak`` over ``bolus_duration``, then decays exponentially at
    rate ``plasma_decay``.  Tissue concentration is the convolution of that
    input with ``k_trans * exp(-k_ep * t)``, evaluated in closed form.
    """

    # defaults put the lesion peak near 270 s and decay it to ~1/3 by 648 s
    k_trans: float = 5e-3
    k_ep: float = 6e-3
    t_injection: float = 90.0
    bolus_duration: float = 30.0
    plasma_peak: float = 1.0
    plasma_decay: float = 6e-3

    def __post_init__(self):
        if min(self.k_trans, self.k_ep, self.plasma_decay) < 0:
            raise ValueError("rates must be nonnegative")
        if self.bolus_duration <= 0:
            raise ValueError("bolus_duration must be positive")


def plasma_input(tac: ToftsTAC, t):
    """Plasma concentration at time(s) t: ramp to peak, then exponential decay."""
    t = np.asarray(t, dtype=np.float64)
    t0 = tac.t_injection
    t1 = t0 + tac.bolus_duration
    ramp = tac.plasma_peak * (t - t0) / tac.bolus_duration
    decay = tac.plasma_peak * np.exp(-tac.plasma_decay * np.maximum(t - t1, 0.0))
    return np.where(t < t0, 0.0, np.where(t < t1, ramp, decay))


def tofts_tac(tac: ToftsTAC, t, horizon: float | None = None):
    """Tissue concentration C(t) by closed-form piecewise integration.

    ``t`` may be a scalar or array in ``[0, horizon]`` (range-checked only
    when ``horizon`` is given).
    """
    t_arr = np.asarray(t, dtype=np.float64)
    if horizon is not None and (np.any(t_arr < 0) or np.any(t_arr > horizon)):
        raise ValueError(f"time outside [0, {horizon}]")
    a = tac.k_ep
    b = tac.plasma_decay
    t0 = tac.t_injection
    t1 = t0 + tac.bolus_duration
    rate = tac.plasma_peak / tac.bolus_duration

    out = np.zeros_like(t_arr)

    # during the ramp: k_trans * rate * (u/a - (1 - e^{-a u})/a^2), u = t - t0
    during = (t_arr >= t0) & (t_arr < t1)
    if np.any(during):
        u = t_arr[during] - t0
        if a > 0:
            val = rate * (u / a - (1.0 - np.exp(-a * u)) / a**2)
        else:
            val = rate * u**2 / 2.0
        out[during] = tac.k_trans * val

    after = t_arr >= t1
    if np.any(after):
        v = t_arr[after] - t1
        if a > 0:
            ramp_tail = rate * np.exp(-a * v) * (
                tac.bolus_duration / a - (1.0 - np.exp(-a * tac.bolus_duration)) / a**2
            )
        else:
            ramp_tail = np.full_like(v, rate * tac.bolus_duration**2 / 2.0)
        if a > 0 and not np.isclose(a, b):
            decay_part = tac.plasma_peak * (np.exp(-b * v) - np.exp(-a * v)) / (a - b)
        elif a > 0:
            decay_part = tac.plasma_peak * v * np.exp(-a * v)
        else:
            decay_part = tac.plasma_peak * (1.0 - np.exp(-b * v)) / b if b > 0 else tac.plasma_peak * v
        out[after] = tac.k_trans * (ramp_tail + decay_part)

    return out if out.ndim else float(out)


def tac_peak(tac: ToftsTAC, horizon: float, n: int = 4096) -> float:
    """Maximum of C over [0, horizon], evaluated on a dense uniform time grid."""
    ts = np.linspace(0.0, horizon, n)
    return float(np.max(tofts_tac(tac, ts)))


@dataclass(frozen=True)
class EllipseRegion:
    center: tuple[float, float]
    semi_axes: tuple[float, float]
    rotation_deg: float
    base_value: float

    def contains(self, x, y):
        cx, cy = self.center
        th = np.deg2rad(self.rotation_deg)
        dx = x - cx
        dy = y - cy
        u = np.cos(th) * dx + np.sin(th) * dy
        v = -np.sin(th) * dx + np.cos(th) * dy
        ax, ay = self.semi_axes
        return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


@dataclass(frozen=True)
class Lesion:
    center: tuple[float, float]
    radius: float = 0.35
    base_value: float = 0.03

    def contains(self, x, y):
        return (x - self.center[0]) ** 2 + (y - self.center[1]) ** 2 <= self.radius**2


@dataclass(frozen=True)
class AnatomyModel:
    """Painter's-order ellipse anatomy with a disk lesion painted last."""

    regions: tuple[EllipseRegion, ...]
    lesion: Lesion
    background_value: float = 1e-4


@dataclass(frozen=True)
class DynamicPhantom:
    """Anatomy plus lesion uptake dynamics and optional breathing motion.

    ``contrast_gain`` scales the lesion enhancement: lesion value at time t
    is ``base * (1 + contrast_gain * C(t) / max C)``.  Breathing rescales
    the y coordinate by ``1 + breathing_amplitude * sin(2 pi t / period)``.
    """

    anatomy: AnatomyModel
    tac: ToftsTAC = field(default_factory=ToftsTAC)
    horizon: float = 648.0
    contrast_gain: float = 1.0
    breathing_amplitude: float = 0.0
    breathing_period: float = 5.0

    def __post_init__(self):
        if self.tac.t_injection + self.tac.bolus_duration >= self.horizon:
            raise ValueError("injection must finish before the time horizon")
        object.__setattr__(self, "_tac_peak", tac_peak(self.tac, self.horizon))

    @property
    def peak_concentration(self) -> float:
        return self._tac_peak

    def lesion_value(self, t) -> np.ndarray:
        c = tofts_tac(self.tac, t)
        peak = self._tac_peak if self._tac_peak > 0 else 1.0
        return self.anatomy.lesion.base_value * (1.0 + self.contrast_gain * c / peak)

    def evaluate(self, x, y, t):
        """Phantom value at spatial coordinates (arrays) and scalar time t."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if self.breathing_amplitude != 0.0:
            scale = 1.0 + self.breathing_amplitude * np.sin(
                2.0 * np.pi * t / self.breathing_period
            )
            y = y / scale
        out = np.full(np.broadcast(x, y).shape, self.anatomy.background_value)
        for region in self.anatomy.regions:
            out = np.where(region.contains(x, y), region.base_value, out)
        out = np.where(self.anatomy.lesion.contains(x, y), self.lesion_value(t), out)
        return out


def evaluate(phantom: DynamicPhantom, r, t):
    """Functional alias for :meth:`DynamicPhantom.evaluate` on (x, y) pairs."""
    r = np.asarray(r, dtype=np.float64)
    return phantom.evaluate(r[..., 0], r[..., 1], t)


def render(phantom: DynamicPhantom, grid: SpacetimeGrid, supersample: int = 4) -> ImageStack:
    """Rasterize the phantom: each coefficient averages supersample^2 points."""
    if supersample < 1:
        raise ValueError("supersample must be >= 1")
    if supersample == 1:
        return project(grid, phantom.evaluate)
    h = grid.pixel_size
    centers = grid.pixel_centers()
    offs = (np.arange(supersample) + 0.5) / supersample * h - 0.5 * h
    ox, oy = np.meshgrid(offs, offs, indexing="ij")
    ox = ox.ravel()
    oy = oy.ravel()
    coeffs = np.zeros((grid.n_pixels, grid.frames))
    for k, t in enumerate(grid.frame_times()):
        acc = np.zeros(grid.n_pixels)
        for dx, dy in zip(ox, oy):
            acc += phantom.evaluate(centers[:, 0] + dx, centers[:, 1] + dy, t)
        coeffs[:, k] = acc / (supersample * supersample)
    return ImageStack(grid, coeffs)


def lesion_mask(phantom: DynamicPhantom, grid: SpacetimeGrid, dilate: int = 2) -> RoiMask:
    """Pixels whose center lies in the lesion, dilated by ``dilate`` pixels."""
    from scipy.ndimage import binary_dilation

    centers = grid.pixel_centers()
    inside = phantom.anatomy.lesion.contains(centers[:, 0], centers[:, 1])
    img = inside.reshape(grid.side_pixels, grid.side_pixels)
    if dilate > 0:
        img = binary_dilation(img, iterations=dilate)
    return RoiMask(np.nonzero(img.ravel())[0])


def default_anatomy() -> AnatomyModel:
    """Abdomen-like ellipse anatomy sized for the 3.72 cm field of view."""
    regions = (
        EllipseRegion((0.0, -0.05), (1.62, 1.38), -4.0, 0.010),   # body
        EllipseRegion((-0.85, 0.10), (0.45, 0.72), 18.0, 0.022),  # left organ
        EllipseRegion((0.78, -0.15), (0.40, 0.66), -12.0, 0.025),  # right organ
        EllipseRegion((-0.15, -0.70), (0.55, 0.30), 7.0, 0.016),  # lower organ
        EllipseRegion((0.12, 0.55), (0.30, 0.22), 0.0, 0.045),    # vessel, bright
        EllipseRegion((-0.30, -0.25), (0.22, 0.18), 30.0, 0.006), # dark inclusion
        EllipseRegion((0.45, 0.75), (0.18, 0.14), -25.0, 0.035),  # small organ
    )
    lesion = Lesion(center=(0.30, -0.72), radius=0.35, base_value=0.030)
    return AnatomyModel(regions=regions, lesion=lesion, background_value=1e-4)


def default_phantom(breathing_amplitude: float = 0.0) -> DynamicPhantom:
    return DynamicPhantom(
        anatomy=default_anatomy(),
        breathing_amplitude=breathing_amplitude,
    )


def with_breathing(phantom: DynamicPhantom, amplitude: float) -> DynamicPhantom:
    return replace(phantom, breathing_amplitude=amplitude)


def phantom_to_dict(phantom: DynamicPhantom) -> dict:
    """JSON-ready description covering every phantom parameter."""
    an = phantom.anatomy
    return {
        "regions": [
            {
                "center": list(r.center),
                "semi_axes": list(r.semi_axes),
                "rotation_deg": r.rotation_deg,
                "base_value": r.base_value,
            }
            for r in an.regions
        ],
        "lesion": {
            "center": list(an.lesion.center),
            "radius": an.lesion.radius,
            "base_value": an.lesion.base_value,
        },
        "background_value": an.background_value,
        "tac": {
            "k_trans": phantom.tac.k_trans,
            "k_ep": phantom.tac.k_ep,
            "t_injection": phantom.tac.t_injection,
            "bolus_duration": phantom.tac.bolus_duration,
            "plasma_peak": phantom.tac.plasma_peak,
            "plasma_decay": phantom.tac.plasma_decay,
        },
        "horizon": phantom.horizon,
        "contrast_gain": phantom.contrast_gain,
        "breathing_amplitude": phantom.breathing_amplitude,
        "breathing_period": phantom.breathing_period,
    }


def phantom_from_dict(config: dict) -> DynamicPhantom:
    """Inverse of :func:`phantom_to_dict`; missing keys take the defaults."""
    base = default_phantom()
    anatomy = base.anatomy
    if "regions" in config or "lesion" in config or "background_value" in config:
        regions = tuple(
            EllipseRegion(
                center=tuple(r["center"]),
                semi_axes=tuple(r["semi_axes"]),
                rotation_deg=float(r.get("rotation_deg", 0.0)),
                base_value=float(r["base_value"]),
            )
            for r in config.get("regions", [])
        ) or anatomy.regions
        lesion_cfg = config.get("lesion", {})
        lesion = Lesion(
            center=tuple(lesion_cfg.get("center", anatomy.lesion.center)),
            radius=float(lesion_cfg.get("radius", anatomy.lesion.radius)),
            base_value=float(lesion_cfg.get("base_value", anatomy.lesion.base_value)),
        )
        anatomy = AnatomyModel(
            regions=regions,
            lesion=lesion,
            background_value=float(config.get("background_value", anatomy.background_value)),
        )
    tac = ToftsTAC(**config["tac"]) if "tac" in config else base.tac
    return DynamicPhantom(
        anatomy=anatomy,
        tac=tac,
        horizon=float(config.get("horizon", base.horizon)),
        contrast_gain=float(config.get("contrast_gain", base.contrast_gain)),
        breathing_amplitude=float(config.get("breathing_amplitude", base.breathing_amplitude)),
        breathing_period=float(config.get("breathing_period", base.breathing_period)),
    )
