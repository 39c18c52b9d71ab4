"""Synthetic beating-heart sequences with analytic labels and motion.

Each frame is the reference geometry scaled radially about the LV centre by
``s(t) = 1 - a * sin^2(pi * t / T)``, so frame 0 is end-diastole and the cycle
wraps around. Scaling is in-plane (H, W) unless ``through_plane_contraction``
is set; with only a handful of slices, depth scaling mostly produces
staircase artefacts. Ground-truth displacement fields use the pull convention of
:mod:`shapereg.warp`: ``mask_t(x) = mask_{t-1}(x + D_t(x))``.

Arrays are numpy, laid out as ``(T, C, H, W, D)`` for volumes/DVFs and
``(T, H, W, D)`` for label grids.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

NUM_CLASSES = 4
BACKGROUND, LV, MYO, RV = 0, 1, 2, 3
CLASS_NAMES = ("background", "LV", "LVmyo", "RV")

# Base intensity per class; texture and noise are added on top.
CLASS_INTENSITY = np.array([0.25, 0.85, 0.45, 0.70], dtype=np.float64)
TEXTURE_AMPLITUDE = 0.1


class PhantomError(ValueError):
    pass


@dataclass
class PhantomSpec:
    grid: tuple[int, int, int] = (40, 40, 8)
    frames: int = 6
    voxel_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    lv_radii: tuple[float, float, float] = (6.5, 6.5, 2.2)
    myo_thickness: float = 3.5
    rv_offset: float = 7.5
    # RV ellipsoid radii: along the LV->RV direction, across it (in-plane).
    rv_radii: tuple[float, float] = (8.5, 10.5)
    contraction_amplitude: float = 0.2
    # In-plane angle (radians) of the LV->RV direction, measured from +W.
    phase_offset: float = 0.0
    noise_sigma: float = 0.03
    seed: int = 0
    # LV centre in voxel coordinates; None means grid centre.
    center: tuple[float, float, float] | None = None
    through_plane_contraction: bool = False

    def resolved_center(self) -> np.ndarray:
        if self.center is not None:
            return np.asarray(self.center, dtype=np.float64)
        return (np.asarray(self.grid, dtype=np.float64) - 1.0) / 2.0

    def scale(self, t: int | np.ndarray) -> np.ndarray:
        """Radial scale factor of frame ``t`` (vectorised)."""
        t = np.asarray(t, dtype=np.float64)
        return 1.0 - self.contraction_amplitude * np.sin(np.pi * t / self.frames) ** 2

    def axis_scales(self, t: int) -> np.ndarray:
        """Per-axis scale factors of frame ``t``, shape (3,)."""
        s = float(self.scale(t))
        return np.array([s, s, s if self.through_plane_contraction else 1.0])

    def lv_volumes(self) -> np.ndarray:
        """Analytic LV cavity volume (voxel^3) per frame."""
        r = np.asarray(self.lv_radii)
        power = 3 if self.through_plane_contraction else 2
        return 4.0 / 3.0 * np.pi * np.prod(r) * self.scale(np.arange(self.frames)) ** power

    def es_index(self) -> int:
        return int(np.argmin(np.round(self.lv_volumes(), 9)))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class PhantomSample:
    volumes: np.ndarray      # (T, 1, H, W, D) float32
    masks: np.ndarray        # (T, H, W, D) uint8
    true_dvfs: np.ndarray    # (T, 3, H, W, D) float32, frame t-1 -> t
    ed_index: int
    es_index: int
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    meta: dict = field(default_factory=dict)

    @property
    def frames(self) -> int:
        return self.volumes.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.volumes.shape[2:])


def _validate(spec: PhantomSpec) -> None:
    H, W, D = spec.grid
    if H < 8 or W < 8:
        raise PhantomError(f"grid H,W must be >= 8, got {spec.grid}")
    if D < 4:
        raise PhantomError(f"grid D must be >= 4, got {spec.grid}")
    if spec.frames < 1:
        raise PhantomError("frames must be positive")
    a = spec.contraction_amplitude
    if not 0.0 <= a < 0.5:
        raise PhantomError(f"contraction_amplitude must lie in [0, 0.5), got {a}")
    if min(spec.lv_radii) <= 0 or spec.myo_thickness <= 0 or min(spec.rv_radii) <= 0:
        raise PhantomError("radii and myo_thickness must be positive")
    if spec.noise_sigma < 0:
        raise PhantomError("noise_sigma must be >= 0")

    c = spec.resolved_center()
    outer = _outer_radii(spec)
    rv_center = c[:2] + spec.rv_offset * _rv_direction(spec)
    rv_reach = max(spec.rv_radii)
    checks = [
        ("LV myocardium", c, outer),
        ("RV", np.array([rv_center[0], rv_center[1], c[2]]),
         np.array([rv_reach, rv_reach, outer[2]])),
    ]
    # frame 0 is the largest configuration, so checking it covers all frames
    for name, centre, radii in checks:
        for axis, label in enumerate("HWD"):
            lo, hi = centre[axis] - radii[axis], centre[axis] + radii[axis]
            if lo < 0 or hi > spec.grid[axis] - 1:
                raise PhantomError(
                    f"{name} shell overlaps the grid boundary along {label}: "
                    f"extent [{lo:.2f}, {hi:.2f}] not inside [0, {spec.grid[axis] - 1}]"
                )


def _outer_radii(spec: PhantomSpec) -> np.ndarray:
    r = np.asarray(spec.lv_radii, dtype=np.float64)
    return r * (1.0 + spec.myo_thickness / r[0])


def _rv_direction(spec: PhantomSpec) -> np.ndarray:
    return np.array([np.sin(spec.phase_offset), np.cos(spec.phase_offset)])


def reference_labels(spec: PhantomSpec, y: np.ndarray) -> np.ndarray:
    """Label the reference (ED) geometry at points ``y`` of shape (3, ...)."""
    c = spec.resolved_center().reshape((3,) + (1,) * (y.ndim - 1))
    rel = y - c
    r_in = np.asarray(spec.lv_radii).reshape(c.shape)
    r_out = _outer_radii(spec).reshape(c.shape)
    q_in = np.sum((rel / r_in) ** 2, axis=0)
    q_out = np.sum((rel / r_out) ** 2, axis=0)

    u = _rv_direction(spec)
    along = rel[0] * u[0] + rel[1] * u[1]
    across = -rel[0] * u[1] + rel[1] * u[0]
    ra, rb = spec.rv_radii
    q_rv = ((along - spec.rv_offset) / ra) ** 2 + (across / rb) ** 2 + (rel[2] / r_out[2]) ** 2

    labels = np.zeros(q_in.shape, dtype=np.uint8)
    labels[(q_rv <= 1.0) & (along >= 0.0)] = RV
    labels[q_out <= 1.0] = MYO
    labels[q_in <= 1.0] = LV
    return labels


def _texture(spec: PhantomSpec, rng: np.random.Generator):
    freqs = rng.integers(1, 3, size=3)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
    sizes = np.asarray(spec.grid, dtype=np.float64)

    def tex(y: np.ndarray) -> np.ndarray:
        out = np.full(y.shape[1:], TEXTURE_AMPLITUDE)
        for axis in range(3):
            out = out * np.cos(2.0 * np.pi * freqs[axis] * y[axis] / sizes[axis] + phases[axis])
        return out

    return tex


def voxel_grid(shape: tuple[int, int, int]) -> np.ndarray:
    return np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij"))


def generate(spec: PhantomSpec) -> PhantomSample:
    """Render one phantom sequence; deterministic given ``spec.seed``."""
    _validate(spec)
    rng = np.random.default_rng(spec.seed)
    tex = _texture(spec, rng)
    T = spec.frames
    x = voxel_grid(spec.grid)
    c = spec.resolved_center().reshape(3, 1, 1, 1)
    s = [spec.axis_scales(t).reshape(3, 1, 1, 1) for t in range(T)]

    volumes = np.empty((T, 1) + tuple(spec.grid), dtype=np.float32)
    masks = np.empty((T,) + tuple(spec.grid), dtype=np.uint8)
    dvfs = np.empty((T, 3) + tuple(spec.grid), dtype=np.float32)
    for t in range(T):
        y = c + (x - c) / s[t]
        labels = reference_labels(spec, y)
        img = CLASS_INTENSITY[labels] + tex(y)
        if spec.noise_sigma > 0:
            img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
        volumes[t, 0] = img
        masks[t] = labels
        # pull map from frame t-1 (wrapping) onto frame t
        dvfs[t] = (x - c) * (s[t - 1] / s[t] - 1.0)

    return PhantomSample(
        volumes=volumes,
        masks=masks,
        true_dvfs=dvfs,
        ed_index=0,
        es_index=spec.es_index(),
        spacing=tuple(float(v) for v in spec.voxel_spacing),
        meta={"spec": spec.to_dict()},
    )


def _normalize(vol: np.ndarray) -> np.ndarray:
    lo, hi = float(vol.min()), float(vol.max())
    if hi <= lo:
        return np.zeros_like(vol)
    return (vol - lo) / (hi - lo)


def preprocess(
    raw: PhantomSample,
    margin: int = 30,
    target_hw: int = 128,
    target_depth: int = 16,
) -> PhantomSample:
    """Crop around the ED heart, resize in-plane, normalise, pad depth.

    The in-plane map from output to input voxel coordinates is
    ``x_in = offset + scale * x_out`` (corner-aligned). DVFs are resampled
    through it and rescaled so that warping stays consistent.
    """
    ed_mask = raw.masks[raw.ed_index]
    fg = np.argwhere(ed_mask > 0)
    if fg.size == 0:
        raise PhantomError("ED mask is empty; cannot locate the heart for cropping")
    T, _, H, W, D = raw.volumes.shape
    if D > target_depth:
        raise PhantomError(f"depth {D} exceeds target_depth {target_depth}")

    lo = fg[:, :2].min(axis=0) - margin
    hi = fg[:, :2].max(axis=0) + margin
    clamped = bool((lo < 0).any() or hi[0] > H - 1 or hi[1] > W - 1)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, [H - 1, W - 1])
    if clamped:
        logger.warning("crop box exceeded the grid and was clamped")

    scale = np.ones(3)
    offset = np.zeros(3)
    for axis in range(2):
        offset[axis] = lo[axis]
        scale[axis] = (hi[axis] - lo[axis]) / (target_hw - 1) if target_hw > 1 else 0.0

    out_shape = (target_hw, target_hw, D)
    coords = voxel_grid(out_shape) * scale.reshape(3, 1, 1, 1) + offset.reshape(3, 1, 1, 1)

    volumes = np.zeros((T, 1, target_hw, target_hw, target_depth), dtype=np.float32)
    masks = np.zeros((T, target_hw, target_hw, target_depth), dtype=np.uint8)
    dvfs = np.zeros((T, 3, target_hw, target_hw, target_depth), dtype=np.float32)
    inv_scale = np.where(scale > 0, 1.0 / np.where(scale > 0, scale, 1.0), 0.0)
    for t in range(T):
        vol = ndimage.map_coordinates(raw.volumes[t, 0].astype(np.float64), coords, order=1, mode="nearest")
        volumes[t, 0, :, :, :D] = _normalize(vol)
        masks[t, :, :, :D] = ndimage.map_coordinates(raw.masks[t], coords, order=0, mode="nearest")
        for a in range(3):
            comp = ndimage.map_coordinates(raw.true_dvfs[t, a].astype(np.float64), coords, order=1, mode="nearest")
            dvfs[t, a, :, :, :D] = comp * inv_scale[a]

    spacing = tuple(float(sp * (sc if sc > 0 else 1.0)) for sp, sc in zip(raw.spacing, scale))
    meta = dict(raw.meta)
    meta["preprocess"] = {
        "margin": int(margin),
        "target_hw": int(target_hw),
        "target_depth": int(target_depth),
        "crop_lo": [int(v) for v in lo],
        "crop_hi": [int(v) for v in hi],
        "scale": [float(v) for v in scale],
        "offset": [float(v) for v in offset],
        "clamped": clamped,
    }
    return PhantomSample(
        volumes=volumes,
        masks=masks,
        true_dvfs=dvfs,
        ed_index=raw.ed_index,
        es_index=raw.es_index,
        spacing=spacing,
        meta=meta,
    )


def jittered_spec(base: PhantomSpec, seed: int) -> PhantomSpec:
    """Draw a per-subject variation of ``base`` for dataset generation."""
    rng = np.random.default_rng([base.seed, seed])
    r = np.asarray(base.lv_radii, dtype=np.float64) * rng.uniform(0.9, 1.1)
    th = base.myo_thickness * rng.uniform(0.9, 1.1)
    # keep the through-plane outer extent of the base shape so the shell fits in D
    r[2] = _outer_radii(base)[2] / (1.0 + th / r[0])
    c = base.resolved_center()
    c = c + np.array([rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), 0.0])
    return dataclasses.replace(
        base,
        lv_radii=tuple(float(v) for v in r),
        myo_thickness=float(th),
        rv_offset=float(base.rv_offset * rng.uniform(0.95, 1.05)),
        contraction_amplitude=float(np.clip(base.contraction_amplitude * rng.uniform(0.8, 1.2), 0.0, 0.49)),
        phase_offset=float(base.phase_offset + rng.uniform(-0.4, 0.4)),
        center=tuple(float(v) for v in c),
        seed=int(rng.integers(0, 2**31 - 1)),
    )
