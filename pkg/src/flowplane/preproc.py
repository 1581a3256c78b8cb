"""Environment volumes: PC-MRA, divergence masking, CLAHE, resampling, systole."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import grid_points, pad_grid, sample_grid
from .volume_store import FlowVolume4D, ScalarVolume3D, ShapeMismatchError

ISO_SPACING = 2.0
LOG_EPS = 1e-6


class DegenerateVolumeError(ValueError):
    pass


@dataclass
class EnvVolumes:
    pcmra: ScalarVolume3D
    v_sys: np.ndarray
    venc: float
    sys_index: int = 0
    _padded: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.v_sys = np.asarray(self.v_sys, dtype=np.float64)
        if self.v_sys.shape != (3,) + self.pcmra.dims:
            raise ShapeMismatchError(
                f"v_sys shape {self.v_sys.shape} does not match pcmra dims {self.pcmra.dims}"
            )

    @property
    def spacing(self):
        return self.pcmra.spacing

    @property
    def dims(self):
        return self.pcmra.dims

    def padded_stack(self) -> np.ndarray:
        """``[pcmra, vx, vy, vz]`` zero-padded for the sampler; built once."""
        if self._padded is None:
            self._padded = pad_grid(np.concatenate([self.pcmra.values[None], self.v_sys]))
        return self._padded


def pcmra_basic(vol: FlowVolume4D) -> ScalarVolume3D:
    m2 = vol.magnitude ** 2
    v2 = np.sum(vol.velocity ** 2, axis=1)
    return ScalarVolume3D(np.sqrt(np.mean(m2 * v2, axis=0)), vol.spacing)


def divergence(velocity: np.ndarray, spacing) -> np.ndarray:
    """Divergence of ``[..., 3, Z, Y, X]`` fields; central differences, one-sided at edges."""
    sz, sy, sx = spacing
    vx, vy, vz = velocity[..., 0, :, :, :], velocity[..., 1, :, :, :], velocity[..., 2, :, :, :]
    return (
        np.gradient(vx, sx, axis=-1)
        + np.gradient(vy, sy, axis=-2)
        + np.gradient(vz, sz, axis=-3)
    )


def divergence_mask(vol: FlowVolume4D, eps: float = LOG_EPS) -> ScalarVolume3D:
    """Per-voxel weight near 1 where the divergence is steady in time, near 0 where it fluctuates."""
    if vol.dims[0] < 2:
        raise ValueError("divergence mask needs at least two timeframes")
    spread = np.std(np.abs(divergence(vol.velocity, vol.spacing)), axis=0)
    if not np.any(spread > 0):
        return ScalarVolume3D(np.ones_like(spread), vol.spacing)
    logs = np.log(eps + spread)
    denom = logs.max()
    if denom == 0:
        # log ratio undefined; fall back to the uniform case
        return ScalarVolume3D(np.ones_like(spread), vol.spacing)
    k = np.clip(1.0 - logs / denom, 0.0, 1.0)
    return ScalarVolume3D(k, vol.spacing)


def pcmra_masked(vol: FlowVolume4D, K: ScalarVolume3D) -> ScalarVolume3D:
    if K.dims != vol.spatial_dims:
        raise ShapeMismatchError(f"mask dims {K.dims} != volume dims {vol.spatial_dims}")
    m2 = vol.magnitude ** 2
    v2 = np.sum(vol.velocity ** 2, axis=1) * K.values ** 2
    return ScalarVolume3D(np.sqrt(np.mean(m2 * v2, axis=0)), vol.spacing)


# --------------------------------------------------------------------------
# CLAHE


def _tile_edges(n: int, tiles: int) -> np.ndarray:
    return np.round(np.linspace(0, n, tiles + 1)).astype(int)


def clip_histogram(hist: np.ndarray, clip_count: float) -> np.ndarray:
    """Clip bins at ``clip_count`` and spread the excess uniformly over all bins."""
    hist = hist.astype(np.float64)
    excess = np.maximum(hist - clip_count, 0.0).sum()
    return np.minimum(hist, clip_count) + excess / hist.size


def clahe3d(v: ScalarVolume3D, tiles_per_axis: int = 6, clip: float = 0.01, bins: int = 256,
            return_histograms: bool = False):
    """Contrast-limited adaptive histogram equalisation on a 3D grid.

    Non-overlapping tiles each get a clipped-histogram transfer function; every
    voxel's output is the trilinear blend of the transfer functions of the
    eight nearest tile centres (edge tiles are clamped). Output is rescaled to
    [0, 1].
    """
    data = v.values
    if any(d < tiles_per_axis for d in data.shape):
        raise ValueError(f"volume {data.shape} smaller than tile grid {tiles_per_axis}")
    lo, hi = float(data.min()), float(data.max())
    if hi > lo:
        idx = np.minimum(((data - lo) / (hi - lo) * bins).astype(int), bins - 1)
    else:
        idx = np.zeros(data.shape, dtype=int)

    edges = [_tile_edges(n, tiles_per_axis) for n in data.shape]
    maps = np.empty((tiles_per_axis,) * 3 + (bins,))
    hists = {}
    for a in range(tiles_per_axis):
        for b in range(tiles_per_axis):
            for c in range(tiles_per_axis):
                tile = idx[edges[0][a]:edges[0][a + 1], edges[1][b]:edges[1][b + 1],
                           edges[2][c]:edges[2][c + 1]]
                n = tile.size
                h = clip_histogram(np.bincount(tile.ravel(), minlength=bins), clip * n)
                if return_histograms:
                    hists[(a, b, c)] = (h, n)
                maps[a, b, c] = np.cumsum(h) / n

    # fractional tile coordinate of every voxel along each axis
    coords = []
    for axis, n in enumerate(data.shape):
        centers = (edges[axis][:-1] + edges[axis][1:] - 1) / 2.0
        pos = np.interp(np.arange(n), centers, np.arange(tiles_per_axis))
        i0 = np.minimum(np.floor(pos).astype(int), tiles_per_axis - 2) if tiles_per_axis > 1 else np.zeros(n, int)
        t = pos - i0
        coords.append((i0, t))
    (z0, tz), (y0, ty), (x0, tx) = coords
    Z0 = z0[:, None, None]
    Y0 = y0[None, :, None]
    X0 = x0[None, None, :]
    TZ = tz[:, None, None]
    TY = ty[None, :, None]
    TX = tx[None, None, :]
    out = np.zeros(data.shape)
    step = 1 if tiles_per_axis > 1 else 0
    for dz, wz in ((0, 1 - TZ), (step, TZ)):
        for dy, wy in ((0, 1 - TY), (step, TY)):
            for dx, wx in ((0, 1 - TX), (step, TX)):
                out += maps[Z0 + dz, Y0 + dy, X0 + dx, idx] * (wz * wy * wx)
    lo2, hi2 = out.min(), out.max()
    # a spread at round-off level means a flat mapping, not contrast to stretch
    if hi2 - lo2 > 1e-9 * max(1.0, abs(hi2)):
        out = (out - lo2) / (hi2 - lo2)
    else:
        out = np.zeros_like(out)
    result = ScalarVolume3D(out, v.spacing)
    if return_histograms:
        return result, hists
    return result


# --------------------------------------------------------------------------
# resampling and systole


def iso_dims(dims, spacing, target: float = ISO_SPACING) -> tuple[int, int, int]:
    return tuple(int(round((n - 1) * s / target)) + 1 for n, s in zip(dims, spacing))


def resample_isotropic(vol: FlowVolume4D, target: float = ISO_SPACING) -> FlowVolume4D:
    if all(abs(s - target) < 1e-12 for s in vol.spacing):
        return FlowVolume4D(vol.magnitude.copy(), vol.velocity.copy(), vol.spacing, vol.venc)
    new_dims = iso_dims(vol.spatial_dims, vol.spacing, target)
    pts = grid_points(new_dims, (target,) * 3)
    t = vol.dims[0]
    stack = np.concatenate([vol.magnitude, vol.velocity.reshape((t * 3,) + vol.spatial_dims)])
    out = sample_grid(stack, vol.spacing, pts)
    mag = out[:t]
    vel = out[t:].reshape((t, 3) + new_dims)
    return FlowVolume4D(mag, vel, (target,) * 3, vol.venc)


def extract_systolic(vol: FlowVolume4D, pcmra: ScalarVolume3D, threshold_quantile: float = 0.9):
    """Timeframe of peak mean speed inside the bright-PC-MRA mask, and its velocity field."""
    if pcmra.dims != vol.spatial_dims:
        raise ShapeMismatchError(f"pcmra dims {pcmra.dims} != volume dims {vol.spatial_dims}")
    thr = np.quantile(pcmra.values, threshold_quantile)
    mask = pcmra.values >= thr
    if not mask.any():
        raise DegenerateVolumeError("empty vessel mask")
    speed = np.sqrt(np.sum(vol.velocity ** 2, axis=1))
    mean_speed = speed[:, mask].mean(axis=1)
    sys_index = int(np.argmax(mean_speed))  # first maximum wins ties
    return sys_index, vol.velocity[sys_index].copy()


def build_env(vol: FlowVolume4D, use_clahe: bool = True) -> EnvVolumes:
    """Full pipeline: isotropic resampling, masked PC-MRA, CLAHE, systolic velocities."""
    iso = resample_isotropic(vol)
    if iso.dims[0] >= 2:
        K = divergence_mask(iso)
        raw = pcmra_masked(iso, K)
    else:
        raw = pcmra_basic(iso)
    sys_index, v_sys = extract_systolic(iso, raw)
    if use_clahe:
        pcmra = clahe3d(raw)
    else:
        hi = raw.values.max()
        pcmra = ScalarVolume3D(raw.values / hi if hi > 0 else raw.values, raw.spacing)
    return EnvVolumes(pcmra, v_sys, iso.venc, sys_index)
