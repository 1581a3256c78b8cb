"""Plane poses, rigid motions and oblique sub-volume sampling.

World coordinates are ``(x, y, z)`` in mm with the origin at the centre of
voxel ``(0, 0, 0)``; arrays are indexed ``[..., z, y, x]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .volume_store import ScalarVolume3D

if TYPE_CHECKING:  # pragma: no cover
    from .preproc import EnvVolumes

OMEGA_MAX = 5.0
D_MAX = 5.0
STATE_DIMS = (31, 84, 84)
STATE_SPACING = 2.0
MARKER_VALUE = 1.0
ORTHO_TOL = 1e-9


class ActionBoundsError(ValueError):
    pass


# --------------------------------------------------------------------------
# trilinear interpolation


def pad_grid(values: np.ndarray) -> np.ndarray:
    """Zero-pad the three trailing (spatial) axes by one voxel."""
    pad = [(0, 0)] * (values.ndim - 3) + [(1, 1)] * 3
    return np.pad(values, pad)


def sample_padded(padded: np.ndarray, spacing, points: np.ndarray) -> np.ndarray:
    """Trilinear samples of a grid already padded with :func:`pad_grid`.

    ``padded`` is ``[C, Z+2, Y+2, X+2]``; ``points`` is ``[..., 3]`` world mm.
    Returns ``[C, ...]``. The grid is treated as surrounded by zeros.
    """
    sz, sy, sx = spacing
    pts = np.asarray(points, dtype=np.float64)
    lead = pts.shape[:-1]
    pts = pts.reshape(-1, 3)
    c = padded.shape[0]
    nz, ny, nx = padded.shape[1:]
    # +1 for the pad layer
    fx = pts[:, 0] / sx + 1.0
    fy = pts[:, 1] / sy + 1.0
    fz = pts[:, 2] / sz + 1.0
    x0 = np.floor(fx)
    y0 = np.floor(fy)
    z0 = np.floor(fz)
    inside = (
        (x0 >= 0) & (x0 <= nx - 2) & (y0 >= 0) & (y0 <= ny - 2) & (z0 >= 0) & (z0 <= nz - 2)
    )
    tx = fx - x0
    ty = fy - y0
    tz = fz - z0
    xi = np.clip(x0, 0, nx - 2).astype(np.intp)
    yi = np.clip(y0, 0, ny - 2).astype(np.intp)
    zi = np.clip(z0, 0, nz - 2).astype(np.intp)
    flat = padded.reshape(c, -1)
    sy_, sz_ = nx, nx * ny
    base = zi * sz_ + yi * sy_ + xi
    out = np.zeros((c, pts.shape[0]))
    tx *= inside  # zero weights outside the grid
    ux = inside - tx
    for dz, wz in ((0, 1.0 - tz), (1, tz)):
        for dy, wy in ((0, 1.0 - ty), (1, ty)):
            wzy = wz * wy
            row = base + (dz * sz_ + dy * sy_)
            out += np.take(flat, row, axis=1) * (wzy * ux)
            out += np.take(flat, row + 1, axis=1) * (wzy * tx)
    return out.reshape((c,) + lead)


def sample_grid(values: np.ndarray, spacing, points: np.ndarray) -> np.ndarray:
    """Trilinear samples of ``values`` (``[Z,Y,X]`` or ``[C,Z,Y,X]``) at world points."""
    squeeze = values.ndim == 3
    v = values[None] if squeeze else values
    out = sample_padded(pad_grid(v), spacing, points)
    return out[0] if squeeze else out


def trilinear(volume: ScalarVolume3D, p) -> float:
    """Interpolated value at world point ``p`` (mm); zero outside the grid."""
    return float(sample_grid(volume.values, volume.spacing, np.asarray(p, float)[None])[0])


def grid_points(dims, spacing) -> np.ndarray:
    """World coordinates ``[Z, Y, X, 3]`` of every voxel centre."""
    z, y, x = dims
    sz, sy, sx = spacing
    zz, yy, xx = np.meshgrid(
        np.arange(z) * sz, np.arange(y) * sy, np.arange(x) * sx, indexing="ij"
    )
    return np.stack([xx, yy, zz], axis=-1)


def volume_center(dims, spacing) -> np.ndarray:
    z, y, x = dims
    sz, sy, sx = spacing
    return np.array([(x - 1) * sx / 2, (y - 1) * sy / 2, (z - 1) * sz / 2])


# --------------------------------------------------------------------------
# plane state


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if not norm > 1e-12:
        raise ValueError(f"degenerate vector {v}")
    return v / norm


@dataclass(frozen=True)
class PlaneState:
    """Point ``P`` (mm) with a right-handed orthonormal frame ``w2 = n x w1``."""

    P: np.ndarray
    n: np.ndarray
    w1: np.ndarray
    w2: np.ndarray

    @classmethod
    def from_vectors(cls, P, n, w1_hint=None) -> "PlaneState":
        n = _unit(n)
        if w1_hint is None:
            w1_hint = np.array([0.0, 1.0, 0.0])
            if abs(n @ w1_hint) > 0.9:
                w1_hint = np.array([0.0, 0.0, 1.0])
        w1 = np.asarray(w1_hint, float) - (np.asarray(w1_hint, float) @ n) * n
        w1 = _unit(w1)
        return cls(np.asarray(P, float).copy(), n, w1, np.cross(n, w1))

    @property
    def basis(self) -> np.ndarray:
        return np.stack([self.n, self.w1, self.w2])

    def drift(self) -> float:
        b = self.basis
        return float(np.abs(b @ b.T - np.eye(3)).max())

    def orthonormalized(self) -> "PlaneState":
        return PlaneState.from_vectors(self.P, self.n, self.w1)

    def transformed(self, motion: "RigidMotion") -> "PlaneState":
        return PlaneState(
            motion.apply_point(self.P),
            motion.R @ self.n,
            motion.R @ self.w1,
            motion.R @ self.w2,
        )


def rodrigues(v: np.ndarray, k: np.ndarray, theta_rad: float) -> np.ndarray:
    c, s = np.cos(theta_rad), np.sin(theta_rad)
    return v * c + np.cross(k, v) * s + k * (k @ v) * (1.0 - c)


def rotation_matrix(axis, theta_deg: float) -> np.ndarray:
    k = _unit(axis)
    return np.stack([rodrigues(e, k, np.radians(theta_deg)) for e in np.eye(3)], axis=1)


def rotate_in_plane(s: PlaneState, axis: str, theta: float, omega_max: float | None = OMEGA_MAX) -> PlaneState:
    """Rotate the two non-axis frame vectors about ``w1`` or ``w2`` by ``theta`` degrees."""
    if omega_max is not None and abs(theta) > omega_max + 1e-12:
        raise ActionBoundsError(f"|theta|={abs(theta)} exceeds {omega_max}")
    t = np.radians(theta)
    if axis == "w1":
        n, w1 = rodrigues(s.n, s.w1, t), s.w1
    elif axis == "w2":
        n, w1 = rodrigues(s.n, s.w2, t), rodrigues(s.w1, s.w2, t)
    else:
        raise ValueError(f"axis must be 'w1' or 'w2', got {axis!r}")
    return PlaneState.from_vectors(s.P, n, w1)


def translate(s: PlaneState, d1: float, d2: float, dn: float, d_max: float | None = D_MAX) -> PlaneState:
    if d_max is not None and max(abs(d1), abs(d2), abs(dn)) > d_max + 1e-12:
        raise ActionBoundsError(f"translation {(d1, d2, dn)} exceeds {d_max}")
    return PlaneState(s.P + d1 * s.w1 + d2 * s.w2 + dn * s.n, s.n, s.w1, s.w2)


# --------------------------------------------------------------------------
# rigid motions


@dataclass(frozen=True)
class RigidMotion:
    """``x -> R (x - center) + center + t``."""

    R: np.ndarray
    t: np.ndarray
    center: np.ndarray

    @classmethod
    def from_euler(cls, angles_deg, translation, center) -> "RigidMotion":
        from scipy.spatial.transform import Rotation

        R = Rotation.from_euler("xyz", angles_deg, degrees=True).as_matrix()
        return cls(R, np.asarray(translation, float), np.asarray(center, float))

    def apply_point(self, p) -> np.ndarray:
        p = np.asarray(p, float)
        return (p - self.center) @ self.R.T + self.center + self.t

    def apply_vector(self, v) -> np.ndarray:
        return np.asarray(v, float) @ self.R.T

    def inverse(self) -> "RigidMotion":
        Rt = self.R.T
        return RigidMotion(Rt, -(Rt @ self.t), self.center.copy())


def resample_rigid(values: np.ndarray, spacing, motion: RigidMotion, vector_axis: int | None = None) -> np.ndarray:
    """Content of ``values`` moved by ``motion`` onto the same grid (zero fill).

    ``values`` is ``[..., Z, Y, X]``. If ``vector_axis`` names a leading axis of
    length 3 holding ``(vx, vy, vz)``, those vectors are rotated as well.
    """
    dims = values.shape[-3:]
    q = grid_points(dims, spacing)
    src = motion.inverse().apply_point(q)
    lead = values.shape[:-3]
    flat = values.reshape((-1,) + dims)
    out = sample_padded(pad_grid(flat), spacing, src).reshape(lead + dims)
    if vector_axis is not None:
        out = np.moveaxis(out, vector_axis, -1)
        out = out @ motion.R.T
        out = np.moveaxis(out, -1, vector_axis)
    return np.ascontiguousarray(out)


# --------------------------------------------------------------------------
# state tensor


@dataclass
class StateTensor:
    values: np.ndarray
    pose: PlaneState


def state_offsets(dims=STATE_DIMS, spacing: float = STATE_SPACING):
    """Per-axis offsets (mm) of the sub-volume sample points from the centre."""
    return tuple((np.arange(d) - (d - 1) / 2.0) * spacing for d in dims)


def state_points(s: PlaneState, dims=STATE_DIMS, spacing: float = STATE_SPACING) -> np.ndarray:
    od, oh, ow = state_offsets(dims, spacing)
    return (
        s.P
        + od[:, None, None, None] * s.n
        + oh[None, :, None, None] * s.w1
        + ow[None, None, :, None] * s.w2
    )


def marker_indices(size: int) -> list[int]:
    """Rows/columns crossed by the centre line (two of them for even sizes)."""
    c = (size - 1) / 2.0
    return sorted({int(np.floor(c)), int(np.ceil(c))})


def sample_state(env: "EnvVolumes", s: PlaneState, dims=STATE_DIMS, spacing: float = STATE_SPACING) -> StateTensor:
    """Two-channel oblique sub-volume centred on ``s.P`` with axes ``(n, w1, w2)``.

    Channel 0 holds PC-MRA; channel 1 holds ``|n . V_sys| / venc`` clipped to
    [0, 1]. The centre row and column of every channel-0 slice are overwritten
    with :data:`MARKER_VALUE` so that in-plane orientation is visible.
    """
    pts = state_points(s, dims, spacing)
    samples = sample_padded(env.padded_stack(), env.spacing, pts)
    out = np.empty((2,) + tuple(dims))
    out[0] = samples[0]
    vn = samples[1] * s.n[0] + samples[2] * s.n[1] + samples[3] * s.n[2]
    np.clip(np.abs(vn) / env.venc, 0.0, 1.0, out=out[1])
    rows = marker_indices(dims[1])
    cols = marker_indices(dims[2])
    out[0][:, rows, :] = MARKER_VALUE
    out[0][:, :, cols] = MARKER_VALUE
    return StateTensor(out, s)


def plane_image(env: "EnvVolumes", s: PlaneState, size: int = 48, spacing: float = STATE_SPACING):
    """In-plane PC-MRA and through-plane velocity images ``[size, size]`` (rows along w1)."""
    pts = state_points(s, (1, size, size), spacing)[0]
    samples = sample_padded(env.padded_stack(), env.spacing, pts)
    vn = samples[1] * s.n[0] + samples[2] * s.n[1] + samples[3] * s.n[2]
    return samples[0], vn
