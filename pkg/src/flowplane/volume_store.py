"""Volume containers and on-disk formats.

Two binary layouts live here:

* ``F4D1`` / ``S3D1`` volumes: one line of UTF-8 JSON header, a newline, then
  little-endian float32 payload in C order.
* checkpoints: ``A3CK`` magic, a length-prefixed JSON manifest, then one
  length-prefixed float64 blob per named parameter array.
"""
from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

F4D_MAGIC = "F4D1"
S3D_MAGIC = "S3D1"
CKPT_MAGIC = b"A3CK"


class FormatError(ValueError):
    """Malformed or inconsistent volume/checkpoint file."""


class TruncatedFileError(FormatError):
    pass


class NonFiniteError(ValueError):
    pass


class ShapeMismatchError(ValueError):
    pass


def _check_spacing(spacing) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3:
        raise FormatError(f"spacing must have 3 components, got {sp}")
    if not all(s > 0 and math.isfinite(s) for s in sp):
        raise FormatError(f"spacing must be positive and finite, got {sp}")
    return sp


@dataclass
class FlowVolume4D:
    """Time-resolved magnitude and velocity on a regular grid.

    ``magnitude`` is ``[T, Z, Y, X]``; ``velocity`` is ``[T, 3, Z, Y, X]`` with
    components ordered ``(vx, vy, vz)`` in mm/s. ``spacing`` is ``(sz, sy, sx)``
    in mm, matching the array axis order. World coordinates of voxel
    ``(k, j, i)`` are ``(i*sx, j*sy, k*sz)``.
    """

    magnitude: np.ndarray
    velocity: np.ndarray
    spacing: tuple[float, float, float]
    venc: float

    def __post_init__(self):
        self.magnitude = np.asarray(self.magnitude, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        self.spacing = _check_spacing(self.spacing)
        self.venc = float(self.venc)
        if self.magnitude.ndim != 4:
            raise ShapeMismatchError("magnitude must be [T,Z,Y,X]")
        t, z, y, x = self.magnitude.shape
        if self.velocity.shape != (t, 3, z, y, x):
            raise ShapeMismatchError(
                f"velocity shape {self.velocity.shape} != {(t, 3, z, y, x)}"
            )
        if not self.venc > 0:
            raise ValueError("venc must be positive")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(self.magnitude.shape)

    @property
    def spatial_dims(self) -> tuple[int, int, int]:
        return tuple(self.magnitude.shape[1:])

    def clamp_venc(self) -> "FlowVolume4D":
        np.clip(self.velocity, -self.venc, self.venc, out=self.velocity)
        return self


@dataclass
class ScalarVolume3D:
    values: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.spacing = _check_spacing(self.spacing)
        if self.values.ndim != 3:
            raise ShapeMismatchError("scalar volume must be [Z,Y,X]")
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteError("scalar volume contains NaN/Inf")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    step: int = 0
    score: float = math.inf
    config: dict = field(default_factory=dict)

    @property
    def untrained(self) -> bool:
        return self.step == 0 and math.isinf(self.score)


# --------------------------------------------------------------------------
# raw header + payload helpers


def _atomic_write(path, chunks) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            for chunk in chunks:
                fh.write(chunk)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _split_header(blob: bytes, magic: str) -> tuple[dict, bytes]:
    nl = blob.find(b"\n")
    if nl < 0:
        raise FormatError("missing header terminator")
    try:
        header = json.loads(blob[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from None
    if not isinstance(header, dict) or header.get("magic") != magic:
        raise FormatError(f"bad magic, expected {magic!r}")
    return header, blob[nl + 1:]


def _le_f32(a: np.ndarray) -> bytes:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("grid contains NaN/Inf")
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def write_f4d(vol: FlowVolume4D, path) -> None:
    header = {
        "magic": F4D_MAGIC,
        "dims": list(vol.dims),
        "spacing": list(vol.spacing),
        "venc": vol.venc,
    }
    chunks = [json.dumps(header).encode("utf-8") + b"\n", _le_f32(vol.magnitude)]
    chunks += [_le_f32(vol.velocity[:, j]) for j in range(3)]
    _atomic_write(path, chunks)


def read_f4d(path) -> FlowVolume4D:
    header, payload = _split_header(Path(path).read_bytes(), F4D_MAGIC)
    dims = tuple(int(d) for d in header["dims"])
    if len(dims) != 4 or min(dims) < 1:
        raise FormatError(f"bad dims {dims}")
    spacing = _check_spacing(header["spacing"])
    n = int(np.prod(dims))
    expected = 4 * n * 4
    if len(payload) < expected:
        raise TruncatedFileError(f"payload has {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise FormatError(f"payload has {len(payload) - expected} trailing bytes")
    arrays = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape((4,) + dims)
    velocity = np.stack([arrays[1], arrays[2], arrays[3]], axis=1)
    vol = FlowVolume4D(arrays[0].copy(), velocity, spacing, float(header["venc"]))
    return vol.clamp_venc()


def write_s3d(vol: ScalarVolume3D, path) -> None:
    header = {"magic": S3D_MAGIC, "dims": list(vol.dims), "spacing": list(vol.spacing)}
    _atomic_write(path, [json.dumps(header).encode("utf-8") + b"\n", _le_f32(vol.values)])


def read_s3d(path) -> ScalarVolume3D:
    header, payload = _split_header(Path(path).read_bytes(), S3D_MAGIC)
    dims = tuple(int(d) for d in header["dims"])
    expected = 4 * int(np.prod(dims))
    if len(payload) < expected:
        raise TruncatedFileError(f"payload has {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise FormatError("trailing bytes after payload")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(dims)
    return ScalarVolume3D(values, _check_spacing(header["spacing"]))


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    names = sorted(ckpt.params)
    score = ckpt.score
    manifest = {
        "format": 1,
        "step": int(ckpt.step),
        "score": score if math.isfinite(score) else repr(float(score)),
        "config": ckpt.config,
        "arrays": [
            {"name": k, "shape": list(np.shape(ckpt.params[k]))} for k in names
        ],
    }
    meta = json.dumps(manifest, sort_keys=True).encode("utf-8")
    chunks = [CKPT_MAGIC, struct.pack("<Q", len(meta)), meta]
    for k in names:
        a = np.asarray(ckpt.params[k], dtype=np.float64)
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"parameter {k!r} contains NaN/Inf")
        raw = np.ascontiguousarray(a, dtype="<f8").tobytes()
        chunks += [struct.pack("<Q", len(raw)), raw]
    _atomic_write(path, chunks)


def load_checkpoint(path, expected: Mapping[str, np.ndarray] | None = None) -> Checkpoint:
    """Read a checkpoint; if ``expected`` is given, names and shapes must match it."""
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic")
    if len(blob) < 12:
        raise TruncatedFileError("checkpoint header truncated")
    (mlen,) = struct.unpack_from("<Q", blob, 4)
    pos = 12 + mlen
    if len(blob) < pos:
        raise TruncatedFileError("checkpoint manifest truncated")
    manifest = json.loads(blob[12:pos].decode("utf-8"))
    params = {}
    for entry in manifest["arrays"]:
        if len(blob) < pos + 8:
            raise TruncatedFileError(f"missing length prefix for {entry['name']!r}")
        (nbytes,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        shape = tuple(entry["shape"])
        if nbytes != 8 * int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"array {entry['name']!r} length does not match its shape")
        if len(blob) < pos + nbytes:
            raise TruncatedFileError(f"array {entry['name']!r} truncated")
        params[entry["name"]] = (
            np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=pos)
            .astype(np.float64)
            .reshape(shape)
        )
        pos += nbytes
    if pos != len(blob):
        raise FormatError("trailing bytes after last array")
    score = manifest["score"]
    score = float(score)
    ckpt = Checkpoint(params, int(manifest["step"]), score, manifest.get("config", {}))
    if expected is not None:
        check_param_shapes(ckpt.params, expected)
    return ckpt


def check_param_shapes(params: Mapping[str, np.ndarray], expected: Mapping) -> None:
    """``expected`` maps names to arrays or to shape tuples."""
    missing = sorted(set(expected) - set(params))
    if missing:
        raise KeyError(f"checkpoint is missing arrays: {missing}")
    extra = sorted(set(params) - set(expected))
    if extra:
        raise KeyError(f"checkpoint has unknown arrays: {extra}")
    for k, ref in expected.items():
        want = tuple(ref.shape) if hasattr(ref, "shape") else tuple(ref)
        if np.shape(params[k]) != want:
            raise ShapeMismatchError(
                f"array {k!r}: checkpoint shape {np.shape(params[k])} != network shape {want}"
            )
