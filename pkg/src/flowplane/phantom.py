"""Synthetic 4D-flow phantoms with analytically known target planes and flow.

A phantom is a single vessel (straight segment or torus arc) carrying
Poiseuille flow, fed at its upstream end by a spherical inlet chamber. The
chamber makes the flow direction, and therefore the sign of the target normal,
visible in the images; without it both normals of a symmetric segment would
look identical.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import RigidMotion, grid_points, resample_rigid, volume_center
from .volume_store import FlowVolume4D

MM3S_TO_LMIN = 6e-5


class PhantomGeometryError(ValueError):
    pass


def default_waveform(T: int, baseline: float = 0.2) -> list[float]:
    """Raised-cosine cardiac-like waveform peaking at ``tau = T/3``, max sample 1."""
    tau = np.arange(T, dtype=float)
    w = baseline + (1 - baseline) * 0.5 * (1 + np.cos(2 * np.pi * (tau - T / 3.0) / T))
    return list(w / w.max())


@dataclass
class PhantomSpec:
    kind: str = "straight_tube"
    radius: float = 8.0
    v_max: float = 1000.0
    venc: float = 1500.0
    noise: float = 30.0
    dims: tuple = (9, 64, 64, 64)
    spacing: tuple = (2.0, 2.0, 2.0)
    waveform: list | None = None
    # straight tube: centreline from origin along direction
    origin: tuple = (33.0, 63.0, 63.0)
    direction: tuple = (1.0, 0.0, 0.0)
    length: float = 60.0
    # torus arc: centre, axis normal to the arc plane, direction of the arc start
    torus_center: tuple = (63.0, 33.0, 63.0)
    torus_axis: tuple = (0.0, 0.0, 1.0)
    torus_start: tuple = (0.0, -1.0, 0.0)
    major_radius: float = 30.0
    arc_span: float = 120.0
    # inlet chamber radius as a multiple of the vessel radius; 0 disables it
    inlet_scale: float = 1.5
    inlet_speed: float = 0.25

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.waveform is None:
            self.waveform = default_waveform(self.dims[0])
        self.waveform = [float(w) for w in self.waveform]
        if self.kind not in ("straight_tube", "torus_arc"):
            raise ValueError(f"unknown phantom kind {self.kind!r}")
        if not self.radius > 0 or not self.v_max > 0:
            raise ValueError("radius and v_max must be positive")
        if len(self.waveform) != self.dims[0]:
            raise ValueError("waveform needs one sample per timeframe")
        if max(self.waveform) <= 0:
            raise ValueError("waveform must have a positive maximum")

    def to_json(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


@dataclass
class GroundTruth:
    P_T: np.ndarray
    n_T: np.ndarray
    flow: np.ndarray  # L/min per timeframe
    extra: dict = field(default_factory=dict)

    def transformed(self, motion: RigidMotion) -> "GroundTruth":
        return GroundTruth(motion.apply_point(self.P_T), motion.R @ self.n_T, self.flow.copy(), dict(self.extra))

    def to_json(self) -> dict:
        return {
            "P_T": [float(v) for v in self.P_T],
            "n_T": [float(v) for v in self.n_T],
            "flow_l_min": [float(v) for v in self.flow],
            **self.extra,
        }

    @classmethod
    def from_json(cls, d: dict) -> "GroundTruth":
        extra = {k: v for k, v in d.items() if k not in ("P_T", "n_T", "flow_l_min")}
        return cls(np.array(d["P_T"], float), np.array(d["n_T"], float), np.array(d["flow_l_min"], float), extra)


def _unit(v) -> np.ndarray:
    v = np.asarray(v, float)
    n = np.linalg.norm(v)
    if not n > 1e-9:
        raise PhantomGeometryError(f"degenerate direction vector {tuple(v)}")
    return v / n


class _Centerline:
    """Distance-to-centreline and local tangent for the vessel."""

    def __init__(self, spec: PhantomSpec):
        self.spec = spec
        if spec.kind == "straight_tube":
            self.d = _unit(spec.direction)
            self.o = np.asarray(spec.origin, float)
        else:
            self.a = _unit(spec.torus_axis)
            e1 = np.asarray(spec.torus_start, float)
            e1 = e1 - (e1 @ self.a) * self.a
            self.e1 = _unit(e1)
            self.e2 = np.cross(self.a, self.e1)
            self.c = np.asarray(spec.torus_center, float)
            self.span = np.radians(spec.arc_span)
            if not 0 < self.span < 2 * np.pi:
                raise PhantomGeometryError("arc span must be in (0, 360) degrees")

    def point(self, u: float) -> np.ndarray:
        """Centreline point at fraction ``u`` in [0, 1]."""
        s = self.spec
        if s.kind == "straight_tube":
            return self.o + u * s.length * self.d
        phi = u * self.span
        return self.c + s.major_radius * (np.cos(phi) * self.e1 + np.sin(phi) * self.e2)

    def tangent(self, u: float) -> np.ndarray:
        if self.spec.kind == "straight_tube":
            return self.d.copy()
        phi = u * self.span
        return -np.sin(phi) * self.e1 + np.cos(phi) * self.e2

    def query(self, pts: np.ndarray):
        """Return (radial distance, tangent[...,3], inside-extent mask)."""
        s = self.spec
        if s.kind == "straight_tube":
            rel = pts - self.o
            t = rel @ self.d
            r = np.linalg.norm(rel - t[..., None] * self.d, axis=-1)
            within = (t >= 0) & (t <= s.length)
            tang = np.broadcast_to(self.d, pts.shape)
            return r, tang, within
        rel = pts - self.c
        h = rel @ self.a
        planar = rel - h[..., None] * self.a
        x1 = planar @ self.e1
        x2 = planar @ self.e2
        phi = np.mod(np.arctan2(x2, x1), 2 * np.pi)
        rho = np.hypot(x1, x2)
        r = np.sqrt((rho - s.major_radius) ** 2 + h ** 2)
        within = phi <= self.span
        tang = -np.sin(phi)[..., None] * self.e1 + np.cos(phi)[..., None] * self.e2
        return r, tang, within

    def check_fits(self, extent: np.ndarray, margin: float):
        s = self.spec
        pts = [self.point(u) for u in np.linspace(0, 1, 65)]
        reach = [s.radius] * len(pts)
        if s.inlet_scale > 0:
            rc = s.inlet_scale * s.radius
            pts.append(self.inlet_center())
            reach.append(rc)
        for p, rr in zip(pts, reach):
            if np.any(p - rr < margin) or np.any(p + rr > extent - margin):
                raise PhantomGeometryError(
                    f"vessel exits the volume near {np.round(p, 1)} (margin {margin} mm)"
                )

    def inlet_center(self) -> np.ndarray:
        s = self.spec
        return self.point(0.0) - 0.5 * s.inlet_scale * s.radius * self.tangent(0.0)


def analytic_flow(spec: PhantomSpec) -> np.ndarray:
    """Poiseuille volume flow per timeframe in L/min: ``w * v_max * pi R^2 / 2``."""
    w = np.asarray(spec.waveform, float)
    return w * spec.v_max * np.pi * spec.radius ** 2 / 2.0 * MM3S_TO_LMIN


def make_phantom(spec: PhantomSpec, seed: int = 0) -> tuple[FlowVolume4D, GroundTruth]:
    T, Z, Y, X = spec.dims
    sz, sy, sx = spec.spacing
    extent = np.array([(X - 1) * sx, (Y - 1) * sy, (Z - 1) * sz])
    line = _Centerline(spec)
    line.check_fits(extent, margin=2 * max(spec.spacing))

    pts = grid_points((Z, Y, X), (sz, sy, sx))
    r, tang, within = line.query(pts)
    vessel = within & (r < spec.radius)
    profile = np.where(vessel, 1.0 - (r / spec.radius) ** 2, 0.0)
    field3 = profile[..., None] * tang  # [Z,Y,X,3] at unit waveform

    tissue = vessel.copy()
    if spec.inlet_scale > 0:
        rc = spec.inlet_scale * spec.radius
        chamber = (np.linalg.norm(pts - line.inlet_center(), axis=-1) < rc) & ~vessel
        field3 = field3 + np.where(chamber[..., None], spec.inlet_speed * line.tangent(0.0), 0.0)
        tissue |= chamber

    field3 = np.moveaxis(field3, -1, 0) * spec.v_max  # [3,Z,Y,X]
    w = np.asarray(spec.waveform, float)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, spec.noise, size=(T, 3, Z, Y, X)) if spec.noise > 0 else np.zeros((T, 3, Z, Y, X))
    velocity = np.where(tissue, w[:, None, None, None, None] * field3, noise)
    magnitude = np.broadcast_to(np.where(tissue, 1.0, 0.1), (T, Z, Y, X)).copy()
    vol = FlowVolume4D(magnitude, velocity, spec.spacing, spec.venc).clamp_venc()

    gt = GroundTruth(
        P_T=line.point(0.5),
        n_T=line.tangent(0.5),
        flow=analytic_flow(spec),
        extra={"kind": spec.kind, "radius": spec.radius, "v_max": spec.v_max},
    )
    return vol, gt


def pose_motion(vol: FlowVolume4D, rotation_deg, translation_mm) -> RigidMotion:
    """Rigid motion about the volume centre: Euler angles (xyz, degrees) then shift."""
    rot = np.asarray(rotation_deg, float)
    tr = np.asarray(translation_mm, float)
    if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(tr))):
        raise ValueError("rotation and translation must be finite")
    return RigidMotion.from_euler(rot, tr, volume_center(vol.spatial_dims, vol.spacing))


def perturb_pose(vol: FlowVolume4D, rotation_deg, translation_mm) -> FlowVolume4D:
    motion = pose_motion(vol, rotation_deg, translation_mm)
    mag = resample_rigid(vol.magnitude, vol.spacing, motion)
    vel = resample_rigid(vol.velocity, vol.spacing, motion, vector_axis=1)
    return FlowVolume4D(mag, vel, vol.spacing, vol.venc)


def perturb_ground_truth(gt: GroundTruth, vol: FlowVolume4D, rotation_deg, translation_mm) -> GroundTruth:
    return gt.transformed(pose_motion(vol, rotation_deg, translation_mm))


# --------------------------------------------------------------------------
# phantom families


def random_unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def random_spec(rng: np.random.Generator, kind: str | None = None, dims=(9, 64, 64, 64),
                spacing=(2.0, 2.0, 2.0), target_jitter: float = 8.0) -> PhantomSpec:
    """Random vessel whose target point lies within ``target_jitter`` mm of the centre."""
    if kind is None:
        kind = "straight_tube" if rng.random() < 0.5 else "torus_arc"
    center = volume_center(dims[1:], spacing)
    for _ in range(200):
        target = center + rng.uniform(-target_jitter, target_jitter, size=3)
        radius = rng.uniform(6.0, 9.0)
        v_max = rng.uniform(700.0, 1200.0)
        tangent = random_unit(rng)
        if kind == "straight_tube":
            length = rng.uniform(44.0, 56.0)
            spec = PhantomSpec(kind=kind, radius=radius, v_max=v_max, dims=dims, spacing=spacing,
                               origin=tuple(target - 0.5 * length * tangent),
                               direction=tuple(tangent), length=length)
        else:
            major = rng.uniform(28.0, 40.0)
            span = rng.uniform(80.0, 120.0)
            # arc plane spanned by tangent and an in-plane radial direction
            radial = random_unit(rng)
            radial = radial - (radial @ tangent) * tangent
            radial /= np.linalg.norm(radial)
            axis = np.cross(radial, tangent)
            c = target - major * radial
            half = np.radians(span / 2)
            start = np.cos(-half) * radial + np.sin(-half) * np.cross(axis, radial)
            spec = PhantomSpec(kind=kind, radius=radius, v_max=v_max, dims=dims, spacing=spacing,
                               torus_center=tuple(c), torus_axis=tuple(axis),
                               torus_start=tuple(start), major_radius=major, arc_span=span)
        try:
            _Centerline(spec).check_fits(
                np.array([(dims[3] - 1) * spacing[2], (dims[2] - 1) * spacing[1], (dims[1] - 1) * spacing[0]]),
                margin=2 * max(spacing),
            )
        except PhantomGeometryError:
            continue
        return spec
    raise PhantomGeometryError("could not place a random vessel inside the volume")
