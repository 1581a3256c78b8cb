"""Plane-navigation episodes: actions, cost, reward, bonus and termination."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import (
    D_MAX,
    OMEGA_MAX,
    STATE_DIMS,
    STATE_SPACING,
    PlaneState,
    RigidMotion,
    StateTensor,
    resample_rigid,
    rotate_in_plane,
    sample_state,
    translate,
    volume_center,
)
from .phantom import GroundTruth
from .preproc import EnvVolumes
from .volume_store import ScalarVolume3D

LAMBDA = 0.025
T_MAX = 100
BONUS = 3.0
ANGLE_TOL = 3.0
DIST_TOL = 2.0
START_BOX = 0.10


@dataclass(frozen=True)
class Action:
    """Rotations ``r1, r2`` (deg) about w1, w2 and translations ``m1, m2, mn`` (mm)."""

    r1: float = 0.0
    r2: float = 0.0
    m1: float = 0.0
    m2: float = 0.0
    mn: float = 0.0
    omega_max: float = OMEGA_MAX
    d_max: float = D_MAX

    def __post_init__(self):
        for name, lim in (("r1", self.omega_max), ("r2", self.omega_max),
                          ("m1", self.d_max), ("m2", self.d_max), ("mn", self.d_max)):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"action component {name} is not finite")
            object.__setattr__(self, name, min(max(v, -lim), lim))

    @classmethod
    def from_unit(cls, a, omega_max: float = OMEGA_MAX, d_max: float = D_MAX) -> "Action":
        """Scale a raw 5-vector in roughly [-1, 1] to degrees and mm, then clamp."""
        a = np.asarray(a, dtype=np.float64)
        return cls(a[0] * omega_max, a[1] * omega_max, a[2] * d_max, a[3] * d_max, a[4] * d_max,
                   omega_max, d_max)

    def as_array(self) -> np.ndarray:
        return np.array([self.r1, self.r2, self.m1, self.m2, self.mn])


@dataclass(frozen=True)
class EpisodeConfig:
    t_max: int = T_MAX
    lam: float = LAMBDA
    bonus: float = BONUS
    angle_tol: float = ANGLE_TOL
    dist_tol: float = DIST_TOL
    mode: str = "train"
    omega_max: float = OMEGA_MAX
    d_max: float = D_MAX
    state_dims: tuple = STATE_DIMS
    state_spacing: float = STATE_SPACING

    def __post_init__(self):
        if self.mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {self.mode!r}")
        for name in ("t_max", "lam", "bonus", "angle_tol", "dist_tol", "omega_max", "d_max", "state_spacing"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        object.__setattr__(self, "state_dims", tuple(int(d) for d in self.state_dims))


@dataclass
class Transition:
    state: StateTensor | None  # None once the episode is done
    action: Action
    reward: float
    done: bool
    step: int


def angle_deg(n, n_t) -> float:
    c = float(np.dot(n, n_t) / (np.linalg.norm(n) * np.linalg.norm(n_t)))
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def cost(s: PlaneState, gt: GroundTruth, lam: float = LAMBDA) -> float:
    n, nt = np.asarray(s.n), np.asarray(gt.n_T)
    ang = 1.0 - float(n @ nt) / (np.linalg.norm(n) * np.linalg.norm(nt))
    return ang + lam * float(np.linalg.norm(np.asarray(s.P) - np.asarray(gt.P_T)))


def eval_start(env: EnvVolumes) -> PlaneState:
    P = volume_center(env.dims, env.spacing)
    return PlaneState(P, np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0]))


def reset(env: EnvVolumes, gt: GroundTruth, mode: str = "train", rng: np.random.Generator | None = None) -> PlaneState:
    """Initial pose: random near the centre (train) or fixed at the centre (eval)."""
    if mode == "eval":
        return eval_start(env)
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    rng = np.random.default_rng() if rng is None else rng
    c = volume_center(env.dims, env.spacing)
    extent = 2.0 * c
    P = c + rng.uniform(-START_BOX, START_BOX, 3) * extent
    R = Rotation.random(random_state=rng).as_matrix()
    return PlaneState(P, R[:, 0].copy(), R[:, 1].copy(), R[:, 2].copy())


def apply_action(s: PlaneState, a: Action) -> PlaneState:
    s = rotate_in_plane(s, "w1", a.r1, omega_max=a.omega_max)
    s = rotate_in_plane(s, "w2", a.r2, omega_max=a.omega_max)
    return translate(s, a.m1, a.m2, a.mn, d_max=a.d_max)


def near_target(s: PlaneState, gt: GroundTruth, cfg: EpisodeConfig) -> bool:
    return (angle_deg(s.n, gt.n_T) < cfg.angle_tol
            and float(np.linalg.norm(np.asarray(s.P) - np.asarray(gt.P_T))) < cfg.dist_tol)


def step(s: PlaneState, a: Action, gt: GroundTruth, cfg: EpisodeConfig, t: int):
    """One transition; returns ``(s', reward, done, info)``."""
    if t >= cfg.t_max:
        raise ValueError(f"step {t} at or beyond t_max={cfg.t_max}")
    s2 = apply_action(s, a)
    c0, c1 = cost(s, gt, cfg.lam), cost(s2, gt, cfg.lam)
    reward = c0 - c1
    bonus = near_target(s2, gt, cfg)
    done = False
    if bonus:
        reward += cfg.bonus
        done = cfg.mode == "train"
    if t + 1 >= cfg.t_max:
        done = True
    return s2, reward, done, {"cost": c1, "bonus": bonus}


class PlaneEnv:
    """Single-worker episode driver holding the current pose and step count."""

    def __init__(self, env: EnvVolumes, gt: GroundTruth, cfg: EpisodeConfig | None = None, record: bool = False):
        self.env = env
        self.gt = gt
        self.cfg = cfg or EpisodeConfig()
        self.record = record
        self.pose: PlaneState | None = None
        self.t = 0
        self.trace: list[dict] = []

    def observe(self) -> StateTensor:
        return sample_state(self.env, self.pose, self.cfg.state_dims, self.cfg.state_spacing)

    def reset(self, rng: np.random.Generator | None = None, pose: PlaneState | None = None) -> StateTensor:
        self.pose = pose if pose is not None else reset(self.env, self.gt, self.cfg.mode, rng)
        self.t = 0
        self.trace = []
        if self.record:
            self.trace.append(self._row(None, 0.0))
        return self.observe()

    def step(self, a: Action) -> Transition:
        self.pose, reward, done, info = step(self.pose, a, self.gt, self.cfg, self.t)
        self.t += 1
        if self.record:
            self.trace.append(self._row(a, reward))
        return Transition(None if done else self.observe(), a, reward, done, self.t)

    def cost(self) -> float:
        return cost(self.pose, self.gt, self.cfg.lam)

    def _row(self, a: Action | None, reward: float) -> dict:
        s = self.pose
        return {
            "step": self.t,
            "P": [float(v) for v in s.P],
            "n": [float(v) for v in s.n],
            "w1": [float(v) for v in s.w1],
            "action": None if a is None else [float(v) for v in a.as_array()],
            "reward": float(reward),
            "cost": self.cost(),
        }

    def export_trace(self, path) -> None:
        write_trace(self.trace, path)


def write_trace(rows, path) -> None:
    with Path(path).open("w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def transform_env(env: EnvVolumes, motion: RigidMotion) -> EnvVolumes:
    """Environment volumes rigidly moved by ``motion`` (vectors rotated too)."""
    pc = resample_rigid(env.pcmra.values, env.spacing, motion)
    v = resample_rigid(env.v_sys, env.spacing, motion, vector_axis=0)
    return EnvVolumes(ScalarVolume3D(np.clip(pc, 0.0, 1.0), env.spacing), v, env.venc, env.sys_index)
