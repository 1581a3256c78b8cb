"""Reformatting metrics, deterministic evaluation, invariance grid, segmentation and flow."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, stats

from . import autograd as ag
from . import policy_net as pn
from .environment import EpisodeConfig, PlaneEnv
from .geometry import STATE_SPACING, PlaneState, plane_image
from .phantom import GroundTruth, perturb_ground_truth, perturb_pose
from .preproc import EnvVolumes, build_env
from .volume_store import Checkpoint, FlowVolume4D, load_checkpoint

MM3S_TO_LMIN = 6e-5
DISK_RADIUS_PX = 3
CLIMB_MOVES = 20
CV_ITERATIONS = 200
CV_SMOOTHNESS = 0.2
# outside-region weight: vessel edges fade to background intensity at the wall
CV_LAMBDA_IN = 1.0
CV_LAMBDA_OUT = 100.0
GRID_ANGLES = tuple(range(-15, 16, 5))
GRID_OFFSETS = tuple(range(-15, 16, 5))


@dataclass(frozen=True)
class PlaneMetrics:
    angle_deg: float
    distance_mm: float


def plane_metrics(s, gt) -> PlaneMetrics:
    """Angle between signed normals and distance between centre points."""
    n = np.asarray(s.n, float) / np.linalg.norm(s.n)
    nt = np.asarray(gt.n_T if hasattr(gt, "n_T") else gt.n, float)
    nt = nt / np.linalg.norm(nt)
    pt = np.asarray(gt.P_T if hasattr(gt, "P_T") else gt.P, float)
    ang = math.degrees(math.acos(min(1.0, max(-1.0, float(n @ nt)))))
    return PlaneMetrics(ang, float(np.linalg.norm(np.asarray(s.P, float) - pt)))


# --------------------------------------------------------------------------
# models and deterministic episodes


@dataclass
class Model:
    params: dict
    net: pn.NetworkConfig
    episode: EpisodeConfig = field(default_factory=lambda: EpisodeConfig(mode="eval"))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint | str | Path) -> "Model":
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        cfg = ckpt.config or {}
        net = pn.NetworkConfig.from_json(cfg["network"]) if "network" in cfg else pn.NetworkConfig()
        tr = cfg.get("train", {})
        ep = EpisodeConfig(
            t_max=int(tr.get("t_max", 100)), lam=float(tr.get("lam", 0.025)), mode="eval",
            omega_max=float(tr.get("omega_max", 5.0)), d_max=float(tr.get("d_max", 5.0)),
            state_dims=tuple(net.state_dims), state_spacing=float(tr.get("state_spacing", STATE_SPACING)),
        )
        from .volume_store import check_param_shapes

        check_param_shapes(ckpt.params, pn.param_shapes(net))
        return cls(dict(ckpt.params), net, ep)

    @classmethod
    def zeros(cls, net: pn.NetworkConfig | None = None, episode: EpisodeConfig | None = None) -> "Model":
        net = net or pn.NetworkConfig()
        params = {k: np.zeros(s) for k, s in pn.param_shapes(net).items()}
        return cls(params, net, episode or EpisodeConfig(mode="eval", state_dims=net.state_dims))


def greedy_episode(params, cfg: pn.NetworkConfig, ep: EpisodeConfig, env, gt, pose=None, record: bool = False):
    """Deterministic mean-action episode of exactly ``ep.t_max`` steps; returns the driver."""
    if ep.mode != "eval":
        raise ValueError("greedy episodes run in eval mode")
    penv = PlaneEnv(env, gt, ep, record=record)
    x = penv.reset(pose=pose)
    h = pn.zero_state(cfg)
    with ag.no_grad():
        for _ in range(ep.t_max):
            out, h = pn.forward(params, x.values, h, cfg)
            tr = penv.step(pn.mean_action(out, ep.omega_max, ep.d_max))
            if tr.done:
                break
            x = tr.state
    return penv


def run_eval_episode(model: Model, env: EnvVolumes, gt: GroundTruth, cfg: EpisodeConfig | None = None,
                     record: bool = False):
    """Returns ``(final PlaneState, PlaneMetrics, trace rows)``."""
    ep = cfg or model.episode
    penv = greedy_episode(model.params, model.net, ep, env, gt, record=record)
    return penv.pose, plane_metrics(penv.pose, gt), penv.trace


def validation_score(params, cfg: pn.NetworkConfig, ep: EpisodeConfig, cases) -> float:
    """Mean final cost over ``(env, gt)`` validation cases."""
    return float(np.mean([greedy_episode(params, cfg, ep, env, gt).cost() for env, gt in cases]))


# --------------------------------------------------------------------------
# invariance experiment


def invariance_grid(model: Model, vol: FlowVolume4D, gt: GroundTruth, angles=GRID_ANGLES,
                    offsets=GRID_OFFSETS, use_clahe: bool = True):
    """Evaluate on every rigid perturbation ``(a, a, a)`` deg x ``(d, d, d)`` mm of the volume.

    Returns ``(rows, summary)``; the summary holds means, standard deviations
    and the unperturbed baseline.
    """
    rows = []
    base = None
    for a in angles:
        for d in offsets:
            rot, tr = (float(a),) * 3, (float(d),) * 3
            if a == 0 and d == 0:
                v2, g2 = vol, gt
            else:
                v2, g2 = perturb_pose(vol, rot, tr), perturb_ground_truth(gt, vol, rot, tr)
            _, m, _ = run_eval_episode(model, build_env(v2, use_clahe), g2)
            row = {"angle": float(a), "offset": float(d), "angle_error": m.angle_deg,
                   "distance_error": m.distance_mm}
            rows.append(row)
            if a == 0 and d == 0:
                base = row
    if base is None:
        _, m, _ = run_eval_episode(model, build_env(vol, use_clahe), gt)
        base = {"angle": 0.0, "offset": 0.0, "angle_error": m.angle_deg, "distance_error": m.distance_mm}
    ang = np.array([r["angle_error"] for r in rows])
    dist = np.array([r["distance_error"] for r in rows])
    summary = {
        "cells": len(rows),
        "angle_mean": float(ang.mean()), "angle_std": float(ang.std()),
        "distance_mean": float(dist.mean()), "distance_std": float(dist.std()),
        "baseline_angle": base["angle_error"], "baseline_distance": base["distance_error"],
    }
    return rows, summary


# --------------------------------------------------------------------------
# segmentation and flow


@dataclass
class Segmentation:
    mask: np.ndarray
    center: tuple
    fallback: bool
    pcmra: np.ndarray
    vn: np.ndarray
    spacing: float


def disk_mask(shape, center, radius: float) -> np.ndarray:
    rr, cc = np.indices(shape)
    return (rr - center[0]) ** 2 + (cc - center[1]) ** 2 <= radius ** 2


def _climb(vn: np.ndarray, start, radius: float, moves: int) -> tuple:
    """Greedy 8-neighbour ascent of |flow through a disk|."""
    def score(c):
        return abs(float(vn[disk_mask(vn.shape, c, radius)].sum()))

    cur = tuple(start)
    best = score(cur)
    for _ in range(moves):
        cand = None
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if dr == 0 and dc == 0:
                    continue
                c = (cur[0] + dr, cur[1] + dc)
                if not (0 <= c[0] < vn.shape[0] and 0 <= c[1] < vn.shape[1]):
                    continue
                sc = score(c)
                if sc > best:
                    best, cand = sc, c
        if cand is None:
            break
        cur = cand
    return cur


def segment_vessel(env: EnvVolumes, plane: PlaneState, P_100=None, size: int = 48,
                   spacing: float = STATE_SPACING, iterations: int = CV_ITERATIONS,
                   smoothness: float = CV_SMOOTHNESS) -> Segmentation:
    """Disk seed, flow hill-climb, then a two-phase active contour on the in-plane PC-MRA."""
    from skimage.measure import label
    from skimage.segmentation import chan_vese

    pc, vn = plane_image(env, plane, size, spacing)
    mid = (size - 1) / 2.0
    if P_100 is None:
        start = (int(round(mid)), int(round(mid)))
    else:
        d = np.asarray(P_100, float) - plane.P
        start = (int(round(mid + d @ plane.w1 / spacing)), int(round(mid + d @ plane.w2 / spacing)))
    center = _climb(vn, start, DISK_RADIUS_PX, CLIMB_MOVES)
    seed = disk_mask(pc.shape, center, DISK_RADIUS_PX)
    fallback = False
    mask = seed
    lo, hi = float(pc.min()), float(pc.max())
    if hi - lo <= 1e-12:
        fallback = True
    else:
        img = (pc - lo) / (hi - lo)
        rr, cc = np.indices(pc.shape)
        phi0 = DISK_RADIUS_PX - np.sqrt((rr - center[0]) ** 2 + (cc - center[1]) ** 2)
        seg = chan_vese(img, mu=smoothness, lambda1=CV_LAMBDA_IN, lambda2=CV_LAMBDA_OUT, max_num_iter=iterations,
                        init_level_set=phi0)
        if seg.any() and (~seg).any() and img[seg].mean() < img[~seg].mean():
            seg = ~seg
        lab = label(seg, connectivity=1)
        if lab[center] == 0:
            fallback = True
        else:
            mask = lab == lab[center]
            if mask.all():
                fallback, mask = True, seed
    return Segmentation(mask, center, fallback, pc, vn, spacing)


def compute_flow(mask: np.ndarray, vn: np.ndarray, spacing: float = STATE_SPACING) -> float:
    """Signed through-plane flow in L/min over ``mask`` from velocities in mm/s."""
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise ValueError("empty mask")
    return float(np.sum(np.asarray(vn)[mask]) * spacing ** 2 * MM3S_TO_LMIN)


def plane_flow(env: EnvVolumes, plane: PlaneState, size: int = 48, spacing: float = STATE_SPACING):
    """Segment the vessel on ``plane`` and return ``(flow L/min, Segmentation)``."""
    seg = segment_vessel(env, plane, plane.P, size, spacing)
    return compute_flow(seg.mask, seg.vn, spacing), seg


def ideal_mask(plane: PlaneState, gt_point, radius: float, size: int = 48, spacing: float = STATE_SPACING):
    """Pixels of the plane grid within ``radius`` mm of ``gt_point`` (perpendicular cuts)."""
    mid = (size - 1) / 2.0
    rr, cc = np.indices((size, size))
    d = np.asarray(gt_point, float) - plane.P
    r0, c0 = mid + d @ plane.w1 / spacing, mid + d @ plane.w2 / spacing
    return ((rr - r0) ** 2 + (cc - c0) ** 2) * spacing ** 2 < radius ** 2


# --------------------------------------------------------------------------
# agreement statistics


def _align_com(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ca = np.array(ndimage.center_of_mass(a))
    cb = np.array(ndimage.center_of_mass(b))
    shift = np.round(ca - cb)
    return ndimage.shift(b.astype(float), shift, order=0, mode="constant") > 0.5


def dice_aligned(a, b) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    if not a.any() or not b.any():
        raise ValueError("empty mask")
    b2 = _align_com(a, b)
    return float(2.0 * np.sum(a & b2) / (a.sum() + b2.sum()))


def agreement_stats(a, b, masks_a=None, masks_b=None, pixel_area: float = STATE_SPACING ** 2) -> dict:
    """Regression, Bland-Altman and (optionally) overlap statistics between two methods."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size < 2:
        raise ValueError("need at least two paired values")
    if np.ptp(a) == 0:
        raise ValueError("zero variance in reference values")
    diff = a - b
    bias = float(diff.mean())
    sd = float(diff.std(ddof=1))
    if np.ptp(b) == 0:
        r2 = 0.0
        slope, intercept = 0.0, float(b.mean())
    else:
        fit = stats.linregress(a, b)
        r2, slope, intercept = float(fit.rvalue ** 2), float(fit.slope), float(fit.intercept)
    out = {"n": int(a.size), "r2": r2, "slope": slope, "intercept": intercept, "bias": bias,
           "loa_low": bias - 1.96 * sd, "loa_high": bias + 1.96 * sd}
    if masks_a is not None and masks_b is not None:
        dices, areas = [], []
        for ma, mb in zip(masks_a, masks_b):
            ma, mb = np.asarray(ma, bool), np.asarray(mb, bool)
            dices.append(dice_aligned(ma, mb))
            area_a, area_b = ma.sum() * pixel_area, mb.sum() * pixel_area
            areas.append(abs(area_a - area_b) / area_a * 100.0)
        out["dice"] = float(np.mean(dices))
        out["area_diff_pct"] = float(np.mean(areas))
    return out
