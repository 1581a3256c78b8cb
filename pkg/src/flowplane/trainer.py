"""Asynchronous advantage actor-critic training on a shared parameter store.

Workers are threads. Each one snapshots the shared parameters, plays up to
``k_A`` steps in its own environment, computes the actor-critic gradient
and applies one Adam step to the shared store. Published parameter arrays
are immutable; an update swaps in fresh arrays under a lock, so a snapshot
is always a complete copy of one version of every array.
"""
from __future__ import annotations

import csv
import json
import math
import queue
import threading
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import policy_net as pn
from .environment import EpisodeConfig, PlaneEnv
from .evaluation import validation_score
from .phantom import make_phantom, random_spec
from .preproc import build_env
from .volume_store import Checkpoint, save_checkpoint

CKPT_NAME = "best.ckpt"
CURVES_NAME = "curves.csv"


class TrainingCollapse(RuntimeError):
    """Every update of a validation epoch produced non-finite gradients."""


class RaceDetected(AssertionError):
    pass


@dataclass
class TrainConfig:
    workers: int = 4
    lr: float = 1e-5
    k_a: int = pn.K_A
    eta: float = pn.ETA
    gamma: float = pn.GAMMA
    steps: int = 200_000
    val_interval: int = 5_000
    grad_clip: float = pn.GRAD_CLIP
    seed: int = 0
    t_max: int = 100
    lam: float = 0.025
    omega_max: float = 5.0
    d_max: float = 5.0
    state_dims: tuple = (31, 84, 84)
    state_spacing: float = 2.0
    widths: tuple = (16, 32, 32, 64)
    latent: int = 1024
    lstm: int = 256
    check_races: bool = True

    def __post_init__(self):
        self.state_dims = tuple(int(d) for d in self.state_dims)
        self.widths = tuple(int(w) for w in self.widths)
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.steps < 0 or self.val_interval < 1 or self.k_a < 1:
            raise ValueError("steps >= 0, val_interval >= 1 and k_a >= 1 required")

    def network(self) -> pn.NetworkConfig:
        return pn.NetworkConfig(state_dims=self.state_dims, widths=self.widths, latent=self.latent, lstm=self.lstm)

    def episode(self, mode: str) -> EpisodeConfig:
        return EpisodeConfig(t_max=self.t_max, lam=self.lam, mode=mode, omega_max=self.omega_max,
                             d_max=self.d_max, state_dims=self.state_dims, state_spacing=self.state_spacing)

    def to_json(self) -> dict:
        d = asdict(self)
        d["state_dims"] = list(self.state_dims)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**d)


# --------------------------------------------------------------------------
# shared store


def _checksum(a: np.ndarray) -> int:
    return zlib.crc32(a.tobytes())


class SharedParams:
    """Parameter arrays plus shared Adam moments and a global update counter.

    With ``check_races`` every publish records a checksum and every snapshot
    re-verifies it, and every mutation asserts that the calling thread holds
    the lock. Violations are counted, never silently ignored.
    """

    def __init__(self, params: dict[str, np.ndarray], check_races: bool = True):
        self._lock = threading.Lock()
        self._owner = None
        self.check_races = check_races
        self._arrays = {k: self._publish(np.array(v, dtype=np.float64)) for k, v in params.items()}
        self._versions = {k: 0 for k in params}
        self._sums = {k: _checksum(v) for k, v in self._arrays.items()} if check_races else {}
        self.m = {k: np.zeros_like(v) for k, v in self._arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in self._arrays.items()}
        self.t = 0
        self.skipped = 0
        self.race_reports = 0
        self.torn_reads = 0
        self.snapshots = 0

    @staticmethod
    def _publish(a: np.ndarray) -> np.ndarray:
        a.setflags(write=False)
        return a

    def _acquire(self):
        self._lock.acquire()
        self._owner = threading.get_ident()

    def _release(self):
        self._owner = None
        self._lock.release()

    def _assert_owner(self):
        if self._owner != threading.get_ident():
            self.race_reports += 1
            raise RaceDetected("shared store mutated without holding its lock")

    def snapshot(self) -> tuple[dict[str, np.ndarray], dict[str, int]]:
        """Immutable arrays of one consistent version, plus their version numbers."""
        self._acquire()
        try:
            arrays = dict(self._arrays)
            versions = dict(self._versions)
            sums = dict(self._sums)
            self.snapshots += 1
        finally:
            self._release()
        if self.check_races:
            for k, a in arrays.items():
                if a.flags.writeable or _checksum(a) != sums[k]:
                    self.torn_reads += 1
        return arrays, versions

    def params(self) -> dict[str, np.ndarray]:
        return self.snapshot()[0]

    def apply(self, grads: dict[str, np.ndarray], lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> bool:
        """One bias-corrected Adam step; non-finite gradients are skipped and counted."""
        if set(grads) != set(self._arrays):
            raise KeyError("gradient names do not match the parameter store")
        finite = all(np.all(np.isfinite(g)) for g in grads.values())
        self._acquire()
        try:
            self._assert_owner()
            if not finite:
                self.skipped += 1
                return False
            self.t += 1
            bc1 = 1.0 - beta1 ** self.t
            bc2 = 1.0 - beta2 ** self.t
            for k, g in grads.items():
                if g.shape != self._arrays[k].shape:
                    raise ValueError(f"gradient {k!r} shape {g.shape} != {self._arrays[k].shape}")
                m = self.m[k]
                v = self.v[k]
                m *= beta1
                m += (1.0 - beta1) * g
                g2 = g * g
                g2 *= 1.0 - beta2
                v *= beta2
                v += g2
                denom = np.sqrt(v)
                denom *= 1.0 / math.sqrt(bc2)
                denom += eps
                step = m * (lr / bc1)
                step /= denom
                new = self._arrays[k] - step
                self._arrays[k] = self._publish(new)
                self._versions[k] += 1
                if self.check_races:
                    self._sums[k] = _checksum(new)
            return True
        finally:
            self._release()

    def verify(self) -> None:
        """Re-check every published array against its recorded checksum."""
        if not self.check_races:
            return
        for k, a in self._arrays.items():
            if a.flags.writeable or _checksum(a) != self._sums[k]:
                self.race_reports += 1

    def counters(self) -> dict:
        return {"updates": self.t, "skipped": self.skipped, "race_reports": self.race_reports,
                "torn_reads": self.torn_reads, "snapshots": self.snapshots}


def adam_update(shared: SharedParams, grads, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8) -> bool:
    return shared.apply(grads, lr, beta1, beta2, eps)


# --------------------------------------------------------------------------
# phantom families


def make_cases(n: int, seed: int, kind: str | None = None):
    """``n`` random phantoms as ``(EnvVolumes, GroundTruth, PhantomSpec)`` triples."""
    rng = np.random.default_rng(seed)
    cases = []
    for _ in range(n):
        spec = random_spec(rng, kind=kind)
        vol, gt = make_phantom(spec, int(rng.integers(2 ** 31)))
        cases.append((build_env(vol), gt, spec))
    return cases


# --------------------------------------------------------------------------
# training


@dataclass
class _Progress:
    lock: threading.Lock = field(default_factory=threading.Lock)
    steps: int = 0
    next_val: int = 0
    returns: list = field(default_factory=list)
    nan_in_epoch: int = 0
    ok_in_epoch: int = 0
    final_queued: bool = False


class Trainer:
    def __init__(self, cfg: TrainConfig, train_cases, val_cases, out_dir, init=None, log=None):
        if not train_cases or not val_cases:
            raise ValueError("need at least one training and one validation phantom")
        self.cfg = cfg
        self.net = cfg.network()
        self.train_cases = list(train_cases)
        self.val_cases = list(val_cases)
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        ss = np.random.SeedSequence(cfg.seed)
        init_seed, *worker_seeds = ss.spawn(cfg.workers + 1)
        params = init if init is not None else pn.init_params(self.net, np.random.default_rng(init_seed))
        self.shared = SharedParams(params, cfg.check_races)
        self.worker_seeds = worker_seeds
        self.progress = _Progress(next_val=cfg.val_interval)
        self.val_queue: queue.Queue = queue.Queue()
        self.curves: list[dict] = []
        self.best_score = math.inf
        self.best_step = 0
        self.best_history: list[float] = []
        self.errors: list[BaseException] = []
        self.stop = threading.Event()
        self.log = log or (lambda msg: None)

    # ---- checkpointing
    def _ckpt_config(self) -> dict:
        return {"network": self.net.to_json(), "train": self.cfg.to_json()}

    def _save(self, params, step: int, score: float, name: str = CKPT_NAME) -> Checkpoint:
        ckpt = Checkpoint({k: np.array(v) for k, v in params.items()}, step, score, self._ckpt_config())
        save_checkpoint(ckpt, self.out_dir / name)
        return ckpt

    # ---- validator
    def _validate(self, params, step: int, mean_return: float):
        score = validation_score(params, self.net, self.cfg.episode("eval"), self.val_cases)
        self.curves.append({"step": step, "mean_episode_return": mean_return, "val_cost": score})
        if score < self.best_score:
            self.best_score, self.best_step = score, step
            self._save(params, step, score)
        self.best_history.append(self.best_score)
        self.log(f"step {step} return {mean_return:.4f} val_cost {score:.4f} best {self.best_score:.4f}")

    def _validator(self):
        while True:
            item = self.val_queue.get()
            if item is None:
                return
            try:
                self._validate(*item)
            except BaseException as exc:  # surfaced by train()
                self.errors.append(exc)
                self.stop.set()
                return

    # ---- workers
    def _claim_step(self) -> bool:
        p = self.progress
        with p.lock:
            if p.steps >= self.cfg.steps or self.stop.is_set():
                return False
            p.steps += 1
            return True

    def _after_update(self, ok: bool):
        p = self.progress
        with p.lock:
            if ok:
                p.ok_in_epoch += 1
            else:
                p.nan_in_epoch += 1
            last = p.steps >= self.cfg.steps
            if (p.steps >= p.next_val and not p.final_queued) or (last and not p.final_queued):
                p.final_queued = last
                while p.next_val <= p.steps:
                    p.next_val += self.cfg.val_interval
                if p.nan_in_epoch and not p.ok_in_epoch:
                    self.errors.append(TrainingCollapse(
                        f"all {p.nan_in_epoch} updates before step {p.steps} had non-finite gradients; "
                        f"counters {self.shared.counters()}"))
                    self.stop.set()
                    return
                p.nan_in_epoch = p.ok_in_epoch = 0
                rets = p.returns
                mean_ret = float(np.mean(rets)) if rets else float("nan")
                p.returns = []
                # enqueue while holding the lock so snapshots reach the validator in step order
                self.val_queue.put((self.shared.params(), p.steps, mean_ret))

    def _worker(self, wid: int):
        cfg, net = self.cfg, self.net
        rng = np.random.default_rng(self.worker_seeds[wid])
        ep = cfg.episode("train")
        penv = None
        x = h = None
        ep_return = 0.0
        try:
            while not self.stop.is_set():
                if penv is None or x is None:
                    env, gt = self.train_cases[rng.integers(len(self.train_cases))]
                    penv = PlaneEnv(env, gt, ep)
                    x = penv.reset(rng).values
                    h = pn.zero_state(net)
                    ep_return = 0.0
                params, _ = self.shared.snapshot()
                window = pn.Rollout(h0=h)
                done = False
                with ag.no_grad():
                    for _ in range(cfg.k_a):
                        if not self._claim_step():
                            break
                        out, h = pn.forward(params, x, h, net)
                        action, raw = pn.sample_action(out, rng, cfg.omega_max, cfg.d_max)
                        tr = penv.step(action)
                        window.states.append(x)
                        window.raws.append(raw)
                        window.rewards.append(tr.reward)
                        ep_return += tr.reward
                        done = tr.done
                        if done:
                            break
                        x = tr.state.values
                    if not window.states:
                        break
                    window.bootstrap = 0.0 if done else pn.forward(params, x, h, net)[0].value_np
                grads, _ = pn.a3c_gradients(params, window, net, cfg.gamma, cfg.k_a, cfg.eta)
                if all(np.all(np.isfinite(g)) for g in grads.values()):
                    pn.clip_gradients(grads, cfg.grad_clip)
                ok = self.shared.apply(grads, cfg.lr)
                if done:
                    with self.progress.lock:
                        self.progress.returns.append(ep_return)
                    x = None
                self._after_update(ok)
        except BaseException as exc:
            self.errors.append(exc)
            self.stop.set()

    def run(self) -> Checkpoint:
        cfg = self.cfg
        if cfg.steps == 0:
            ckpt = self._save(self.shared.params(), 0, math.inf)
            self._write_curves()
            return ckpt
        validator = threading.Thread(target=self._validator, name="validator")
        validator.start()
        workers = [threading.Thread(target=self._worker, args=(i,), name=f"worker{i}") for i in range(cfg.workers)]
        for t in workers:
            t.start()
        for t in workers:
            t.join()
        self.val_queue.put(None)
        validator.join()
        self.shared.verify()
        self._write_curves()
        if self.errors:
            raise self.errors[0]
        if not (self.out_dir / CKPT_NAME).exists():
            self._save(self.shared.params(), self.progress.steps, math.inf)
        from .volume_store import load_checkpoint

        return load_checkpoint(self.out_dir / CKPT_NAME)

    def _write_curves(self):
        rows = sorted(self.curves, key=lambda r: r["step"])
        with (self.out_dir / CURVES_NAME).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["step", "mean_episode_return", "val_cost"])
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(float(v)) if k != "step" else v) for k, v in r.items()})
        summary = {"config": self.cfg.to_json(), "counters": self.shared.counters(),
                   "env_steps": self.progress.steps, "best_score": self.best_score
                   if math.isfinite(self.best_score) else None, "best_step": self.best_step}
        (self.out_dir / "train_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def train(cfg: TrainConfig, train_cases, val_cases, out_dir, init=None, log=None) -> Checkpoint:
    """Run asynchronous training and return the best validated checkpoint."""
    return Trainer(cfg, train_cases, val_cases, out_dir, init=init, log=log).run()
