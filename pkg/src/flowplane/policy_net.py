"""Actor-critic network: 3D residual conv stages, FC latent, LSTM, Gaussian policy and value heads.

All computation runs on :mod:`flowplane.autograd`. Parameters are plain
``dict[str, np.ndarray]``; :func:`forward` accepts either arrays (inference)
or :class:`~flowplane.autograd.Tensor` leaves (training).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .environment import Action
from .geometry import D_MAX, OMEGA_MAX, STATE_DIMS

N_ACTIONS = 5
SIGMA_FLOOR = 1e-6
GAMMA = 0.99
K_A = 8
ETA = 0.01
GRAD_CLIP = 40.0
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 2
    state_dims: tuple = STATE_DIMS
    widths: tuple = (16, 32, 32, 64)
    latent: int = 1024
    lstm: int = 256
    n_actions: int = N_ACTIONS
    sigma_floor: float = SIGMA_FLOOR

    def __post_init__(self):
        object.__setattr__(self, "state_dims", tuple(int(d) for d in self.state_dims))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.state_dims) != 3 or min(self.state_dims) < 1:
            raise ValueError(f"bad state dims {self.state_dims}")
        if not self.widths or min(self.widths) < 1 or self.latent < 1 or self.lstm < 1:
            raise ValueError("layer sizes must be positive")

    @property
    def input_shape(self) -> tuple:
        return (self.in_channels,) + self.state_dims

    def feature_dims(self) -> tuple:
        dims = self.state_dims
        for _ in self.widths:
            dims = tuple((d - 1) // 2 + 1 for d in dims)
        return dims

    def feature_size(self) -> int:
        return self.widths[-1] * int(np.prod(self.feature_dims()))

    def to_json(self) -> dict:
        d = asdict(self)
        d["state_dims"] = list(self.state_dims)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


@dataclass
class LstmState:
    h: object
    c: object

    def detached(self) -> "LstmState":
        return LstmState(np.array(_data(self.h)), np.array(_data(self.c)))


@dataclass
class PolicyOutput:
    mu: object
    sigma: object
    value: object

    @property
    def mu_np(self) -> np.ndarray:
        return _data(self.mu)

    @property
    def sigma_np(self) -> np.ndarray:
        return _data(self.sigma)

    @property
    def value_np(self) -> float:
        return float(_data(self.value).reshape(-1)[0])


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, ag.Tensor) else np.asarray(x)


def zero_state(cfg: NetworkConfig) -> LstmState:
    return LstmState(np.zeros(cfg.lstm), np.zeros(cfg.lstm))


# --------------------------------------------------------------------------
# parameters


def param_shapes(cfg: NetworkConfig) -> dict[str, tuple]:
    shapes = {}
    cin = cfg.in_channels
    for i, cout in enumerate(cfg.widths):
        p = f"stage{i}"
        shapes[f"{p}.conv_a.w"] = (cout, cin, 3, 3, 3)
        shapes[f"{p}.conv_a.b"] = (cout,)
        shapes[f"{p}.conv_b.w"] = (cout, cout, 3, 3, 3)
        shapes[f"{p}.conv_b.b"] = (cout,)
        if cin != cout:
            shapes[f"{p}.skip.w"] = (cout, cin, 1, 1, 1)
            shapes[f"{p}.skip.b"] = (cout,)
        cin = cout
    h = cfg.lstm
    shapes["fc.w"] = (cfg.latent, cfg.feature_size())
    shapes["fc.b"] = (cfg.latent,)
    shapes["lstm.w_ih"] = (4 * h, cfg.latent)
    shapes["lstm.w_hh"] = (4 * h, h)
    shapes["lstm.b"] = (4 * h,)
    for head, n in (("mu", cfg.n_actions), ("sigma", cfg.n_actions), ("value", 1)):
        shapes[f"{head}.w"] = (n, h)
        shapes[f"{head}.b"] = (n,)
    return shapes


def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def init_params(cfg: NetworkConfig, rng: np.random.Generator | int = 0) -> dict[str, np.ndarray]:
    """Fan-in uniform weights, orthogonal recurrent blocks, forget-gate bias 1, near-zero heads."""
    rng = np.random.default_rng(rng)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:]))
        bound = 1.0 / math.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, shape)
    h = cfg.lstm
    params["lstm.w_hh"] = np.concatenate([_orthogonal(rng, h) for _ in range(4)])
    params["lstm.b"][h:2 * h] = 1.0
    for head in ("mu", "sigma", "value"):
        params[f"{head}.w"] *= 0.01
    return params


def count_params(params) -> int:
    return int(sum(np.size(v) for v in params.values()))


def describe(cfg: NetworkConfig) -> list[tuple[str, tuple, int]]:
    """``(name, shape, size)`` for every parameter array, in construction order."""
    return [(k, s, int(np.prod(s))) for k, s in param_shapes(cfg).items()]


def as_leaves(params: dict[str, np.ndarray]) -> dict[str, ag.Tensor]:
    return {k: ag.Tensor(v, requires_grad=True, name=k) for k, v in params.items()}


# --------------------------------------------------------------------------
# forward


def _stage(p, name: str, x, has_skip: bool):
    y = ag.elu(ag.conv3d(x, p[f"{name}.conv_a.w"], p[f"{name}.conv_a.b"], stride=2, padding=1))
    y = ag.conv3d(y, p[f"{name}.conv_b.w"], p[f"{name}.conv_b.b"], stride=1, padding=1)
    if has_skip:
        skip = ag.conv3d(x, p[f"{name}.skip.w"], p[f"{name}.skip.b"], stride=2, padding=0)
    else:
        skip = ag.getitem(x, (slice(None), slice(None, None, 2), slice(None, None, 2), slice(None, None, 2)))
    return ag.elu(ag.add(y, skip))


def _lstm(p, x, state: LstmState, hidden: int) -> LstmState:
    gates = ag.add(ag.add(ag.matmul(p["lstm.w_ih"], x), ag.matmul(p["lstm.w_hh"], state.h)), p["lstm.b"])
    i = ag.sigmoid(ag.getitem(gates, slice(0, hidden)))
    f = ag.sigmoid(ag.getitem(gates, slice(hidden, 2 * hidden)))
    g = ag.tanh(ag.getitem(gates, slice(2 * hidden, 3 * hidden)))
    o = ag.sigmoid(ag.getitem(gates, slice(3 * hidden, 4 * hidden)))
    c = ag.add(ag.mul(f, state.c), ag.mul(i, g))
    h = ag.mul(o, ag.tanh(c))
    return LstmState(h, c)


def forward(params, x, state: LstmState, cfg: NetworkConfig) -> tuple[PolicyOutput, LstmState]:
    """One recurrent step on a ``[C, D, H, W]`` state tensor."""
    x = ag.as_tensor(np.asarray(_data(x), dtype=np.float64))
    if x.shape != cfg.input_shape:
        raise ValueError(f"input shape {x.shape} != {cfg.input_shape}")
    p = {k: ag.as_tensor(v) for k, v in params.items()}
    cin = cfg.in_channels
    for i, cout in enumerate(cfg.widths):
        x = _stage(p, f"stage{i}", x, cin != cout)
        cin = cout
    z = ag.elu(ag.add(ag.matmul(p["fc.w"], ag.reshape(x, (-1,))), p["fc.b"]))
    state = LstmState(ag.as_tensor(state.h), ag.as_tensor(state.c))
    new = _lstm(p, z, state, cfg.lstm)
    h = new.h
    mu = ag.softsign(ag.add(ag.matmul(p["mu.w"], h), p["mu.b"]))
    sigma = ag.clamp_min(ag.softplus(ag.add(ag.matmul(p["sigma.w"], h), p["sigma.b"])), cfg.sigma_floor)
    value = ag.add(ag.matmul(p["value.w"], h), p["value.b"])
    if not np.all(np.isfinite(mu.data)) or not np.all(np.isfinite(value.data)):
        raise FloatingPointError("non-finite network output")
    return PolicyOutput(mu, sigma, value), new


# --------------------------------------------------------------------------
# policy utilities


def sample_action(out: PolicyOutput, rng: np.random.Generator, omega_max: float = OMEGA_MAX,
                  d_max: float = D_MAX) -> tuple[Action, np.ndarray]:
    """Draw ``a ~ N(mu, sigma)``; returns the clamped scaled action and the raw pre-clamp draw."""
    mu, sigma = out.mu_np, out.sigma_np
    if not np.all(sigma > 0):
        raise ValueError("sigma must be positive")
    raw = mu + sigma * rng.standard_normal(mu.shape)
    return Action.from_unit(raw, omega_max, d_max), raw


def mean_action(out: PolicyOutput, omega_max: float = OMEGA_MAX, d_max: float = D_MAX) -> Action:
    return Action.from_unit(out.mu_np, omega_max, d_max)


def log_prob(raw, mu, sigma):
    """Gaussian log-density summed over action components (Tensor-aware)."""
    z = ag.div(ag.sub(raw, mu), sigma)
    per = ag.sub(ag.mul(ag.square(z), -0.5), ag.add(ag.log(sigma), 0.5 * LOG_2PI))
    return ag.tsum(per)


def entropy(sigma):
    """Differential entropy of a diagonal Gaussian; a Tensor when given one."""
    if isinstance(sigma, ag.Tensor):
        return ag.tsum(ag.mul(ag.add(ag.log(ag.square(sigma)), LOG_2PI + 1.0), 0.5))
    s = np.asarray(sigma, dtype=np.float64)
    if not np.all(s > 0):
        raise ValueError("sigma must be positive")
    return float(np.sum(0.5 * (np.log(2.0 * np.pi * s ** 2) + 1.0)))


def advantage(rewards, values, gamma: float = GAMMA, k_a: int = K_A) -> list[float]:
    """k-step bootstrapped advantages.

    ``values`` holds one entry per reward plus a trailing bootstrap value
    (0 for a terminal state). Windows are truncated at the end of the list.
    """
    if k_a < 1:
        raise ValueError("k_A must be >= 1")
    n = len(rewards)
    if len(values) != n + 1:
        raise ValueError(f"need {n + 1} values for {n} rewards, got {len(values)}")
    out = []
    for t in range(n):
        m = min(k_a, n - t)
        ret = sum(gamma ** i * rewards[t + i] for i in range(m)) + gamma ** m * values[t + m]
        out.append(float(ret - values[t]))
    return out


@dataclass
class Rollout:
    """One update window: states, raw actions and rewards, plus the LSTM state at its start."""

    states: list = field(default_factory=list)
    raws: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    h0: LstmState | None = None
    bootstrap: float = 0.0


def a3c_objective(outs, raws, rewards, bootstrap: float = 0.0, gamma: float = GAMMA, k_a: int = K_A,
                  eta: float = ETA, fixed=None):
    """Actor-critic loss from recorded :class:`PolicyOutput` s of one window.

    Advantages are computed from detached values so no gradient flows
    through them. ``fixed`` may supply ``(advantages, values)`` to hold those
    constants (finite-difference checks).
    """
    if not outs:
        raise ValueError("empty rollout")
    if not (len(outs) == len(raws) == len(rewards)):
        raise ValueError("outputs, actions and rewards must have equal length")
    if fixed is None:
        values = [o.value_np for o in outs] + [float(bootstrap)]
        adv = advantage(rewards, values, gamma, k_a)
    else:
        adv, values = list(fixed[0]), list(fixed[1]) + [float(bootstrap)]
    actor = ag.Tensor(0.0)
    critic = ag.Tensor(0.0)
    ent_total = 0.0
    for out, raw, f, v in zip(outs, raws, adv, values):
        lp = log_prob(np.asarray(raw, float), out.mu, out.sigma)
        ent = entropy(out.sigma)
        ent_total += float(ent.data)
        actor = ag.sub(actor, ag.add(ag.mul(lp, f), ag.mul(ent, eta)))
        target = f + v  # k-step return
        critic = ag.add(critic, ag.mul(ag.square(ag.sub(target, ag.reshape(out.value, ()))), 0.5))
    loss = ag.add(actor, critic)
    info = {"advantages": adv, "values": values[:-1], "entropy": ent_total / len(outs),
            "actor": float(actor.data), "critic": float(critic.data)}
    return loss, info


def a3c_loss(params, rollout: Rollout, cfg: NetworkConfig, gamma: float = GAMMA, k_a: int = K_A,
             eta: float = ETA, fixed=None):
    """Replay a window through the network and return :func:`a3c_objective` on it."""
    if not rollout.states:
        raise ValueError("empty rollout")
    state = rollout.h0 if rollout.h0 is not None else zero_state(cfg)
    outs = []
    for x in rollout.states:
        out, state = forward(params, x, state, cfg)
        outs.append(out)
    loss, info = a3c_objective(outs, rollout.raws, rollout.rewards, rollout.bootstrap, gamma, k_a, eta, fixed)
    info["state"] = state
    return loss, info


def forward_window(params, xs, h0: LstmState, cfg: NetworkConfig):
    """Batched replay of a window: the conv stack, FC, LSTM input projection and
    heads each run once over all steps; only the recurrence loops.

    Returns ``(mu [A,N], sigma [A,N], value [N], final LstmState)``; numerically
    identical to stepping :func:`forward` through ``xs``.
    """
    x = ag.as_tensor(np.stack([np.asarray(_data(v), dtype=np.float64) for v in xs]))
    n = x.shape[0]
    if x.shape[1:] != cfg.input_shape:
        raise ValueError(f"input shape {x.shape[1:]} != {cfg.input_shape}")
    p = {k: ag.as_tensor(v) for k, v in params.items()}
    cin = cfg.in_channels
    for i, cout in enumerate(cfg.widths):
        x = _stage5(p, f"stage{i}", x, cin != cout)
        cin = cout
    feats = ag.transpose(ag.reshape(x, (n, -1)))
    z = ag.elu(ag.add(ag.matmul(p["fc.w"], feats), ag.reshape(p["fc.b"], (-1, 1))))
    hid = cfg.lstm
    pre = ag.add(ag.matmul(p["lstm.w_ih"], z), ag.reshape(p["lstm.b"], (-1, 1)))
    h, c = ag.as_tensor(h0.h), ag.as_tensor(h0.c)
    hs = []
    for t in range(n):
        gates = ag.add(ag.getitem(pre, (slice(None), t)), ag.matmul(p["lstm.w_hh"], h))
        i_ = ag.sigmoid(ag.getitem(gates, slice(0, hid)))
        f_ = ag.sigmoid(ag.getitem(gates, slice(hid, 2 * hid)))
        g_ = ag.tanh(ag.getitem(gates, slice(2 * hid, 3 * hid)))
        o_ = ag.sigmoid(ag.getitem(gates, slice(3 * hid, 4 * hid)))
        c = ag.add(ag.mul(f_, c), ag.mul(i_, g_))
        h = ag.mul(o_, ag.tanh(c))
        hs.append(ag.reshape(h, (-1, 1)))
    H = ag.concat(hs, axis=1)
    mu = ag.softsign(ag.add(ag.matmul(p["mu.w"], H), ag.reshape(p["mu.b"], (-1, 1))))
    sigma = ag.clamp_min(ag.softplus(ag.add(ag.matmul(p["sigma.w"], H), ag.reshape(p["sigma.b"], (-1, 1)))),
                         cfg.sigma_floor)
    value = ag.reshape(ag.add(ag.matmul(p["value.w"], H), ag.reshape(p["value.b"], (-1, 1))), (n,))
    if not np.all(np.isfinite(mu.data)) or not np.all(np.isfinite(value.data)):
        raise FloatingPointError("non-finite network output")
    return mu, sigma, value, LstmState(h, c)


def _stage5(p, name: str, x, has_skip: bool):
    y = ag.elu(ag.conv3d(x, p[f"{name}.conv_a.w"], p[f"{name}.conv_a.b"], stride=2, padding=1))
    y = ag.conv3d(y, p[f"{name}.conv_b.w"], p[f"{name}.conv_b.b"], stride=1, padding=1)
    if has_skip:
        skip = ag.conv3d(x, p[f"{name}.skip.w"], p[f"{name}.skip.b"], stride=2, padding=0)
    else:
        skip = ag.getitem(x, (slice(None), slice(None), slice(None, None, 2), slice(None, None, 2),
                              slice(None, None, 2)))
    return ag.elu(ag.add(y, skip))


def a3c_window_loss(params, rollout: Rollout, cfg: NetworkConfig, gamma: float = GAMMA, k_a: int = K_A,
                    eta: float = ETA, fixed=None):
    """Vectorised equivalent of :func:`a3c_loss` built on :func:`forward_window`."""
    if not rollout.states:
        raise ValueError("empty rollout")
    h0 = rollout.h0 if rollout.h0 is not None else zero_state(cfg)
    mu, sigma, value, state = forward_window(params, rollout.states, h0, cfg)
    n = len(rollout.states)
    if fixed is None:
        values = [float(v) for v in value.data] + [float(rollout.bootstrap)]
        adv = advantage(rollout.rewards, values, gamma, k_a)
    else:
        adv, values = list(fixed[0]), list(fixed[1]) + [float(rollout.bootstrap)]
    F = np.asarray(adv)
    R = F + np.asarray(values[:-1])
    A = np.stack([np.asarray(r, float) for r in rollout.raws], axis=1)
    z = ag.div(ag.sub(A, mu), sigma)
    logp = ag.sub(ag.mul(ag.square(z), -0.5), ag.add(ag.log(sigma), 0.5 * LOG_2PI))
    ent = ag.mul(ag.add(ag.log(ag.square(sigma)), LOG_2PI + 1.0), 0.5)
    actor = ag.mul(ag.tsum(ag.add(ag.mul(logp, F[None, :]), ag.mul(ent, eta))), -1.0)
    critic = ag.mul(ag.tsum(ag.square(ag.sub(R, value))), 0.5)
    loss = ag.add(actor, critic)
    info = {"advantages": adv, "values": values[:-1], "entropy": float(ag.tsum(ent).data) / n,
            "actor": float(actor.data), "critic": float(critic.data), "state": state}
    return loss, info


def leaf_gradients(leaves: dict[str, ag.Tensor], loss) -> dict[str, np.ndarray]:
    for t in leaves.values():
        t.grad = None
    loss.backward()
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}


def a3c_gradients(params: dict[str, np.ndarray], rollout: Rollout, cfg: NetworkConfig, gamma: float = GAMMA,
                  k_a: int = K_A, eta: float = ETA):
    """Gradients of :func:`a3c_loss` for every parameter array (zeros where unused)."""
    leaves = as_leaves(params)
    loss, info = a3c_window_loss(leaves, rollout, cfg, gamma, k_a, eta)
    grads = leaf_gradients(leaves, loss)
    info["loss"] = float(loss.data)
    return grads, info


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float = GRAD_CLIP) -> float:
    """Scale ``grads`` in place to global norm ``max_norm``; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm and norm > 0:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm
