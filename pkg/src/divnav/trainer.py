"""Behavior-conditioned PPO for N agents sharing one policy.

One update = collect ``batch_horizon`` steps from every agent in a shared
world, add the discriminator bonus to the task reward, run GAE, then the
policy, value and discriminator passes. Episodes run across update
boundaries; an agent that reaches its goal, crashes or times out is respawned
with a freshly sampled behavior token.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import nn
from .sim import (AgentState, LidarConfig, NavEnv, Pose, RewardConfig, RoomConfig, feature_dim)

log = logging.getLogger(__name__)

INTRINSIC_VARIANTS = ("full", "sa", "s", "none")
PROB_FLOOR = 1e-8


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class TrainConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.1
    alpha: float = 0.1
    M: int = 5
    N: int = 5
    epochs_pi: int = 3
    epochs_v: int = 3
    epochs_d: int = 1
    lr_ppo: float = 5e-5
    lr_disc: float = 5e-5
    batch_horizon: int = 128
    minibatch: int = 128
    total_updates: int = 5000
    seed: int = 0
    intrinsic: str = "full"
    # environment
    n_beams: int = 512
    k_frames: int = 3
    max_range: float = 10.0
    noise_std: float = 0.03
    room_size: float = 20.0
    max_steps: int = 200
    # networks
    scan_hidden: tuple = (512, 256)
    head_hidden: int = 128
    disc_hidden: int = 128
    embed_dim: int = 32
    log_std_init: float = -0.5
    embed_init_std: float = 0.1
    policy_out_scale: float = 0.01
    checkpoint_every: int = 0

    def validate(self) -> "TrainConfig":
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma", f"must lie in (0, 1], got {self.gamma}")
        if not 0 < self.lam <= 1:
            raise ConfigError("lambda", f"must lie in (0, 1], got {self.lam}")
        if not 0 < self.clip_eps < 1:
            raise ConfigError("clip_eps", f"must lie in (0, 1), got {self.clip_eps}")
        if self.alpha < 0:
            raise ConfigError("alpha", f"must be nonnegative, got {self.alpha}")
        if self.intrinsic not in INTRINSIC_VARIANTS:
            raise ConfigError("intrinsic", f"must be one of {INTRINSIC_VARIANTS}, got {self.intrinsic!r}")
        for name in ("M", "N", "batch_horizon", "minibatch", "n_beams", "k_frames", "max_steps",
                     "head_hidden", "disc_hidden", "embed_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(name, f"must be >= 1, got {getattr(self, name)}")
        for name in ("epochs_pi", "epochs_v", "epochs_d", "total_updates", "checkpoint_every"):
            if int(getattr(self, name)) < 0:
                raise ConfigError(name, f"must be >= 0, got {getattr(self, name)}")
        for name in ("lr_ppo", "lr_disc", "max_range", "room_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(name, f"must be positive, got {getattr(self, name)}")
        if self.noise_std < 0:
            raise ConfigError("noise_std", "must be nonnegative")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scan_hidden"] = list(self.scan_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "scan_hidden" in d:
            d["scan_hidden"] = tuple(d["scan_hidden"])
        return cls(**d)

    def architecture(self) -> nn.Architecture:
        return nn.Architecture(scan_dim=self.k_frames * self.n_beams, n_tokens=self.M,
                               embed_dim=self.embed_dim, scan_hidden=tuple(self.scan_hidden),
                               head_hidden=self.head_hidden, disc_hidden=self.disc_hidden,
                               log_std_init=self.log_std_init, embed_init_std=self.embed_init_std,
                               policy_out_scale=self.policy_out_scale)

    def room(self) -> RoomConfig:
        return RoomConfig(n_agents=self.N, width=self.room_size, height=self.room_size,
                          lidar=LidarConfig(self.n_beams, self.max_range, self.noise_std),
                          max_steps=self.max_steps)


# ----------------------------------------------------------------------------
# building blocks


def sample_tokens(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. uniform behavior tokens in [0, m)."""
    if m < 1:
        raise ValueError("need at least one behavior")
    return rng.integers(0, m, size=n)


def intrinsic_reward(q_sa: nn.Discriminator, q_s: nn.Discriminator, features, actions, tokens,
                     variant: str = "full") -> np.ndarray:
    """log q_sa(z | s, a) - log q_s(z | s), evaluated at each agent's own token.

    ``variant`` selects an ablation: "sa" keeps only the first term, "s" only
    the state term (``log q_s``), "none" returns zeros.
    """
    features = np.atleast_2d(features)
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    idx = np.arange(len(tokens))
    out = np.zeros(len(tokens))
    if variant == "none":
        return out
    if variant in ("full", "sa"):
        p_sa, _ = q_sa.forward(np.concatenate([features, np.atleast_2d(actions)], axis=1))
        out += np.log(np.maximum(p_sa[idx, tokens], PROB_FLOOR))
    if variant in ("full", "s"):
        p_s, _ = q_s.forward(features)
        lp = np.log(np.maximum(p_s[idx, tokens], PROB_FLOOR))
        out += -lp if variant == "full" else lp
    return out


def mix_rewards(task_rewards, intrinsic_rewards, alpha: float) -> np.ndarray:
    task_rewards = np.asarray(task_rewards, float)
    intrinsic_rewards = np.asarray(intrinsic_rewards, float)
    if task_rewards.shape != intrinsic_rewards.shape:
        raise ValueError("reward arrays differ in length")
    return task_rewards + alpha * intrinsic_rewards


def gae(rewards, values, bootstrap_value: float, gamma: float, lam: float, dones) -> np.ndarray:
    """Generalized advantage estimates by backward recursion.

    ``dones[t]`` marks that step t ended its episode: no value is bootstrapped
    across it and the carried sum restarts.
    """
    rewards = np.asarray(rewards, float)
    values = np.asarray(values, float)
    dones = np.asarray(dones, bool)
    adv = np.zeros_like(rewards)
    carry = 0.0
    next_value = bootstrap_value
    for t in range(len(rewards) - 1, -1, -1):
        live = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * live - values[t]
        carry = delta + gamma * lam * live * carry
        adv[t] = carry
        next_value = values[t]
    return adv


def discounted_returns(rewards, bootstrap_value: float, gamma: float, dones) -> np.ndarray:
    out = np.zeros(len(rewards))
    g = bootstrap_value
    for t in range(len(rewards) - 1, -1, -1):
        g = rewards[t] + gamma * g * (0.0 if dones[t] else 1.0)
        out[t] = g
    return out


def normalize(x: np.ndarray) -> np.ndarray:
    std = x.std()
    return (x - x.mean()) / (std + 1e-8)


@dataclass
class RolloutBatch:
    """Flattened transitions of every agent segment of one collection window."""
    features: np.ndarray
    actions: np.ndarray       # raw (pre-clamp) Gaussian samples
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray       # task + alpha * intrinsic
    task_rewards: np.ndarray
    intrinsic: np.ndarray
    tokens: np.ndarray
    dones: np.ndarray
    agent_ids: np.ndarray
    step_index: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rewards)

    def subset(self, idx) -> "RolloutBatch":
        return RolloutBatch(**{k: (None if v is None else v[idx]) for k, v in self.__dict__.items()})


def _minibatches(n: int, size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    perm = rng.permutation(n)
    for start in range(0, n, size):
        yield perm[start:start + size]


def ppo_surrogate(policy: nn.PolicyNet, batch: RolloutBatch, clip_eps: float):
    """Clipped PPO loss (to minimize) and its parameter gradients."""
    mean, std, cache = policy.forward(batch.features, batch.tokens)
    logp = nn.gaussian_log_prob(batch.actions, mean, std)
    ratio = np.exp(logp - batch.log_probs)
    adv = batch.advantages
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    n = len(adv)
    loss = -float(np.minimum(surr1, surr2).mean())
    nn.check_finite("policy loss", loss)
    dlogp = np.where(surr1 <= surr2, -surr1, 0.0) / n
    z = (batch.actions - mean) / std
    d_mean = dlogp[:, None] * z / std
    d_log_std = (dlogp[:, None] * (z * z - 1.0)).sum(axis=0)
    return loss, policy.backward(cache, d_mean, d_log_std)


def ppo_policy_update(batch: RolloutBatch, policy: nn.PolicyNet, opt: nn.Adam, cfg: TrainConfig,
                      rng: np.random.Generator) -> float:
    """``epochs_pi`` passes of Adam on the clipped surrogate; returns the mean loss."""
    losses = []
    for _ in range(cfg.epochs_pi):
        for mb in _minibatches(len(batch), cfg.minibatch, rng):
            loss, grads = ppo_surrogate(policy, batch.subset(mb), cfg.clip_eps)
            opt.step(grads)
            losses.append(loss)
    return float(np.mean(losses)) if losses else 0.0


def value_loss(value: nn.ValueNet, batch: RolloutBatch):
    v, cache = value.forward(batch.features, batch.tokens)
    err = v - batch.returns
    loss = float((err * err).mean())
    nn.check_finite("value loss", loss)
    return loss, value.backward(cache, 2.0 * err / len(err))


def value_update(batch: RolloutBatch, value: nn.ValueNet, opt: nn.Adam, cfg: TrainConfig,
                 rng: np.random.Generator) -> float:
    losses = []
    for _ in range(cfg.epochs_v):
        for mb in _minibatches(len(batch), cfg.minibatch, rng):
            loss, grads = value_loss(value, batch.subset(mb))
            opt.step(grads)
            losses.append(loss)
    return float(np.mean(losses)) if losses else 0.0


def noisy(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Add Gaussian noise with one per-feature standard deviation of the batch."""
    return x + rng.standard_normal(x.shape) * x.std(axis=0)


def discriminator_update(batch: RolloutBatch, q_sa: nn.Discriminator, q_s: nn.Discriminator,
                         opt_sa: nn.Adam, opt_s: nn.Adam, cfg: TrainConfig,
                         rng: np.random.Generator) -> tuple[float, float]:
    """Cross-entropy passes for both discriminators on noise-perturbed inputs."""
    x_sa = noisy(np.concatenate([batch.features, batch.actions], axis=1), rng)
    x_s = noisy(batch.features, rng)
    loss_sa, loss_s = [], []
    for _ in range(cfg.epochs_d):
        for mb in _minibatches(len(batch), cfg.minibatch, rng):
            l_sa, _, g_sa = q_sa.cross_entropy(x_sa[mb], batch.tokens[mb])
            l_s, _, g_s = q_s.cross_entropy(x_s[mb], batch.tokens[mb])
            opt_sa.step(g_sa)
            opt_s.step(g_s)
            loss_sa.append(l_sa)
            loss_s.append(l_s)
    return (float(np.mean(loss_sa)) if loss_sa else 0.0, float(np.mean(loss_s)) if loss_s else 0.0)


def discriminator_accuracy(disc: nn.Discriminator, x: np.ndarray, tokens) -> float:
    probs, _ = disc.forward(x)
    return float((probs.argmax(axis=1) == np.asarray(tokens)).mean())


# ----------------------------------------------------------------------------
# training loop

CURVE_FIELDS = ["update", "mean_task_reward", "mean_intrinsic_reward", "disc_sa_loss", "disc_s_loss",
                "disc_sa_acc", "success_rate_rolling"]


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_state(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


class Trainer:
    """Owns networks, optimizers, the rollout world and all RNG streams."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg.validate()
        self.rng = np.random.default_rng(cfg.seed)
        self.nets = nn.Networks(cfg.architecture(), self.rng)
        self.opt_pi = nn.Adam(self.nets.policy.params, cfg.lr_ppo)
        self.opt_v = nn.Adam(self.nets.value.params, cfg.lr_ppo)
        self.opt_sa = nn.Adam(self.nets.disc_sa.params, cfg.lr_disc)
        self.opt_s = nn.Adam(self.nets.disc_s.params, cfg.lr_disc)
        self.env = NavEnv(cfg.room(), RewardConfig(), cfg.k_frames, seed=np.random.default_rng(cfg.seed + 7919))
        self.env.reset()
        self.tokens = sample_tokens(cfg.N, cfg.M, self.rng)
        self._sync_tokens()
        self.outcomes: deque = deque(maxlen=100)
        self.update = 0
        self.curves: list[dict] = []

    def _sync_tokens(self):
        for a, z in zip(self.env.world.agents, self.tokens):
            a.token = int(z)

    # -- collection ------------------------------------------------------

    def collect(self) -> RolloutBatch:
        cfg, env, nets = self.cfg, self.env, self.nets
        n = env.n_agents
        rows = {k: [] for k in ("features", "actions", "log_probs", "values", "rewards", "task_rewards",
                                "intrinsic", "tokens", "dones", "agent_ids", "step_index")}
        for t in range(cfg.batch_horizon):
            feats = env.features()
            tokens = self.tokens.copy()
            mean, std, _ = nets.policy.forward(feats, tokens)
            values, _ = nets.value.forward(feats, tokens)
            action, raw, logp = nn.sample_action(mean, std, self.rng)
            task, events = env.step(action)
            r_int = intrinsic_reward(nets.disc_sa, nets.disc_s, feats, raw, tokens, cfg.intrinsic)
            mixed = mix_rewards(task, r_int, cfg.alpha)
            done = events.terminal
            for key, val in (("features", feats), ("actions", raw), ("log_probs", logp), ("values", values),
                             ("rewards", mixed), ("task_rewards", task), ("intrinsic", r_int),
                             ("tokens", tokens), ("dones", done), ("agent_ids", np.arange(n)),
                             ("step_index", np.full(n, t))):
                rows[key].append(val)
            for i in np.flatnonzero(done):
                self.outcomes.append(bool(events.reached_goal[i]))
                env.respawn(int(i))
                self.tokens[i] = sample_tokens(1, cfg.M, self.rng)[0]
            self._sync_tokens()
        # (T, N, ...) -> agent-major (N * T, ...)
        arrays = {k: np.swapaxes(np.asarray(v), 0, 1).reshape(n * cfg.batch_horizon, *np.asarray(v).shape[2:])
                  for k, v in rows.items()}
        batch = RolloutBatch(**arrays)
        bootstrap, _ = nets.value.forward(env.features(), self.tokens)
        T = cfg.batch_horizon
        adv = np.zeros(len(batch))
        ret = np.zeros(len(batch))
        for i in range(n):
            s = slice(i * T, (i + 1) * T)
            adv[s] = gae(batch.rewards[s], batch.values[s], bootstrap[i], cfg.gamma, cfg.lam, batch.dones[s])
            ret[s] = discounted_returns(batch.rewards[s], bootstrap[i], cfg.gamma, batch.dones[s])
        batch.advantages = normalize(adv)
        batch.returns = ret
        return batch

    # -- one full update -------------------------------------------------

    def step(self) -> dict:
        cfg = self.cfg
        batch = self.collect()
        x_sa = np.concatenate([batch.features, batch.actions], axis=1)
        acc_sa = discriminator_accuracy(self.nets.disc_sa, x_sa, batch.tokens)
        ppo_policy_update(batch, self.nets.policy, self.opt_pi, cfg, self.rng)
        value_update(batch, self.nets.value, self.opt_v, cfg, self.rng)
        loss_sa, loss_s = discriminator_update(batch, self.nets.disc_sa, self.nets.disc_s,
                                               self.opt_sa, self.opt_s, cfg, self.rng)
        self.update += 1
        row = {"update": self.update,
               "mean_task_reward": float(batch.task_rewards.mean()),
               "mean_intrinsic_reward": float(batch.intrinsic.mean()),
               "disc_sa_loss": loss_sa, "disc_s_loss": loss_s, "disc_sa_acc": acc_sa,
               "success_rate_rolling": float(np.mean(self.outcomes)) if self.outcomes else float("nan")}
        self.curves.append(row)
        log.debug("update %d: %s", self.update, row)
        return row

    # -- checkpointing ---------------------------------------------------

    def checkpoint(self) -> nn.Checkpoint:
        arrays = {}
        for k, p in self.nets.named_params().items():
            arrays[f"net.{k}"] = p
        meta_opt = {}
        for name, opt in (("pi", self.opt_pi), ("v", self.opt_v), ("sa", self.opt_sa), ("s", self.opt_s)):
            for k in opt.params:
                arrays[f"opt.{name}.m.{k}"] = opt.m[k]
                arrays[f"opt.{name}.v.{k}"] = opt.v[k]
            meta_opt[name] = opt.t
        w = self.env.world
        arrays["env.raw_ranges"] = w.raw_ranges
        arrays["env.scans"] = w.scans
        for i, h in enumerate(self.env.histories):
            arrays[f"env.history.{i}"] = np.stack(list(h))
        agents = [{"x": a.pose.x, "y": a.pose.y, "heading": a.pose.heading, "goal": list(a.goal),
                   "v": a.linear_vel, "w": a.angular_vel, "radius": a.radius, "token": a.token,
                   "visible": a.visible, "alive": a.alive, "v_max": a.v_max, "w_max": a.w_max,
                   "steps": a.steps} for a in w.agents]
        meta = {"config": self.cfg.to_dict(), "update": self.update, "opt_steps": meta_opt,
                "rng": _rng_state(self.rng), "env_rng": _rng_state(self.env.rng),
                "env": {"agents": agents, "time": w.time, "step_count": w.step_count},
                "tokens": [int(z) for z in self.tokens], "outcomes": list(self.outcomes),
                "curves": self.curves}
        return nn.Checkpoint(self.cfg.M, self.nets.arch.to_dict(), arrays, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: nn.Checkpoint, cfg: TrainConfig | None = None) -> "Trainer":
        saved = TrainConfig.from_dict(ckpt.meta["config"])
        if cfg is None:
            cfg = saved
        tr = cls(cfg)
        if tr.nets.arch.to_dict() != ckpt.arch:
            raise nn.ShapeMismatchError("checkpoint architecture differs from the configured one")
        nn.load_into(tr.nets.named_params(), ckpt.arrays, "net.")
        for name, opt in (("pi", tr.opt_pi), ("v", tr.opt_v), ("sa", tr.opt_sa), ("s", tr.opt_s)):
            nn.load_into(opt.m, ckpt.arrays, f"opt.{name}.m.")
            nn.load_into(opt.v, ckpt.arrays, f"opt.{name}.v.")
            opt.t = ckpt.meta["opt_steps"][name]
        meta = ckpt.meta
        tr.update = meta["update"]
        tr.rng = _rng_from_state(meta["rng"])
        tr.env.rng = _rng_from_state(meta["env_rng"])
        w = tr.env.world
        w.rng = tr.env.rng
        w.agents = [AgentState(Pose(d["x"], d["y"], d["heading"]), goal=tuple(d["goal"]), linear_vel=d["v"],
                               angular_vel=d["w"], radius=d["radius"], token=d["token"], visible=d["visible"],
                               alive=d["alive"], v_max=d["v_max"], w_max=d["w_max"], steps=d["steps"])
                    for d in meta["env"]["agents"]]
        w.time = meta["env"]["time"]
        w.step_count = meta["env"]["step_count"]
        w.raw_ranges = ckpt.arrays["env.raw_ranges"].copy()
        w.scans = ckpt.arrays["env.scans"].copy()
        tr.env.histories = [deque(list(ckpt.arrays[f"env.history.{i}"].copy()), maxlen=cfg.k_frames)
                            for i in range(len(w.agents))]
        tr.tokens = np.array(meta["tokens"], dtype=np.int64)
        tr.outcomes = deque(meta["outcomes"], maxlen=100)
        tr.curves = [dict(r) for r in meta["curves"]]
        return tr


def write_curves(path, curves: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_FIELDS)
        for row in curves:
            w.writerow([row["update"]] + [f"{row[k]:.10g}" for k in CURVE_FIELDS[1:]])


def train(cfg: TrainConfig, out_dir: str | os.PathLike | None = None,
          resume: nn.Checkpoint | None = None, progress=None) -> tuple[nn.Checkpoint, list[dict]]:
    """Run ``cfg.total_updates`` updates (continuing from ``resume`` if given).

    With ``out_dir`` set, writes ``checkpoints/ckpt_XXXXX.bin`` every
    ``checkpoint_every`` updates, ``checkpoints/final.bin`` and ``curves.csv``.
    """
    tr = Trainer.from_checkpoint(resume, cfg) if resume is not None else Trainer(cfg)
    ck_dir = None
    if out_dir is not None:
        ck_dir = Path(out_dir) / "checkpoints"
        ck_dir.mkdir(parents=True, exist_ok=True)
    while tr.update < cfg.total_updates:
        row = tr.step()
        if progress is not None:
            progress(row)
        if ck_dir is not None and cfg.checkpoint_every and tr.update % cfg.checkpoint_every == 0:
            nn.save_checkpoint(ck_dir / f"ckpt_{tr.update:05d}.bin", tr.checkpoint())
    ckpt = tr.checkpoint()
    if out_dir is not None:
        nn.save_checkpoint(ck_dir / "final.bin", ckpt)
        write_curves(Path(out_dir) / "curves.csv", tr.curves)
    return ckpt, tr.curves


def networks_from_checkpoint(ckpt: nn.Checkpoint) -> nn.Networks:
    """Rebuild the four networks from a checkpoint (no optimizer or world state)."""
    arch = nn.Architecture.from_dict(ckpt.arch)
    if arch.n_tokens != ckpt.n_tokens:
        raise nn.ShapeMismatchError(f"header M={ckpt.n_tokens} but architecture M={arch.n_tokens}")
    nets = nn.Networks(arch, 0)
    nn.load_into(nets.named_params(), ckpt.arrays, "net.")
    return nets


def config_from_checkpoint(ckpt: nn.Checkpoint) -> TrainConfig:
    return TrainConfig.from_dict(ckpt.meta["config"])
