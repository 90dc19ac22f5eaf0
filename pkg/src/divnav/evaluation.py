"""Unseen-pedestrian scenarios, episode metrics and the action-diversity score."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .pedestrians import (SocialForceParams, SocialForcePedestrian, SpeedMultiplier, VOParams, VOPedestrian,
                          apply_speed_multiplier)
from .sim import (V_MAX, AgentState, Circle, LidarConfig, NavEnv, Pose, Rect, RewardConfig, RoomConfig, SpawnError,
                  TrajectoryLog, World, refresh_scans, sample_goal, sample_start, spawn_episode)
from .trainer import TrainConfig, config_from_checkpoint, networks_from_checkpoint

SCENARIO_KINDS = ("NH", "IN", "VA", "SO", "VO", "SF")
LEARNED_KINDS = ("NH", "IN", "VA")
# evaluated agent perceivable by pedestrians?
AGENT_VISIBLE = {"NH": True, "IN": False, "VA": False, "SO": True, "VO": False, "SF": False, "EMPTY": True}


class ScenarioError(ValueError):
    pass


class MissingArtifactError(FileNotFoundError):
    pass


@dataclass
class ScenarioConfig:
    kind: str
    n_agents: int = 5
    pedestrian_checkpoints: tuple = ()
    suboptimal_checkpoint: str | None = None
    episodes: int = 100
    seed: int = 0
    agent_token: int = 0
    agent_visible: bool | None = None
    goal_distance: float | None = None   # fixed start-goal distance for the evaluated agent
    sf_params: SocialForceParams = field(default_factory=SocialForceParams)
    vo_params: VOParams = field(default_factory=VOParams)

    def validate(self) -> "ScenarioConfig":
        if self.kind not in SCENARIO_KINDS + ("EMPTY",):
            raise ScenarioError(f"unknown scenario kind {self.kind!r}; expected one of {SCENARIO_KINDS}")
        if self.n_agents < 1 or (self.kind != "EMPTY" and self.n_agents < 2):
            raise ScenarioError(f"invalid number of agents {self.n_agents} for kind {self.kind}")
        if self.episodes < 1:
            raise ScenarioError("episodes must be >= 1")
        return self

    @property
    def visible(self) -> bool:
        return AGENT_VISIBLE[self.kind] if self.agent_visible is None else self.agent_visible


@dataclass
class EpisodeResult:
    success: bool
    outcome: str          # "goal" | "collision" | "timeout"
    elapsed: float
    path_length: float
    straight_line: float  # start-goal distance minus the goal radius

    @property
    def mean_speed(self) -> float:
        return self.path_length / self.elapsed if self.elapsed > 0 else 0.0


@dataclass
class MetricsSummary:
    episodes: int
    success_rate: float
    timeout_rate: float
    extra_time: tuple[float, float] | None
    extra_distance: tuple[float, float] | None
    average_speed: tuple[float, float] | None


# ----------------------------------------------------------------------------
# controllers


class PolicyController:
    """Runs a trained policy for one agent with a fixed token."""

    def __init__(self, nets: nn.Networks, token: int = 0, deterministic: bool = True):
        if not 0 <= token < nets.arch.n_tokens:
            raise ScenarioError(f"token {token} outside [0, {nets.arch.n_tokens})")
        self.nets = nets
        self.token = token
        self.deterministic = deterministic

    def reset(self, agent: AgentState, rng: np.random.Generator) -> None:
        agent.token = self.token

    def command(self, env: NavEnv, i: int, rng: np.random.Generator) -> tuple[float, float]:
        feats = env.observe(i).features(env.world.lidar.max_range)
        mean, std, _ = self.nets.policy.forward(feats, [self.token])
        if self.deterministic:
            return float(mean[0, 0]), float(mean[0, 1])
        act, _, _ = nn.sample_action(mean, std, rng)
        return float(act[0, 0]), float(act[0, 1])


class ModelPedestrian:
    """Adapter giving the model-based controllers the policy interface."""

    def __init__(self, inner):
        self.inner = inner

    def reset(self, agent, rng):
        agent.token = 0

    def command(self, env, i, rng):
        return self.inner.command(env.world, i)


class SpeedScaled:
    """Speed variability wrapper: one multiplier per episode."""

    def __init__(self, inner):
        self.inner = inner
        self.multiplier = SpeedMultiplier(1.0)

    def reset(self, agent, rng):
        self.inner.reset(agent, rng)
        self.multiplier = SpeedMultiplier.sample(rng)
        agent.v_max = V_MAX * self.multiplier.factor

    def command(self, env, i, rng):
        return apply_speed_multiplier(self.inner.command(env, i, rng), self.multiplier, V_MAX)


@dataclass
class Scenario:
    config: ScenarioConfig
    room: RoomConfig
    k_frames: int
    agent: PolicyController
    pedestrians: list


def _load_nets(path) -> tuple[nn.Networks, TrainConfig]:
    p = Path(path)
    if not p.is_file():
        raise MissingArtifactError(f"checkpoint not found: {p}")
    ckpt = nn.load_checkpoint(p)
    return networks_from_checkpoint(ckpt), config_from_checkpoint(ckpt)


def build_scenario(policy: nn.Networks | str | Path, cfg: ScenarioConfig,
                   train_cfg: TrainConfig | None = None) -> Scenario:
    """Attach the evaluated policy (agent 0, fixed token) and the kind's pedestrian controllers."""
    cfg.validate()
    if not isinstance(policy, nn.Networks):
        policy, train_cfg = _load_nets(policy)
    if train_cfg is None:
        raise ScenarioError("sensor settings unknown: pass the training config with in-memory networks")
    n_ped = cfg.n_agents - 1
    peds: list = []
    if cfg.kind in LEARNED_KINDS:
        paths = list(dict.fromkeys(cfg.pedestrian_checkpoints))
        if len(paths) < n_ped:
            raise ScenarioError(f"{cfg.kind} needs {n_ped} distinct pedestrian checkpoints, got {len(paths)}")
        for path in paths[:n_ped]:
            ctrl = PolicyController(_load_nets(path)[0], 0)
            peds.append(SpeedScaled(ctrl) if cfg.kind == "VA" else ctrl)
    elif cfg.kind == "SO":
        if not cfg.suboptimal_checkpoint:
            raise ScenarioError("SO needs a half-trained checkpoint")
        nets = _load_nets(cfg.suboptimal_checkpoint)[0]
        peds = [PolicyController(nets, 0) for _ in range(n_ped)]
    elif cfg.kind == "VO":
        peds = [ModelPedestrian(VOPedestrian(cfg.vo_params)) for _ in range(n_ped)]
    elif cfg.kind == "SF":
        peds = [ModelPedestrian(SocialForcePedestrian(cfg.sf_params)) for _ in range(n_ped)]
    room = train_cfg.room()
    room = RoomConfig(n_agents=cfg.n_agents, width=room.width, height=room.height, lidar=room.lidar,
                      max_steps=room.max_steps)
    return Scenario(cfg, room, train_cfg.k_frames, PolicyController(policy, cfg.agent_token), peds)


# ----------------------------------------------------------------------------
# episodes


def _place_fixed_goal(world, room: RoomConfig, distance: float, rng) -> None:
    a = world.agents[0]
    others = [(b.pose.x, b.pose.y) for b in world.agents[1:]]
    lo, hi_x, hi_y = room.margin, room.width - room.margin, room.height - room.margin
    for _ in range(10_000):
        x, y = sample_start(room, others, rng)
        ang = rng.uniform(-math.pi, math.pi)
        gx, gy = x + distance * math.cos(ang), y + distance * math.sin(ang)
        if lo <= gx <= hi_x and lo <= gy <= hi_y:
            a.pose = Pose(x, y, rng.uniform(-math.pi, math.pi))
            a.goal = (gx, gy)
            return
    raise SpawnError("could not place a fixed-distance goal")


def run_episode(scenario: Scenario, seed, episode_id: int = 0, log: TrajectoryLog | None = None,
                reward_cfg: RewardConfig | None = None) -> EpisodeResult:
    reward_cfg = reward_cfg or RewardConfig()
    rng = np.random.default_rng(seed)
    env = NavEnv(scenario.room, reward_cfg, scenario.k_frames, seed=rng)
    world = spawn_episode(scenario.room, rng)
    if scenario.config.goal_distance is not None:
        _place_fixed_goal(world, scenario.room, scenario.config.goal_distance, rng)
    agent = world.agents[0]
    agent.visible = scenario.config.visible
    scenario.agent.reset(agent, rng)
    for j, ped in enumerate(scenario.pedestrians, start=1):
        ped.reset(world.agents[j], rng)
    refresh_scans(world)
    env.reset(world)
    straight = max(agent.goal_distance() - reward_cfg.d_col, 0.0)
    path = 0.0
    n = len(world.agents)
    while True:
        cmds = np.zeros((n, 2))
        cmds[0] = scenario.agent.command(env, 0, rng)
        for j, ped in enumerate(scenario.pedestrians, start=1):
            cmds[j] = ped.command(env, j, rng)
        x0, y0 = agent.pose.x, agent.pose.y
        rewards, events = env.step(cmds)
        path += math.hypot(agent.pose.x - x0, agent.pose.y - y0)
        if log is not None:
            log.record(episode_id, world, rewards, events)
        ev = events.agent(0)
        if ev.terminal:
            outcome = "goal" if ev.reached_goal else "collision" if ev.collided else "timeout"
            return EpisodeResult(ev.reached_goal, outcome, agent.steps * world.dt, path, straight)
        for j in range(1, n):
            pe = events.agent(j)
            if pe.reached_goal or pe.timed_out:
                a = world.agents[j]
                a.goal = sample_goal(env.room, (a.pose.x, a.pose.y), rng)
                a.steps = 0
            elif pe.collided:
                keep_vmax = world.agents[j].v_max
                env.respawn(j)
                world.agents[j].v_max = keep_vmax


def _episode_seed(seed: int, k: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(k)])


def run_episodes(policy, scenario_cfg: ScenarioConfig, n_episodes: int | None = None,
                 train_cfg: TrainConfig | None = None, log: TrajectoryLog | None = None) -> list[EpisodeResult]:
    """Deterministic given ``scenario_cfg.seed``."""
    n_episodes = scenario_cfg.episodes if n_episodes is None else n_episodes
    if n_episodes < 1:
        raise ScenarioError("n_episodes must be >= 1")
    sc = policy if isinstance(policy, Scenario) else build_scenario(policy, scenario_cfg, train_cfg)
    return [run_episode(sc, _episode_seed(scenario_cfg.seed, k), k, log) for k in range(n_episodes)]


def _mean_std(x) -> tuple[float, float]:
    x = np.asarray(x, float)
    return float(x.mean()), float(x.std())


def summarize(results: Sequence[EpisodeResult], straight_line: Sequence[float] | None = None,
              v_max: float = V_MAX) -> MetricsSummary:
    """Success rate plus extra time/distance and speed over successful episodes."""
    if not results:
        raise ValueError("no episodes to summarize")
    if straight_line is None:
        straight_line = [r.straight_line for r in results]
    ok = [(r, d) for r, d in zip(results, straight_line) if r.success]
    n = len(results)
    timeouts = sum(r.outcome == "timeout" for r in results)
    if not ok:
        return MetricsSummary(n, 0.0, timeouts / n, None, None, None)
    return MetricsSummary(
        n, len(ok) / n, timeouts / n,
        _mean_std([r.elapsed - d / v_max for r, d in ok]),
        _mean_std([r.path_length - d for r, d in ok]),
        _mean_std([r.mean_speed for r, _ in ok]))


# ----------------------------------------------------------------------------
# diversity


def diversity_metric(policy: nn.PolicyNet | nn.Networks, probe_features: np.ndarray, M: int | None = None) -> float:
    """Mean KL between token-conditioned action distributions over probe states and ordered token pairs."""
    if isinstance(policy, nn.Networks):
        policy = policy.policy
    M = policy.arch.n_tokens if M is None else M
    if M != policy.arch.n_tokens:
        raise ValueError(f"M={M} but the policy has {policy.arch.n_tokens} tokens")
    probe_features = np.atleast_2d(probe_features)
    if len(probe_features) == 0:
        raise ValueError("empty probe trajectory")
    if M < 2:
        return 0.0
    T = len(probe_features)
    dists = [policy.forward(probe_features, np.full(T, z))[:2] for z in range(M)]
    total = 0.0
    for i in range(M):
        for j in range(M):
            if i != j:
                total += nn.gaussian_kl(dists[i][0], dists[i][1], dists[j][0], dists[j][1]).sum()
    return float(total / (T * M * (M - 1)))


def collect_probe(nets: nn.Networks, train_cfg: TrainConfig, n_states: int = 1000, seed: int = 0,
                  token: int = 0) -> np.ndarray:
    """Observation features of agent 0 while every agent follows ``nets`` (mean actions)."""
    rng = np.random.default_rng(seed)
    env = NavEnv(train_cfg.room(), RewardConfig(), train_cfg.k_frames, seed=rng)
    env.reset()
    n = env.n_agents
    tokens = np.full(n, token)
    out = []
    while len(out) < n_states:
        feats = env.features()
        out.append(feats[0])
        mean, _, _ = nets.policy.forward(feats, tokens)
        _, events = env.step(mean)
        for i in np.flatnonzero(events.terminal):
            env.respawn(int(i))
    return np.asarray(out)


def heldout_token_accuracy(nets: nn.Networks, train_cfg: TrainConfig, n_steps: int = 500,
                           seed: int = 0) -> float:
    """q_sa accuracy on a fresh stochastic rollout that was never used for training.

    Tokens are drawn uniformly per agent and redrawn on respawn, as during training.
    """
    rng = np.random.default_rng(seed)
    env = NavEnv(train_cfg.room(), RewardConfig(), train_cfg.k_frames, seed=rng)
    env.reset()
    M = nets.arch.n_tokens
    tokens = rng.integers(0, M, env.n_agents)
    xs, zs = [], []
    for _ in range(n_steps):
        feats = env.features()
        mean, std, _ = nets.policy.forward(feats, tokens)
        action, raw, _ = nn.sample_action(mean, std, rng)
        xs.append(np.concatenate([feats, raw], axis=1))
        zs.append(tokens.copy())
        _, events = env.step(action)
        for i in np.flatnonzero(events.terminal):
            env.respawn(int(i))
            tokens[i] = rng.integers(0, M)
    probs, _ = nets.disc_sa.forward(np.concatenate(xs))
    return float((probs.argmax(axis=1) == np.concatenate(zs)).mean())


def behavior_paths(nets: nn.Networks, train_cfg: TrainConfig, tokens: Sequence[int] | None = None,
                   start=(4.0, 10.0), goal=(16.0, 10.0), obstacle=Circle(10.0, 10.0, 0.5),
                   log: TrajectoryLog | None = None, seed: int = 0) -> list[np.ndarray]:
    """Drive one agent per token from a common start to a goal hidden behind an obstacle.

    Mean actions and a noise-free lidar, so any spread between the returned
    (x, y) paths comes from the token alone. Episode ``k`` of ``log`` is token
    ``tokens[k]``.
    """
    tokens = range(nets.arch.n_tokens) if tokens is None else tokens
    room = train_cfg.room()
    lidar = LidarConfig(room.lidar.n_beams, room.lidar.max_range, 0.0)
    room = RoomConfig(n_agents=1, width=room.width, height=room.height, lidar=lidar, max_steps=room.max_steps,
                      obstacles=(obstacle,))
    heading = math.atan2(goal[1] - start[1], goal[0] - start[0])
    paths = []
    for k, z in enumerate(tokens):
        env = NavEnv(room, RewardConfig(), train_cfg.k_frames, seed=np.random.default_rng(seed))
        world = World([AgentState(Pose(start[0], start[1], heading), goal=tuple(goal), token=int(z))],
                      [obstacle], Rect(0.0, 0.0, room.width, room.height), dt=room.dt, rng=env.rng,
                      lidar=lidar, max_steps=room.max_steps)
        refresh_scans(world)
        env.reset(world)
        ctrl = PolicyController(nets, int(z))
        pts = [(start[0], start[1])]
        while True:
            _, events = env.step(np.array([ctrl.command(env, 0, env.rng)]))
            a = world.agents[0]
            pts.append((a.pose.x, a.pose.y))
            if log is not None:
                log.record(k, world, [0.0], events)
            if events.terminal[0]:
                break
        paths.append(np.array(pts))
    return paths


def save_probe(path, features: np.ndarray) -> None:
    np.save(path, np.ascontiguousarray(features, dtype="<f8"), allow_pickle=False)


def load_probe(path) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise MissingArtifactError(f"probe file not found: {p}")
    return np.load(p, allow_pickle=False)


# ----------------------------------------------------------------------------
# suite

RESULT_FIELDS = ["kind", "seed", "episodes", "success_rate", "extra_time_mean", "extra_time_std",
                 "extra_dist_mean", "extra_dist_std", "avg_speed_mean", "avg_speed_std", "timeout_rate"]


def summary_row(kind: str, seed: int, s: MetricsSummary) -> dict:
    def pair(x):
        return (None, None) if x is None else x
    (etm, ets), (edm, eds), (asm, ass) = pair(s.extra_time), pair(s.extra_distance), pair(s.average_speed)
    return {"kind": kind, "seed": seed, "episodes": s.episodes, "success_rate": s.success_rate,
            "extra_time_mean": etm, "extra_time_std": ets, "extra_dist_mean": edm, "extra_dist_std": eds,
            "avg_speed_mean": asm, "avg_speed_std": ass, "timeout_rate": s.timeout_rate}


EPISODE_FIELDS = ["kind", "seed", "episode", "outcome", "elapsed", "path_length", "straight_line"]


def run_suite(policy, kinds: Sequence[str] = SCENARIO_KINDS, n_episodes: int = 100, seeds: Sequence[int] = (0,),
              n_agents: int = 5, pedestrian_checkpoints: Sequence = (), suboptimal_checkpoint=None,
              train_cfg: TrainConfig | None = None, episode_log: list | None = None,
              trajectory_dir: str | Path | None = None) -> list[dict]:
    """One summary row per (kind, seed).

    ``episode_log`` collects one dict per episode; ``trajectory_dir`` gets a
    full per-step CSV for every (kind, seed).
    """
    if not isinstance(policy, nn.Networks):
        policy, train_cfg = _load_nets(policy)
    rows = []
    for seed in seeds:
        for kind in kinds:
            sc_cfg = ScenarioConfig(kind, n_agents, tuple(pedestrian_checkpoints), suboptimal_checkpoint,
                                    n_episodes, seed)
            if trajectory_dir is not None:
                with open(Path(trajectory_dir) / f"traj_{kind}_seed{seed}.csv", "w", newline="") as fh:
                    results = run_episodes(policy, sc_cfg, n_episodes, train_cfg, TrajectoryLog(fh))
            else:
                results = run_episodes(policy, sc_cfg, n_episodes, train_cfg)
            if episode_log is not None:
                episode_log.extend({"kind": kind, "seed": seed, "episode": k, "outcome": r.outcome,
                                    "elapsed": r.elapsed, "path_length": r.path_length,
                                    "straight_line": r.straight_line} for k, r in enumerate(results))
            rows.append(summary_row(kind, seed, summarize(results)))
    return rows


def average_success(rows: Sequence[dict], seed: int | None = None) -> float:
    sel = [r["success_rate"] for r in rows if seed is None or r["seed"] == seed]
    return float(np.mean(sel))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_results(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_FIELDS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in RESULT_FIELDS])


def write_episodes(path, records: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EPISODE_FIELDS)
        for r in records:
            w.writerow([_fmt(r[k]) for k in EPISODE_FIELDS])


def write_diversity(path, rows: Sequence[tuple[str, int, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy_id", "M", "D"])
        for pid, m, d in rows:
            w.writerow([pid, m, f"{d:.6f}"])
