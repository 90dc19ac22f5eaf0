"""2D world for non-holonomic agents: kinematics, lidar, events and rewards.

All geometry is in meters and radians. A `World` is mutated in place by
`step_world`; every random draw goes through ``world.rng`` so that two worlds
created from the same seed evolve bit-identically.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

V_MAX = 1.0
W_MAX = 1.0
AGENT_RADIUS = 0.25
MIN_RANGE = 0.01


class SpawnError(RuntimeError):
    """Raised when rejection sampling cannot place agents or goals."""


def wrap_angle(a):
    """Wrap an angle (or array of angles) into (-pi, pi]."""
    return math.pi - (math.pi - a) % (2.0 * math.pi)


@dataclass
class Pose:
    x: float
    y: float
    heading: float = 0.0

    def __post_init__(self):
        self.x = float(self.x)
        self.y = float(self.y)
        self.heading = wrap_angle(float(self.heading))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass
class AgentState:
    pose: Pose
    goal: tuple[float, float] = (0.0, 0.0)
    linear_vel: float = 0.0
    angular_vel: float = 0.0
    radius: float = AGENT_RADIUS
    token: int = 0
    visible: bool = True
    alive: bool = True
    v_max: float = V_MAX
    w_max: float = W_MAX
    steps: int = 0

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    @property
    def velocity(self) -> np.ndarray:
        """World-frame velocity vector."""
        h = self.pose.heading
        return self.linear_vel * np.array([math.cos(h), math.sin(h)])

    def goal_distance(self) -> float:
        return math.hypot(self.goal[0] - self.pose.x, self.goal[1] - self.pose.y)


@dataclass(frozen=True)
class Circle:
    x: float
    y: float
    radius: float


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle."""
    xmin: float
    ymin: float
    xmax: float
    ymax: float


@dataclass(frozen=True)
class LidarConfig:
    n_beams: int = 512
    max_range: float = 10.0
    noise_std: float = 0.03


@dataclass(frozen=True)
class RewardConfig:
    r_goal: float = 15.0
    r_col: float = -15.0
    r_step: float = 2.5
    d_col: float = 0.5
    crash_range: float = 0.5

    def __post_init__(self):
        if not (self.r_goal > 0 and self.r_col < 0 and self.r_step > 0 and self.d_col > 0):
            raise ValueError("reward config requires r_goal > 0, r_col < 0, r_step > 0, d_col > 0")


@dataclass
class World:
    agents: list[AgentState]
    static_obstacles: list = field(default_factory=list)
    bounds: Rect | None = field(default_factory=lambda: Rect(0.0, 0.0, 20.0, 20.0))
    time: float = 0.0
    dt: float = 0.1
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    lidar: LidarConfig = field(default_factory=LidarConfig)
    max_steps: int = 200
    step_count: int = 0
    # last post-step ranges, shape (n_agents, n_beams); filled by `refresh_scans`
    raw_ranges: np.ndarray | None = None
    scans: np.ndarray | None = None


@dataclass
class LidarScan:
    ranges: np.ndarray
    max_range: float = 10.0

    @property
    def n_beams(self) -> int:
        return len(self.ranges)


@dataclass
class Observation:
    scan_stack: np.ndarray          # (k_frames, n_beams), ranges / max_range
    goal_polar: tuple[float, float]  # (distance, bearing in robot frame)
    own_vel: tuple[float, float]     # (linear, angular)

    def features(self, max_range: float = 10.0) -> np.ndarray:
        """Flat feature vector fed to the networks."""
        dist, bearing = self.goal_polar
        tail = [dist / max_range, math.sin(bearing), math.cos(bearing),
                self.own_vel[0], self.own_vel[1]]
        return np.concatenate([self.scan_stack.ravel(), tail])


N_TAIL_FEATURES = 5


def feature_dim(lidar: LidarConfig, k_frames: int) -> int:
    return k_frames * lidar.n_beams + N_TAIL_FEATURES


class AgentEvent(NamedTuple):
    reached_goal: bool
    collided: bool
    timed_out: bool

    @property
    def terminal(self) -> bool:
        return self.reached_goal or self.collided or self.timed_out


@dataclass
class StepEvents:
    reached_goal: np.ndarray
    collided: np.ndarray
    timed_out: np.ndarray

    def agent(self, i: int) -> AgentEvent:
        return AgentEvent(bool(self.reached_goal[i]), bool(self.collided[i]), bool(self.timed_out[i]))

    @property
    def terminal(self) -> np.ndarray:
        return self.reached_goal | self.collided | self.timed_out


# ----------------------------------------------------------------------------
# kinematics


def integrate_unicycle(pose: Pose, v: float, w: float, dt: float) -> Pose:
    """Endpoint of the constant-twist arc driven for ``dt`` seconds."""
    h = pose.heading
    if abs(w) < 1e-9:
        return Pose(pose.x + v * dt * math.cos(h), pose.y + v * dt * math.sin(h), h)
    # chord length 2 v/w sin(w dt / 2), along the mid-arc heading
    chord = v * dt * np.sinc(w * dt / (2.0 * math.pi))
    mid = h + 0.5 * w * dt
    return Pose(pose.x + chord * math.cos(mid), pose.y + chord * math.sin(mid), h + w * dt)


# ----------------------------------------------------------------------------
# lidar


def _ray_circle(ox, oy, dx, dy, cx, cy, r):
    """Distance along unit rays to circles; broadcasts. inf where missed."""
    fx = ox - cx
    fy = oy - cy
    b = fx * dx + fy * dy
    c = fx * fx + fy * fy - r * r
    disc = b * b - c
    with np.errstate(invalid="ignore"):
        t = -b - np.sqrt(disc)
    t = np.where((disc >= 0) & (t > 0), t, np.inf)
    return np.where(c <= 0, 0.0, t)


def _ray_rect(ox, oy, dx, dy, rect: Rect):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_x = 1.0 / dx
        inv_y = 1.0 / dy
        tx1 = (rect.xmin - ox) * inv_x
        tx2 = (rect.xmax - ox) * inv_x
        ty1 = (rect.ymin - oy) * inv_y
        ty2 = (rect.ymax - oy) * inv_y
    # rays parallel to a slab: inside -> (-inf, inf), outside -> empty
    par_x = dx == 0
    par_y = dy == 0
    in_x = (ox >= rect.xmin) & (ox <= rect.xmax)
    in_y = (oy >= rect.ymin) & (oy <= rect.ymax)
    txmin = np.where(par_x, np.where(in_x, -np.inf, np.inf), np.minimum(tx1, tx2))
    txmax = np.where(par_x, np.where(in_x, np.inf, -np.inf), np.maximum(tx1, tx2))
    tymin = np.where(par_y, np.where(in_y, -np.inf, np.inf), np.minimum(ty1, ty2))
    tymax = np.where(par_y, np.where(in_y, np.inf, -np.inf), np.maximum(ty1, ty2))
    tmin = np.maximum(txmin, tymin)
    tmax = np.minimum(txmax, tymax)
    hit = (tmax >= np.maximum(tmin, 0.0)) & (tmax > 0)
    return np.where(hit, np.maximum(tmin, 0.0), np.inf)


def _ray_bounds(ox, oy, dx, dy, b: Rect):
    """Distance from inside the room to its walls."""
    with np.errstate(divide="ignore"):
        tx = np.where(dx > 0, (b.xmax - ox) / dx, np.where(dx < 0, (b.xmin - ox) / dx, np.inf))
        ty = np.where(dy > 0, (b.ymax - oy) / dy, np.where(dy < 0, (b.ymin - oy) / dy, np.inf))
    return np.maximum(np.minimum(tx, ty), 0.0)


def raw_ranges(world: World, indices: Sequence[int] | None = None, n_beams: int | None = None,
               max_range: float | None = None) -> np.ndarray:
    """Noise-free ranges for the given agents, shape (len(indices), n_beams)."""
    n_beams = world.lidar.n_beams if n_beams is None else n_beams
    max_range = world.lidar.max_range if max_range is None else max_range
    if indices is None:
        indices = range(len(world.agents))
    indices = list(indices)
    poses = np.array([[world.agents[i].pose.x, world.agents[i].pose.y, world.agents[i].pose.heading]
                      for i in indices]).reshape(-1, 3)
    angles = poses[:, 2:3] + 2.0 * math.pi * np.arange(n_beams) / n_beams
    dx, dy = np.cos(angles), np.sin(angles)
    ox, oy = poses[:, 0:1], poses[:, 1:2]
    best = np.full(angles.shape, np.inf)

    # other agent discs: (A, n, C)
    targets = [j for j, a in enumerate(world.agents) if a.alive and a.visible]
    if targets:
        cx = np.array([world.agents[j].pose.x for j in targets])
        cy = np.array([world.agents[j].pose.y for j in targets])
        cr = np.array([world.agents[j].radius for j in targets])
        t = _ray_circle(ox[..., None], oy[..., None], dx[..., None], dy[..., None], cx, cy, cr)
        self_mask = np.array([[j == i for j in targets] for i in indices])
        t = np.where(self_mask[:, None, :], np.inf, t)
        best = np.minimum(best, t.min(axis=-1))
    for ob in world.static_obstacles:
        if isinstance(ob, Circle):
            best = np.minimum(best, _ray_circle(ox, oy, dx, dy, ob.x, ob.y, ob.radius))
        else:
            best = np.minimum(best, _ray_rect(ox, oy, dx, dy, ob))
    if world.bounds is not None:
        best = np.minimum(best, _ray_bounds(ox, oy, dx, dy, world.bounds))
    return np.clip(best, MIN_RANGE, max_range)


def add_noise(ranges: np.ndarray, noise_std: float, max_range: float, rng: np.random.Generator) -> np.ndarray:
    if noise_std <= 0:
        return ranges.copy()
    return np.clip(ranges + rng.normal(0.0, noise_std, ranges.shape), MIN_RANGE, max_range)


def lidar_scan(world: World, agent_index: int, n_beams: int | None = None, max_range: float | None = None,
               noise_std: float | None = None, rng: np.random.Generator | None = None) -> LidarScan:
    """360 degree scan; beam i points at heading + 2 pi i / n_beams."""
    max_range = world.lidar.max_range if max_range is None else max_range
    noise_std = world.lidar.noise_std if noise_std is None else noise_std
    rng = world.rng if rng is None else rng
    r = raw_ranges(world, [agent_index], n_beams, max_range)[0]
    return LidarScan(add_noise(r, noise_std, max_range, rng), max_range)


def refresh_scans(world: World) -> None:
    """Recompute every agent's noise-free and noisy ranges."""
    world.raw_ranges = raw_ranges(world)
    world.scans = add_noise(world.raw_ranges, world.lidar.noise_std, world.lidar.max_range, world.rng)


# ----------------------------------------------------------------------------
# stepping


def _disc_overlap(world: World, i: int) -> bool:
    a = world.agents[i]
    p = a.pose
    for j, b in enumerate(world.agents):
        if j != i and b.alive and math.hypot(p.x - b.pose.x, p.y - b.pose.y) < a.radius + b.radius:
            return True
    for ob in world.static_obstacles:
        if isinstance(ob, Circle):
            if math.hypot(p.x - ob.x, p.y - ob.y) < a.radius + ob.radius:
                return True
        else:
            qx = min(max(p.x, ob.xmin), ob.xmax)
            qy = min(max(p.y, ob.ymin), ob.ymax)
            if math.hypot(p.x - qx, p.y - qy) < a.radius:
                return True
    b = world.bounds
    if b is not None:
        if min(p.x - b.xmin, b.xmax - p.x, p.y - b.ymin, b.ymax - p.y) < a.radius:
            return True
    return False


def clamp_command(agent: AgentState, v: float, w: float) -> tuple[float, float]:
    return (min(max(v, 0.0), agent.v_max), min(max(w, -agent.w_max), agent.w_max))


def step_world(world: World, commands, reward_cfg: RewardConfig) -> tuple[World, StepEvents]:
    """Advance every alive agent by one ``dt`` and evaluate events.

    ``commands`` has one (v, w) row per agent (rows of dead agents are
    ignored). The world is updated in place and returned.
    """
    commands = np.asarray(commands, dtype=float)
    n = len(world.agents)
    if commands.shape != (n, 2):
        raise ValueError(f"expected commands of shape ({n}, 2), got {commands.shape}")
    for a, (v, w) in zip(world.agents, commands):
        if not a.alive:
            continue
        v, w = clamp_command(a, v, w)
        a.pose = integrate_unicycle(a.pose, v, w, world.dt)
        a.linear_vel, a.angular_vel = v, w
        a.steps += 1
    world.step_count += 1
    world.time = world.step_count * world.dt
    refresh_scans(world)

    reached = np.zeros(n, bool)
    collided = np.zeros(n, bool)
    timed_out = np.zeros(n, bool)
    for i, a in enumerate(world.agents):
        if not a.alive:
            continue
        if a.goal_distance() < reward_cfg.d_col:
            reached[i] = True
        elif world.raw_ranges[i].min() < reward_cfg.crash_range or _disc_overlap(world, i):
            collided[i] = True
        elif a.steps >= world.max_steps:
            timed_out[i] = True
    return world, StepEvents(reached, collided, timed_out)


def compute_reward(prev: AgentState | Pose, next: AgentState | Pose, event: AgentEvent,
                   cfg: RewardConfig, goal=None) -> float:
    """Task reward of one transition: goal bonus, crash penalty or progress."""
    if event.reached_goal:
        return cfg.r_goal
    if event.collided:
        return cfg.r_col
    if goal is None:
        goal = next.goal
    p0 = prev.pose if isinstance(prev, AgentState) else prev
    p1 = next.pose if isinstance(next, AgentState) else next
    d0 = math.hypot(p0.x - goal[0], p0.y - goal[1])
    d1 = math.hypot(p1.x - goal[0], p1.y - goal[1])
    return cfg.r_step * (d0 - d1)


# ----------------------------------------------------------------------------
# observations


def build_observation(scan_history: Sequence[LidarScan | np.ndarray], agent: AgentState,
                      k_frames: int = 3, max_range: float = 10.0) -> Observation:
    """Stack the last ``k_frames`` scans (oldest first) and express the goal in the robot frame."""
    if not scan_history:
        raise ValueError("scan history is empty")
    frames = [s.ranges if isinstance(s, LidarScan) else np.asarray(s) for s in scan_history][-k_frames:]
    frames = [frames[0]] * (k_frames - len(frames)) + frames
    stack = np.stack(frames) / max_range
    p = agent.pose
    gx, gy = agent.goal[0] - p.x, agent.goal[1] - p.y
    bearing = wrap_angle(math.atan2(gy, gx) - p.heading)
    return Observation(stack, (math.hypot(gx, gy), bearing), (agent.linear_vel, agent.angular_vel))


# ----------------------------------------------------------------------------
# spawning


@dataclass
class RoomConfig:
    """Geometry and sensing of one navigation room."""
    n_agents: int = 5
    width: float = 20.0
    height: float = 20.0
    margin: float = 1.0
    min_clearance: float = 1.5
    min_goal_distance: float = 10.0
    obstacles: tuple = ()
    lidar: LidarConfig = field(default_factory=LidarConfig)
    dt: float = 0.1
    max_steps: int = 200
    walls: bool = True

    @property
    def bounds(self) -> Rect:
        return Rect(0.0, 0.0, self.width, self.height)


MAX_SPAWN_ATTEMPTS = 10_000


def _clear_of_obstacles(x, y, obstacles, clearance) -> bool:
    for ob in obstacles:
        if isinstance(ob, Circle):
            if math.hypot(x - ob.x, y - ob.y) < ob.radius + clearance:
                return False
        else:
            qx = min(max(x, ob.xmin), ob.xmax)
            qy = min(max(y, ob.ymin), ob.ymax)
            if math.hypot(x - qx, y - qy) < clearance:
                return False
    return True


def _sample_point(room: RoomConfig, rng) -> tuple[float, float]:
    return (float(rng.uniform(room.margin, room.width - room.margin)),
            float(rng.uniform(room.margin, room.height - room.margin)))


def sample_start(room: RoomConfig, occupied: Sequence[tuple[float, float]], rng) -> tuple[float, float]:
    for _ in range(MAX_SPAWN_ATTEMPTS):
        x, y = _sample_point(room, rng)
        if all(math.hypot(x - ox, y - oy) >= room.min_clearance for ox, oy in occupied) \
                and _clear_of_obstacles(x, y, room.obstacles, 1.0):
            return x, y
    raise SpawnError(f"could not place agent after {MAX_SPAWN_ATTEMPTS} attempts")


def sample_goal(room: RoomConfig, start: tuple[float, float], rng) -> tuple[float, float]:
    for _ in range(MAX_SPAWN_ATTEMPTS):
        x, y = _sample_point(room, rng)
        if math.hypot(x - start[0], y - start[1]) >= room.min_goal_distance \
                and _clear_of_obstacles(x, y, room.obstacles, 0.5):
            return x, y
    raise SpawnError(f"could not place goal after {MAX_SPAWN_ATTEMPTS} attempts")


def spawn_episode(room: RoomConfig, rng: np.random.Generator) -> World:
    """Fresh world with agents at random clear positions and far-away goals."""
    agents = []
    occupied: list[tuple[float, float]] = []
    for _ in range(room.n_agents):
        start = sample_start(room, occupied, rng)
        goal = sample_goal(room, start, rng)
        occupied.append(start)
        agents.append(AgentState(Pose(*start, rng.uniform(-math.pi, math.pi)), goal=goal))
    world = World(agents, list(room.obstacles), room.bounds if room.walls else None,
                  dt=room.dt, rng=rng, lidar=room.lidar, max_steps=room.max_steps)
    refresh_scans(world)
    return world


def respawn_agent(world: World, i: int, room: RoomConfig, rng: np.random.Generator) -> None:
    """Place agent ``i`` at a new start with a new goal, keeping the others."""
    occupied = [(a.pose.x, a.pose.y) for j, a in enumerate(world.agents) if j != i and a.alive]
    start = sample_start(room, occupied, rng)
    a = world.agents[i]
    a.pose = Pose(*start, rng.uniform(-math.pi, math.pi))
    a.goal = sample_goal(room, start, rng)
    a.linear_vel = a.angular_vel = 0.0
    a.steps = 0
    a.alive = True


class NavEnv:
    """A world plus per-agent scan histories, the unit that rollouts drive."""

    def __init__(self, room: RoomConfig, reward_cfg: RewardConfig | None = None,
                 k_frames: int = 3, seed: int | np.random.Generator = 0):
        self.room = room
        self.reward_cfg = reward_cfg or RewardConfig()
        self.k_frames = k_frames
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.world: World | None = None
        self.histories: list[deque] = []

    @property
    def n_agents(self) -> int:
        return len(self.world.agents)

    def reset(self, world: World | None = None) -> World:
        self.world = spawn_episode(self.room, self.rng) if world is None else world
        if self.world.scans is None:
            refresh_scans(self.world)
        self.histories = [deque([s], maxlen=self.k_frames) for s in self.world.scans]
        return self.world

    def observe(self, i: int) -> Observation:
        return build_observation(self.histories[i], self.world.agents[i], self.k_frames,
                                 self.world.lidar.max_range)

    def features(self, indices: Sequence[int] | None = None) -> np.ndarray:
        if indices is None:
            indices = range(self.n_agents)
        mr = self.world.lidar.max_range
        return np.stack([self.observe(i).features(mr) for i in indices])

    def step(self, commands) -> tuple[np.ndarray, StepEvents]:
        """Step the world; returns per-agent task rewards and events."""
        prev = [Pose(a.pose.x, a.pose.y, a.pose.heading) for a in self.world.agents]
        _, events = step_world(self.world, commands, self.reward_cfg)
        rewards = np.zeros(self.n_agents)
        for i, a in enumerate(self.world.agents):
            if a.alive:
                rewards[i] = compute_reward(prev[i], a.pose, events.agent(i), self.reward_cfg, goal=a.goal)
                self.histories[i].append(self.world.scans[i])
        return rewards, events

    def respawn(self, i: int) -> None:
        respawn_agent(self.world, i, self.room, self.rng)
        r = raw_ranges(self.world, [i])
        self.world.raw_ranges[i] = r[0]
        self.world.scans[i] = add_noise(r, self.world.lidar.noise_std, self.world.lidar.max_range, self.rng)[0]
        self.histories[i] = deque([self.world.scans[i]], maxlen=self.k_frames)


# ----------------------------------------------------------------------------
# trajectory log

TRAJECTORY_FIELDS = ["episode_id", "t", "agent_id", "x", "y", "heading", "v", "w", "reward", "token", "event"]


def event_name(event: AgentEvent) -> str:
    if event.reached_goal:
        return "goal"
    if event.collided:
        return "collision"
    if event.timed_out:
        return "timeout"
    return ""


class TrajectoryLog:
    """CSV writer for one row per (step, agent)."""

    def __init__(self, fh):
        self._writer = csv.writer(fh, lineterminator="\n")
        self._writer.writerow(TRAJECTORY_FIELDS)

    def record(self, episode_id: int, world: World, rewards, events: StepEvents | None = None) -> None:
        for i, a in enumerate(world.agents):
            ev = event_name(events.agent(i)) if events is not None else ""
            self._writer.writerow([episode_id, f"{world.time:.6f}", i, f"{a.pose.x:.6f}", f"{a.pose.y:.6f}",
                                   f"{a.pose.heading:.6f}", f"{a.linear_vel:.6f}", f"{a.angular_vel:.6f}",
                                   f"{float(rewards[i]):.6f}", a.token, ev])
