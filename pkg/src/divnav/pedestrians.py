"""Non-learning pedestrian controllers and the scenario wrappers around them.

Both controllers first compute a holonomic desired velocity in the world frame
and then project it onto a unicycle command by steering toward it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .sim import AgentState, Circle, Rect, World, wrap_angle

RVO_EPSILON = 1e-5


@dataclass(frozen=True)
class SocialForceParams:
    relaxation_time: float = 0.5
    desired_speed: float = 1.0
    interaction_strength: float = 2.0
    interaction_range: float = 0.3
    obstacle_strength: float = 2.0
    obstacle_range: float = 0.3
    dt: float = 0.1
    steering_gain: float = 2.0

    def __post_init__(self):
        for name in ("relaxation_time", "desired_speed", "interaction_strength", "interaction_range",
                     "obstacle_strength", "obstacle_range", "dt", "steering_gain"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class VOParams:
    time_horizon: float = 2.0
    neighbor_radius: float = 5.0
    max_speed: float = 1.0
    dt: float = 0.1
    steering_gain: float = 2.0

    def __post_init__(self):
        for name in ("time_horizon", "neighbor_radius", "max_speed", "dt", "steering_gain"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class SpeedMultiplier:
    factor: float

    def __post_init__(self):
        if not 0.5 <= self.factor <= 1.5:
            raise ValueError("speed multiplier must lie in [0.5, 1.5]")

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "SpeedMultiplier":
        return cls(float(rng.uniform(0.5, 1.5)))


def velocity_to_command(desired: np.ndarray, agent: AgentState, gain: float) -> tuple[float, float]:
    """Steer toward a world-frame velocity: w follows the bearing error, v its projection."""
    speed = float(np.hypot(desired[0], desired[1]))
    if speed < 1e-12:
        return 0.0, 0.0
    err = wrap_angle(math.atan2(desired[1], desired[0]) - agent.pose.heading)
    v = min(max(speed * math.cos(err), 0.0), agent.v_max)
    w = min(max(gain * err, -agent.w_max), agent.w_max)
    return v, w


def filter_visible(world: World, observer_index: int) -> list[AgentState]:
    """Alive agents other than the observer that the observer can perceive."""
    return [a for j, a in enumerate(world.agents)
            if j != observer_index and a.alive and a.visible]


def apply_speed_multiplier(command: tuple[float, float], m: SpeedMultiplier,
                           v_max: float = 1.0) -> tuple[float, float]:
    v, w = command
    return min(max(v * m.factor, 0.0), v_max * 1.5), w


# ----------------------------------------------------------------------------
# social force


def _random_unit(rng: np.random.Generator | None) -> np.ndarray:
    a = (rng if rng is not None else np.random.default_rng(0)).uniform(-math.pi, math.pi)
    return np.array([math.cos(a), math.sin(a)])


def _repulsion(sep: np.ndarray, reach: float, strength: float, rng_range: float, rng) -> np.ndarray:
    d = float(np.hypot(sep[0], sep[1]))
    n = sep / d if d > 0 else _random_unit(rng)
    return strength * math.exp((reach - d) / rng_range) * n


def social_force(agent: AgentState, neighbors: Sequence[AgentState], obstacles: Sequence = (),
                 params: SocialForceParams = SocialForceParams(), bounds: Rect | None = None,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Total acceleration acting on ``agent`` (m/s^2, world frame)."""
    p = agent.pose.xy
    to_goal = np.asarray(agent.goal, float) - p
    dist = float(np.hypot(*to_goal))
    e = to_goal / dist if dist > 0 else np.zeros(2)
    force = (params.desired_speed * e - agent.velocity) / params.relaxation_time
    for nb in neighbors:
        force += _repulsion(p - nb.pose.xy, agent.radius + nb.radius,
                            params.interaction_strength, params.interaction_range, rng)
    for ob in obstacles:
        if isinstance(ob, Circle):
            sep, reach = p - np.array([ob.x, ob.y]), agent.radius + ob.radius
        else:
            q = np.array([min(max(p[0], ob.xmin), ob.xmax), min(max(p[1], ob.ymin), ob.ymax)])
            sep, reach = p - q, agent.radius
        force += _repulsion(sep, reach, params.obstacle_strength, params.obstacle_range, rng)
    if bounds is not None:
        for sep in (np.array([p[0] - bounds.xmin, 0.0]), np.array([p[0] - bounds.xmax, 0.0]),
                    np.array([0.0, p[1] - bounds.ymin]), np.array([0.0, p[1] - bounds.ymax])):
            force += _repulsion(sep, agent.radius, params.obstacle_strength, params.obstacle_range, rng)
    return force


def social_force_velocity(agent, neighbors, obstacles=(), params=SocialForceParams(), bounds=None, rng=None):
    """Desired velocity after integrating the social force over one step."""
    return agent.velocity + params.dt * social_force(agent, neighbors, obstacles, params, bounds, rng)


def social_force_command(agent: AgentState, neighbors: Sequence[AgentState], obstacles: Sequence = (),
                         params: SocialForceParams = SocialForceParams(), bounds: Rect | None = None,
                         rng: np.random.Generator | None = None) -> tuple[float, float]:
    u = social_force_velocity(agent, neighbors, obstacles, params, bounds, rng)
    return velocity_to_command(u, agent, params.steering_gain)


# ----------------------------------------------------------------------------
# reciprocal velocity obstacles


class Line(NamedTuple):
    """Directed line; the permitted half-plane lies to its left."""
    point: np.ndarray
    direction: np.ndarray


def _det(a, b) -> float:
    return a[0] * b[1] - a[1] * b[0]


def half_plane_violation(line: Line, v: np.ndarray) -> float:
    """Signed distance of ``v`` into the forbidden side (positive = violated)."""
    return _det(line.direction, line.point - v)


def orca_lines(agent: AgentState, neighbors: Sequence[AgentState], params: VOParams) -> list[Line]:
    """One reciprocal half-plane per neighbor within ``neighbor_radius``."""
    inv_th = 1.0 / params.time_horizon
    p, vel = agent.pose.xy, agent.velocity
    lines = []
    for nb in neighbors:
        rel_pos = nb.pose.xy - p
        dist_sq = float(rel_pos @ rel_pos)
        if dist_sq > params.neighbor_radius ** 2:
            continue
        rel_vel = vel - nb.velocity
        r = agent.radius + nb.radius
        r_sq = r * r
        if math.sqrt(dist_sq) - r > params.time_horizon * (params.max_speed + float(np.hypot(*nb.velocity))):
            # no reachable relative velocity enters the truncated cone
            continue
        if dist_sq > r_sq:
            w = rel_vel - inv_th * rel_pos
            w_len_sq = float(w @ w)
            dot1 = float(w @ rel_pos)
            if dot1 < 0.0 and dot1 * dot1 > r_sq * w_len_sq:
                # closest point lies on the cut-off circle
                w_len = math.sqrt(w_len_sq)
                unit_w = w / w_len
                direction = np.array([unit_w[1], -unit_w[0]])
                u = (r * inv_th - w_len) * unit_w
            else:
                leg = math.sqrt(dist_sq - r_sq)
                if _det(rel_pos, w) > 0.0:
                    direction = np.array([rel_pos[0] * leg - rel_pos[1] * r,
                                          rel_pos[0] * r + rel_pos[1] * leg]) / dist_sq
                else:
                    direction = -np.array([rel_pos[0] * leg + rel_pos[1] * r,
                                           -rel_pos[0] * r + rel_pos[1] * leg]) / dist_sq
                u = float(rel_vel @ direction) * direction - rel_vel
        else:
            # already overlapping: resolve within one step
            inv_dt = 1.0 / params.dt
            w = rel_vel - inv_dt * rel_pos
            w_len = float(np.hypot(*w))
            unit_w = w / w_len if w_len > 0 else np.array([1.0, 0.0])
            direction = np.array([unit_w[1], -unit_w[0]])
            u = (r * inv_dt - w_len) * unit_w
        lines.append(Line(vel + 0.5 * u, direction))
    return lines


def _lp1(lines, no, radius, opt, direction_opt):
    line = lines[no]
    dot = float(line.point @ line.direction)
    disc = dot * dot + radius * radius - float(line.point @ line.point)
    if disc < 0.0:
        return None
    s = math.sqrt(disc)
    t_left, t_right = -dot - s, -dot + s
    for i in range(no):
        denom = _det(line.direction, lines[i].direction)
        numer = _det(lines[i].direction, line.point - lines[i].point)
        if abs(denom) <= RVO_EPSILON:
            if numer < 0.0:
                return None
            continue
        t = numer / denom
        if denom >= 0.0:
            t_right = min(t_right, t)
        else:
            t_left = max(t_left, t)
        if t_left > t_right:
            return None
    if direction_opt:
        t = t_right if float(opt @ line.direction) > 0.0 else t_left
    else:
        t = min(max(float(line.direction @ (opt - line.point)), t_left), t_right)
    return line.point + t * line.direction


def _lp2(lines, radius, opt, direction_opt):
    if direction_opt:
        result = opt * radius
    elif float(opt @ opt) > radius * radius:
        result = opt / np.hypot(*opt) * radius
    else:
        result = opt.copy()
    for i, line in enumerate(lines):
        if _det(line.direction, line.point - result) > 0.0:
            new = _lp1(lines, i, radius, opt, direction_opt)
            if new is None:
                return i, result
            result = new
    return len(lines), result


def _lp3(lines, begin, radius, result):
    distance = 0.0
    for i in range(begin, len(lines)):
        li = lines[i]
        if _det(li.direction, li.point - result) > distance:
            proj = []
            for j in range(i):
                lj = lines[j]
                denom = _det(li.direction, lj.direction)
                if abs(denom) <= RVO_EPSILON:
                    if float(li.direction @ lj.direction) > 0.0:
                        continue
                    point = 0.5 * (li.point + lj.point)
                else:
                    point = li.point + (_det(lj.direction, li.point - lj.point) / denom) * li.direction
                d = lj.direction - li.direction
                proj.append(Line(point, d / np.hypot(*d)))
            fail, new = _lp2(proj, radius, np.array([-li.direction[1], li.direction[0]]), True)
            if fail == len(proj):
                result = new
            distance = _det(li.direction, li.point - result)
    return result


def solve_velocity(lines: Sequence[Line], preferred: np.ndarray, max_speed: float) -> tuple[np.ndarray, bool]:
    """Velocity in the speed disc closest to ``preferred`` satisfying every half-plane.

    When the half-planes have no common point inside the disc, returns the
    velocity minimizing the largest violation instead; the flag reports which.
    """
    fail, result = _lp2(list(lines), max_speed, np.asarray(preferred, float), False)
    if fail < len(lines):
        return _lp3(list(lines), fail, max_speed, result), False
    return result, True


def preferred_velocity(agent: AgentState, max_speed: float) -> np.ndarray:
    to_goal = np.asarray(agent.goal, float) - agent.pose.xy
    d = float(np.hypot(*to_goal))
    return to_goal / d * max_speed if d > 0 else np.zeros(2)


def vo_velocity(agent: AgentState, neighbors: Sequence[AgentState], params: VOParams = VOParams()):
    lines = orca_lines(agent, neighbors, params)
    v, _ = solve_velocity(lines, preferred_velocity(agent, params.max_speed), params.max_speed)
    return v


def vo_command(agent: AgentState, neighbors: Sequence[AgentState],
               params: VOParams = VOParams()) -> tuple[float, float]:
    return velocity_to_command(vo_velocity(agent, neighbors, params), agent, params.steering_gain)


# ----------------------------------------------------------------------------
# controllers bound to a world


class SocialForcePedestrian:
    def __init__(self, params: SocialForceParams = SocialForceParams()):
        self.params = params

    def reset(self, rng):
        pass

    def command(self, world: World, i: int) -> tuple[float, float]:
        return social_force_command(world.agents[i], filter_visible(world, i), world.static_obstacles,
                                    self.params, world.bounds, world.rng)


class VOPedestrian:
    def __init__(self, params: VOParams = VOParams()):
        self.params = params

    def reset(self, rng):
        pass

    def command(self, world: World, i: int) -> tuple[float, float]:
        return vo_command(world.agents[i], filter_visible(world, i), self.params)
