"""Acceptance criteria 1-9.

Each test prints one ``[criterion N] PASS|FAIL`` line. The desk-scale training
runs (diversity, no-intrinsic, single-token baseline, pedestrian pool) and the
suite results are cached under pytest's cache directory, keyed by the
configuration and a digest of the package sources, so a rerun of unchanged
code only re-scores them. Delete ``.pytest_cache`` to retrain from scratch.
"""

import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np
import pytest

import divnav
from divnav import nn
from divnav.cli import main
from divnav.evaluation import (SCENARIO_KINDS, ScenarioConfig, average_success, collect_probe, diversity_metric,
                               heldout_token_accuracy, run_episodes, run_suite, summarize)
from divnav.pedestrians import (SocialForcePedestrian, VOParams, VOPedestrian, half_plane_violation, orca_lines,
                                preferred_velocity, social_force_velocity, solve_velocity)
from divnav.sim import LidarConfig, RoomConfig, World, spawn_episode
from divnav.trainer import TrainConfig, config_from_checkpoint, gae, networks_from_checkpoint, train
from test_nn import SMALL, small_nets
from test_pedestrians import minmax_violation_oracle, moving, random_scene, rigid

SEEDS = (0, 1, 2)
# desk-scale configuration shared by every acceptance run
DESK = dict(N=4, M=4, n_beams=72, scan_hidden=(128, 64), head_hidden=64, total_updates=300, checkpoint_every=150,
            lr_ppo=1e-3, lr_disc=1e-3, batch_horizon=512, embed_init_std=1.0, policy_out_scale=1.0,
            log_std_init=-1.0)
FULL = dict(alpha=0.3)
NONE = dict(alpha=0.0)
SINGLE = dict(M=1, alpha=0.1, log_std_init=-0.5)
POOL_SEEDS = (100, 101, 102, 103)
SUITE_EPISODES = 100
SUITE_AGENTS = 5


def report(n, ok, detail):
    line = f"[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}"
    print(line)
    with open(Path(__file__).with_name("acceptance_summary.txt"), "a") as fh:
        fh.write(line + "\n")
    assert ok, line


@pytest.fixture(scope="session", autouse=True)
def _fresh_summary():
    Path(__file__).with_name("acceptance_summary.txt").write_text("")


# ----------------------------------------------------------------------------
# cached desk runs


def _code_digest(*modules) -> str:
    h = hashlib.sha256()
    root = Path(divnav.__file__).parent
    for m in modules:
        h.update((root / f"{m}.py").read_bytes())
    return h.hexdigest()[:16]


TRAIN_CODE = ("sim", "nn", "trainer")
EVAL_CODE = ("sim", "nn", "trainer", "pedestrians", "evaluation")


class DeskRuns:
    def __init__(self, cache_dir: Path):
        self.root = cache_dir

    def cfg(self, seed, extra) -> TrainConfig:
        return TrainConfig(**{**DESK, **extra, "seed": seed}).validate()

    def run(self, seed, extra) -> Path:
        cfg = self.cfg(seed, extra)
        key = hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]
        out = self.root / f"train_{_code_digest(*TRAIN_CODE)}_{key}"
        final = out / "checkpoints" / "final.bin"
        if not final.is_file():
            train(cfg, out)
        return out

    def nets(self, seed, extra, name="final.bin"):
        ck = nn.load_checkpoint(self.run(seed, extra) / "checkpoints" / name)
        return networks_from_checkpoint(ck), config_from_checkpoint(ck)

    def curves(self, seed, extra) -> list[dict]:
        with open(self.run(seed, extra) / "curves.csv") as fh:
            return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]

    def pool(self) -> list[str]:
        return [str(self.run(s, SINGLE) / "checkpoints" / "final.bin") for s in POOL_SEEDS]

    def suboptimal(self) -> str:
        return str(self.run(POOL_SEEDS[0], SINGLE) / "checkpoints" / "ckpt_00150.bin")

    def suite(self, seed, extra) -> list[dict]:
        ckpt = self.run(seed, extra) / "checkpoints" / "final.bin"
        parts = [nn.load_checkpoint(ckpt).to_bytes()] + [Path(p).read_bytes() for p in self.pool()]
        parts.append(Path(self.suboptimal()).read_bytes())
        h = hashlib.sha256(_code_digest(*EVAL_CODE).encode())
        for b in parts:
            h.update(b)
        path = self.root / f"suite_{h.hexdigest()[:16]}_{seed}_{SUITE_EPISODES}.json"
        if path.is_file():
            return json.loads(path.read_text())
        nets, cfg = self.nets(seed, extra)
        rows = run_suite(nets, SCENARIO_KINDS, SUITE_EPISODES, (seed,), SUITE_AGENTS, self.pool(), self.suboptimal(),
                         cfg)
        path.write_text(json.dumps(rows))
        return rows


@pytest.fixture(scope="session")
def desk(request):
    return DeskRuns(Path(request.config.cache.mkdir("divnav_desk")))


# ----------------------------------------------------------------------------
# 1. gradient correctness


def test_criterion_1_gradients():
    worst = {}

    def track(tag, params, grads, loss):
        for k, p in params.items():
            err = nn.max_relative_error(grads[k], nn.numerical_gradient(loss, p, h=1e-5))
            key = "embedding" if k.endswith("embedding") else tag
            worst[key] = max(worst.get(key, 0.0), err)

    for seed in range(3):
        nets, rng = small_nets(seed)
        x = rng.normal(size=(7, SMALL.feature_dim))
        z = rng.integers(0, SMALL.n_tokens, 7)
        a = rng.normal(size=(7, 2))
        target = rng.normal(size=7)

        def policy_loss():
            mean, std, _ = nets.policy.forward(x, z)
            return float(nn.gaussian_log_prob(a, mean, std).sum())

        mean, std, cache = nets.policy.forward(x, z)
        grads = nets.policy.backward(cache, (a - mean) / std ** 2, (((a - mean) / std) ** 2 - 1.0).sum(axis=0))
        track("policy", nets.policy.params, grads, policy_loss)

        def value_loss():
            v, _ = nets.value.forward(x, z)
            return float(((v - target) ** 2).mean())

        v, cache = nets.value.forward(x, z)
        track("value", nets.value.params, nets.value.backward(cache, 2.0 * (v - target) / len(v)), value_loss)

        for name in ("disc_s", "disc_sa"):
            disc = getattr(nets, name)
            xd = rng.normal(size=(9, disc.net.input_dim))
            y = rng.integers(0, SMALL.n_tokens, 9)
            track(name, disc.params, disc.cross_entropy(xd, y)[2], lambda d=disc, xd=xd, y=y: d.cross_entropy(xd, y)[0])
    ok = all(e < 1e-4 for e in worst.values())
    report(1, ok, "max relative error " + ", ".join(f"{k} {v:.1e}" for k, v in sorted(worst.items())))


# ----------------------------------------------------------------------------
# 2. GAE oracle


def _gae_double_sum(r, v, boot, gamma, lam, dones):
    T = len(r)
    vals = list(v) + [boot]
    delta = [r[t] + gamma * vals[t + 1] * (1 - dones[t]) - vals[t] for t in range(T)]
    out = []
    for t in range(T):
        total, alive = 0.0, 1.0
        for k in range(T - t):
            total += alive * (gamma * lam) ** k * delta[t + k]
            alive *= 1 - dones[t + k]
        out.append(total)
    return np.array(out)


def test_criterion_2_gae_oracle():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        T = int(rng.integers(1, 51))
        r, v = rng.normal(size=T), rng.normal(size=T)
        dones = (rng.random(T) < 0.15).astype(float)
        gamma, lam, boot = rng.uniform(0.5, 1.0), rng.uniform(0.5, 1.0), rng.normal()
        worst = max(worst, float(np.abs(gae(r, v, boot, gamma, lam, dones)
                                        - _gae_double_sum(r, v, boot, gamma, lam, dones)).max()))
    report(2, worst < 1e-10, f"max |GAE - double sum| = {worst:.2e} over 1000 trajectories")


# ----------------------------------------------------------------------------
# 3. single-token run


def test_criterion_3_single_token(desk):
    curves = desk.curves(0, SINGLE)
    late = [abs(r["mean_intrinsic_reward"]) for r in curves if r["update"] > 50]
    nets, cfg = desk.nets(0, SINGLE)
    probe = collect_probe(nets, cfg, 1000, seed=0)
    d = diversity_metric(nets, probe)
    ok = len(late) == len(curves) - 50 and max(late) < 0.05 and d == 0.0
    report(3, ok, f"max |intrinsic| after update 50 = {max(late):.2e}, D = {d}")


# ----------------------------------------------------------------------------
# 4. diversity effect


def test_criterion_4_diversity_effect(desk):
    lines, ok = [], True
    for s in SEEDS:
        base_nets, base_cfg = desk.nets(s, NONE)
        probe = collect_probe(base_nets, base_cfg, 1000, seed=1000 + s)
        full_nets, full_cfg = desk.nets(s, FULL)
        d_full, d_none = diversity_metric(full_nets, probe), diversity_metric(base_nets, probe)
        acc = heldout_token_accuracy(full_nets, full_cfg, 1000, seed=2000 + s)
        good = acc > 2 / full_cfg.M and d_full > 2 * d_none
        ok &= good
        lines.append(f"seed {s}: acc {acc:.3f} D(full) {d_full:.3f} D(none) {d_none:.3f}")
    report(4, ok, "; ".join(lines))


# ----------------------------------------------------------------------------
# 5. navigation competence


def test_criterion_5_navigation(desk):
    nets, cfg = desk.nets(0, SINGLE)
    res = run_episodes(nets, ScenarioConfig("EMPTY", 1, episodes=100, seed=0, goal_distance=10.0), train_cfg=cfg)
    s = summarize(res)
    finite = s.extra_time is not None and all(math.isfinite(x) for x in (*s.extra_time, *s.extra_distance))
    nonneg = finite and all(r.elapsed - r.straight_line >= -1e-9 and r.path_length - r.straight_line >= -1e-9
                            for r in res if r.success)
    ok = s.success_rate >= 0.9 and finite and nonneg
    detail = f"success {s.success_rate:.2f}"
    if finite:
        detail += f", extra time {s.extra_time[0]:.2f}s, extra distance {s.extra_distance[0]:.2f}m"
    report(5, ok, detail)


# ----------------------------------------------------------------------------
# 6. robustness ordering


def test_criterion_6_robustness(desk):
    lines, ok = [], True
    for s in SEEDS:
        div = average_success(desk.suite(s, FULL))
        base = average_success(desk.suite(s, SINGLE))
        ok &= div >= base
        lines.append(f"seed {s}: diversity {div:.3f} vs single-token {base:.3f}")
    report(6, ok, "; ".join(lines))


# ----------------------------------------------------------------------------
# 7. pedestrian models


def test_criterion_7_pedestrian_models():
    rng = np.random.default_rng(2025)
    params = VOParams()
    worst_feasible, feasible, infeasible_bad = 0.0, 0, 0
    for _ in range(1000):
        agents = random_scene(rng)
        lines = orca_lines(agents[0], agents[1:], params)
        v, ok = solve_velocity(lines, preferred_velocity(agents[0], params.max_speed), params.max_speed)
        worst = max((half_plane_violation(ln, v) for ln in lines), default=0.0)
        if ok:
            feasible += 1
            worst_feasible = max(worst_feasible, worst)
        elif worst > minmax_violation_oracle(lines, params.max_speed) + 1e-4:
            infeasible_bad += 1
    vo_ok = worst_feasible <= 1e-9 and infeasible_bad == 0

    mirror_err = equi_err = 0.0
    mirror = np.diag([1.0, -1.0])
    for _ in range(300):
        agents = random_scene(rng, 4)
        rot, shift = rng.uniform(-math.pi, math.pi), rng.uniform(-10, 10, 2)
        moved = [rigid(a, rot, shift)[0] for a in agents]
        R = rigid(agents[0], rot, shift)[1]
        flipped = [moving(a.pose.x, -a.pose.y, -a.pose.heading, a.linear_vel, (a.goal[0], -a.goal[1]),
                          -a.angular_vel) for a in agents]
        for i in range(len(agents)):
            u = social_force_velocity(agents[i], agents[:i] + agents[i + 1:])
            u_moved = social_force_velocity(moved[i], moved[:i] + moved[i + 1:])
            u_flip = social_force_velocity(flipped[i], flipped[:i] + flipped[i + 1:])
            scale = max(1.0, float(np.hypot(*u)))
            equi_err = max(equi_err, float(np.abs(R @ u - u_moved).max()) / scale)
            mirror_err = max(mirror_err, float(np.abs(mirror @ u - u_flip).max()) / scale)
    sf_ok = mirror_err <= 1e-9 and equi_err <= 1e-9

    changed = 0
    for seed in range(30):
        w = spawn_episode(RoomConfig(n_agents=5, lidar=LidarConfig(8)), np.random.default_rng(seed))
        w.agents[0].visible = False
        without = World(w.agents[1:], w.static_obstacles, w.bounds, lidar=w.lidar)
        for ctrl in (SocialForcePedestrian(), VOPedestrian()):
            changed += sum(ctrl.command(w, i) != ctrl.command(without, i - 1) for i in range(1, 5))
    ok = vo_ok and sf_ok and changed == 0
    report(7, ok, f"VO: {feasible}/1000 feasible, worst violation {worst_feasible:.1e}, "
                  f"{infeasible_bad} infeasible scenes above the LP bound; SF: mirror {mirror_err:.1e}, "
                  f"rigid {equi_err:.1e}; invisible agent changed {changed} pedestrian commands")


# ----------------------------------------------------------------------------
# 8. determinism


def test_criterion_8_determinism(tmp_path, monkeypatch):
    monkeypatch.setenv("DIVNAV_OUTPUT_ROOT", str(tmp_path))
    monkeypatch.chdir(tmp_path)
    desk_sets = []
    for k, v in {**DESK, **FULL, "total_updates": 3, "checkpoint_every": 2, "batch_horizon": 64}.items():
        v = ",".join(map(str, v)) + "," if isinstance(v, tuple) else v
        desk_sets += ["--set", f"{k}={v}"]
    for tag in ("a", "b"):
        assert main(["train", *desk_sets, "--out", f"train_{tag}"]) == 0
        # later commands get byte-identical arguments, so both read the first checkpoint
        ck = "train_a/checkpoints/final.bin"
        assert main(["eval", "--checkpoint", str(tmp_path / ck), "--kinds", "VO,SF", "--episodes", "3",
                     "--trajectories", "--out", f"eval_{tag}"]) == 0
        assert main(["diversity", "--checkpoint", str(tmp_path / ck), "--probe-checkpoint", str(tmp_path / ck),
                     "--probe-states", "100", "--out", f"div_{tag}"]) == 0
        assert main(["paths", "--checkpoint", str(tmp_path / ck), "--out", f"paths_{tag}"]) == 0
        assert main(["replay", "--log", str(tmp_path / f"paths_{tag}/logs/paths.csv"),
                     "--output", str(tmp_path / f"replay_{tag}.csv")]) == 0
    compared, diffs = 0, []
    for cmd in ("train", "eval", "div", "paths"):
        a = json.loads((tmp_path / f"{cmd}_a" / "manifest.json").read_text())["artifacts"]
        b = json.loads((tmp_path / f"{cmd}_b" / "manifest.json").read_text())["artifacts"]
        for rel in sorted(set(a) | set(b)):
            if rel.endswith(".log"):
                continue
            compared += 1
            if a.get(rel) != b.get(rel):
                diffs.append(f"{cmd}/{rel}")
    compared += 1
    if (tmp_path / "replay_a.csv").read_bytes() != (tmp_path / "replay_b.csv").read_bytes():
        diffs.append("replay")
    report(8, not diffs, f"{compared} artifacts compared across train/eval/diversity/paths/replay"
                         + (f"; differing: {diffs}" if diffs else ", all byte-identical"))


# ----------------------------------------------------------------------------
# 9. checkpoint resume


def test_criterion_9_resume(tmp_path):
    cfg = TrainConfig(**{**DESK, **FULL, "batch_horizon": 64, "total_updates": 13, "checkpoint_every": 0})
    straight, _ = train(cfg)
    first, _ = train(TrainConfig(**{**cfg.__dict__, "total_updates": 3}))
    nn.save_checkpoint(tmp_path / "mid.bin", first)
    resumed, _ = train(cfg, resume=nn.load_checkpoint(tmp_path / "mid.bin"))
    same_keys = straight.arrays.keys() == resumed.arrays.keys()
    mismatched = [k for k in straight.arrays if not np.array_equal(straight.arrays[k], resumed.arrays[k])]
    ok = same_keys and not mismatched and straight.to_bytes() == resumed.to_bytes()
    report(9, ok, f"{len(straight.arrays)} arrays after 3 + 10 updates vs 13 straight, "
                  f"{len(mismatched)} differ")
