"""Summarize per-token paths from a ``divnav replay`` polyline CSV.

For each (episode, agent) polyline prints where it crossed the obstacle's
x coordinate, how far it travelled and how it ended, which is enough to see
whether different tokens pass the obstacle on different sides.

    python demos/path_summary.py runs/pipeline/paths/polylines.csv --obstacle-x 10 --center-y 10
"""

import argparse
import csv

import numpy as np


def crossing_y(xy: np.ndarray, x0: float):
    for (xa, ya), (xb, yb) in zip(xy[:-1], xy[1:]):
        if (xa - x0) * (xb - x0) <= 0 and xa != xb:
            return ya + (x0 - xa) * (yb - ya) / (xb - xa)
    return None


def main(args):
    with open(args.polylines) as fh:
        rows = list(csv.DictReader(fh))
    groups = {}
    for r in rows:
        groups.setdefault((int(r["episode_id"]), int(r["agent_id"])), []).append(
            (int(r["token"]), float(r["x"]), float(r["y"]), float(r["speed"])))
    if not groups:
        print("no polylines")
        return
    print(f"{'episode':>7} {'token':>5} {'steps':>5} {'length':>7} {'cross_y':>8} {'side':>6} {'mean_v':>6}")
    for (ep, agent), pts in sorted(groups.items()):
        arr = np.array([p[1:3] for p in pts])
        length = float(np.hypot(*np.diff(arr, axis=0).T).sum()) if len(arr) > 1 else 0.0
        cy = crossing_y(arr, args.obstacle_x)
        side = "-" if cy is None else ("left" if cy > args.center_y else "right")
        cys = "never" if cy is None else f"{cy:8.3f}"
        print(f"{ep:>7} {pts[0][0]:>5} {len(pts):>5} {length:7.2f} {cys:>8} {side:>6} "
              f"{np.mean([p[3] for p in pts]):6.3f}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("polylines")
    ap.add_argument("--obstacle-x", type=float, default=10.0)
    ap.add_argument("--center-y", type=float, default=10.0)
    main(ap.parse_args())
