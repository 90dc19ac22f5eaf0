"""Train, evaluate, measure diversity and export behavior paths in one go.

    python demos/pipeline.py --quick            # seconds, tiny networks
    python demos/pipeline.py                    # desk scale, roughly an hour

Everything lands under --out (default runs/pipeline). Each step is a plain
``divnav`` command, so any of them can be rerun by hand from the printed argv.
"""

import argparse
import csv
import sys
from pathlib import Path

from divnav.cli import main

HERE = Path(__file__).resolve().parent


def run(argv):
    print("$ divnav " + " ".join(argv), flush=True)
    code = main(argv)
    if code != 0:
        sys.exit(code)


def final(out: Path, name: str) -> str:
    return str(out / name / "checkpoints" / "final.bin")


def main_(args):
    out = Path(args.out).resolve()
    cfg = str(HERE / ("quick.ini" if args.quick else "desk.ini"))
    episodes = "5" if args.quick else "100"

    # pedestrian pool: single-token policies with distinct seeds
    for k in range(4):
        run(["train", "--config", cfg, "--set", "M=1", "--set", "alpha=0.1", "--set", f"seed={100 + k}",
             "--out", str(out / f"ped{k}")])
    run(["train", "--config", cfg, "--set", "alpha=0", "--out", str(out / "no_intrinsic")])
    run(["train", "--config", cfg, "--out", str(out / "diverse")])

    half = sorted((out / "ped0" / "checkpoints").glob("ckpt_*.bin"))[0]
    suite = out / "suite.ini"
    suite.write_text("[scenario]\nkinds = NH, IN, VA, SO, VO, SF\nn_agents = 5\nseeds = 0\n"
                     f"episodes = {episodes}\n"
                     f"pedestrian_checkpoints = {', '.join(final(out, f'ped{k}') for k in range(4))}\n"
                     f"suboptimal_checkpoint = {half}\n")
    run(["eval", "--checkpoint", final(out, "diverse"), "--scenario", str(suite), "--out", str(out / "eval")])
    run(["diversity", "--checkpoint", final(out, "diverse"), "--checkpoint", final(out, "no_intrinsic"),
         "--probe-checkpoint", final(out, "no_intrinsic"), "--out", str(out / "diversity")])
    run(["paths", "--checkpoint", final(out, "diverse"), "--out", str(out / "paths")])
    run(["replay", "--log", str(out / "paths" / "logs" / "paths.csv"), "--output", str(out / "paths" / "polylines.csv")])

    with open(out / "eval" / "results.csv") as fh:
        rows = list(csv.DictReader(fh))
    print("\nsuccess rate per scenario:")
    for r in rows:
        print(f"  {r['kind']}: {float(r['success_rate']):.2f}")
    print(f"  average: {sum(float(r['success_rate']) for r in rows) / len(rows):.2f}")
    with open(out / "diversity" / "diversity.csv") as fh:
        for r in csv.DictReader(fh):
            print(f"D = {float(r['D']):.4f}  ({Path(r['policy_id']).parent.parent.name})")
    print(f"per-token paths: {out / 'paths' / 'polylines.csv'} (see demos/path_summary.py)")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--quick", action="store_true", help="tiny networks, a few updates")
    ap.add_argument("--out", default="runs/pipeline")
    main_(ap.parse_args())
