"""Train one configuration over several seeds and print the mean test metric.

    python scripts/run_seeds.py freesolv data/freesolv.csv --seeds 0 1 2 -- --lr 3e-3 --epochs 150
    python scripts/run_seeds.py clintox data/clintox.csv -- --undersample --lr 3e-3
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from toxseq.cli import main


def run(preset, data, seeds, extra, out_root):
    means = []
    per_task = {}
    for seed in seeds:
        out = Path(out_root) / f"{preset}-seed{seed}"
        code = main(["train", "--data", data, "--preset", preset, "--seed", str(seed), "--out", str(out), *extra])
        if code != 0:
            raise SystemExit(code)
        rep = json.loads((out / "report.json").read_text())
        means.append(rep["mean"])
        for t in rep["tasks"]:
            per_task.setdefault(t["name"], []).append(t["value"])
    return means, per_task


if __name__ == "__main__":
    argv = sys.argv[1:]
    extra = []
    if "--" in argv:
        k = argv.index("--")
        argv, extra = argv[:k], argv[k + 1 :]
    ap = argparse.ArgumentParser()
    ap.add_argument("preset")
    ap.add_argument("data")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out-root", default="runs")
    a = ap.parse_args(argv)
    means, per_task = run(a.preset, a.data, a.seeds, extra, a.out_root)
    for name, vals in per_task.items():
        print(f"{name:<14} " + "  ".join(f"{v:.4f}" for v in vals) + f"   mean {np.mean(vals):.4f}")
    print(f"overall mean over seeds {np.mean(means):.4f}")
