#!/usr/bin/env python3
"""Run the whole experiment grid into one output directory.

Synthesizes the pretraining cohort and the three downstream datasets,
pretrains all six ordering/encoding cells, evaluates them against the
baseline with bootstrapped AUROC/ECE and significance tests, emits the
projection coordinate files, and renders the combined report.

    python scripts/run_full_grid.py --out runs/full --seed 7
    python scripts/run_full_grid.py --out runs/quick --seed 7 --quick
"""

import argparse
import dataclasses
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from demrep import pipeline  # noqa: E402


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--config", type=Path, default=None)
    parser.add_argument("--quick", action="store_true",
                        help="shrink cohort/epochs for a fast smoke run")
    parser.add_argument("--skip-tsne", action="store_true")
    args = parser.parse_args()

    cfg = pipeline.load_config(args.config)
    cfg.master_seed = args.seed
    if args.quick:
        cfg.syngen.pretrain = dataclasses.replace(cfg.syngen.pretrain,
                                                  n_patients=400, visits_mean=6.0)
        cfg.syngen.overrides = {
            "pneumonia_like": {"n": 120, "n_noise_features": 10},
            "osteoporosis_like": {"n": 400, "n_noise_features": 6},
            "thyroid_like": {"n": 160, "n_noise_features": 8},
        }
        cfg.pretrain = dataclasses.replace(cfg.pretrain, epochs=6)

    out = args.out
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.time()
    print("== syngen")
    stats = pipeline.run_syngen(cfg, out)
    for name, st in stats.items():
        print(f"  {name}: n={st['n']} age {st['age_median']:.0f} "
              f"[{st['age_q1']:.0f}, {st['age_q3']:.0f}] "
              f"male {100 * st['male_fraction']:.2f}%")

    print("== pretrain (6 cells)")
    for cell, mse in pipeline.run_pretrain(cfg, out).items():
        print(f"  {cell}: held-out MSE {mse:.4f}")

    print("== downstream")
    for result in pipeline.run_downstream(cfg, out):
        base = result["cells"]["baseline"]["auroc"]["mean"]
        best = max((c["auroc"]["mean"], name)
                   for name, c in result["cells"].items())
        print(f"  {result['dataset']}: baseline AUROC {base:.3f}, "
              f"best {best[1]} {best[0]:.3f}")

    if not args.skip_tsne:
        print("== tsne")
        for path in pipeline.run_tsne(cfg, out):
            print(f"  {path}")

    print("== report")
    pipeline.run_report(cfg, out)
    print(f"done in {time.time() - t0:.0f}s -> {out / 'reports'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
