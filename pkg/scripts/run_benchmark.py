"""Synthetic benchmark: supervised vs a semi-supervised method, 5-fold CV, several seeds.

    python scripts/run_benchmark.py --seeds 0 1 2 --method mean_teacher --out bench/
"""
import argparse
import json
import logging
import statistics
import time
from pathlib import Path

from veinseg.experiment import benchmark_config, run_benchmark
from veinseg.metrics import write_summary_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--method", default="mean_teacher")
    ap.add_argument("--semi-epochs", type=int, default=None)
    ap.add_argument("--out", type=Path, default=Path("bench"))
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    overrides = {} if args.semi_epochs is None else {"semi_epochs": args.semi_epochs}
    cfg = benchmark_config(**overrides)
    t0 = time.perf_counter()
    runs = run_benchmark(args.seeds, args.data_seed, args.method, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    gains = []
    for run in runs:
        write_summary_csv(args.out / f"summary_seed{run.seed}.csv", run.reports)
        sup, semi = run.mean_dsc("supervised"), run.mean_dsc(args.method)
        gains.append(semi - sup)
        print(f"seed {run.seed}: supervised {sup:.4f}  {args.method} {semi:.4f}  "
              f"gain {semi - sup:+.4f}  ({run.seconds:.0f} s)")
    total = time.perf_counter() - t0
    print(f"median gain {statistics.median(gains):+.4f}, total {total:.0f} s")
    (args.out / "benchmark.json").write_text(json.dumps(
        {"seeds": args.seeds, "method": args.method, "gains": gains, "seconds": total,
         "config": cfg.to_dict()}, indent=2))


if __name__ == "__main__":
    main()
