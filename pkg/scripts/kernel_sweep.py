"""Kernel-size x inversion-step sweep with the analytic oracle denoiser.

Needs no training, so it runs in seconds; pass --trained to sweep a real
toy model instead (trains once, cached under the output directory).
"""

import argparse

from vidadapt.ablation import TrainingCache, preset_points, run_sweep
from vidadapt.config import RunConfig


def main():
    ap = argparse.ArgumentParser(description="kernel/step ablation")
    ap.add_argument("--out", default="runs/kernel_sweep")
    ap.add_argument("--clips", type=int, default=10)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--trained", action="store_true")
    args = ap.parse_args()

    cfg = RunConfig(
        mode="ablate",
        denoiser="trained" if args.trained else "oracle",
        eval_clips=args.clips,
        jobs=args.jobs,
        out=args.out,
    )
    res = run_sweep(cfg, preset_points("kernel"), args.out, TrainingCache(directory=f"{args.out}/cache"))
    print(res.summary_csv, end="")
    print("best:", {m: res.points[i] for m, i in res.best.items()})


if __name__ == "__main__":
    main()
