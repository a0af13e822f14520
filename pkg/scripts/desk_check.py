"""Train the toy model with the desk config and compare edits with and
without the adapter plus bilateral inversion on the seeded eval clips.

    python scripts/desk_check.py [--config scripts/desk_config.txt] [--out runs/desk]
"""

import argparse
import copy
import time
from pathlib import Path

from vidadapt.ablation import eval_clips, evaluate
from vidadapt.config import load_config
from vidadapt.train import temporal_drop, train_driver

HERE = Path(__file__).resolve().parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(HERE / "desk_config.txt"))
    ap.add_argument("--out", default="runs/desk")
    args = ap.parse_args()

    cfg = load_config(args.config)
    out = Path(args.out)
    t0 = time.perf_counter()
    res = train_driver(cfg, out / "train")
    print(f"training: {time.perf_counter() - t0:.1f}s")
    early, late = temporal_drop(res.curve)
    print(f"temporal loss: {early:.4g} -> {late:.4g} ({1 - late / early:.0%} drop)")

    clips = eval_clips(cfg)
    with_arm, _ = evaluate(copy.deepcopy(res.parts), cfg, clips, filtered=True)
    without, _ = evaluate(copy.deepcopy(res.parts), cfg.replace(use_adapter=False), clips, filtered=False)
    (out / "with.csv").write_text(with_arm.to_csv())
    (out / "without.csv").write_text(without.to_csv())
    wins = sum(a["flicker"] < b["flicker"] for a, b in zip(with_arm.rows, without.rows))
    print("\nwith adapter + filter\n" + with_arm.render())
    print("\nwithout\n" + without.render())
    dpsnr = with_arm.aggregate()["psnr"] - without.aggregate()["psnr"]
    print(f"\nflicker wins {wins}/{len(clips)}, PSNR change {dpsnr:+.2f} dB")


if __name__ == "__main__":
    main()
