"""A short end-to-end run you can watch finish in a few minutes.

Trains the self-supervised model and the plain baseline on the same small
synthetic set with the same seed, then prints mIoU and proxy FID for both
and renders the loss / FID / weight curves with the ``plot`` command. The
full desk-scale comparison (5000 steps, three seeds) lives in the
acceptance suite; expect much noisier numbers here.

    python demos/03_train_small.py [out_dir] [steps]
"""

import sys
from pathlib import Path

from sscpgan.cli import run_cli
from sscpgan.trainer import TrainConfig, read_metrics, train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 600

common = dict(dataset="synthetic://11/400", resolution=32, batch_size=16, total_steps=steps,
              eval_every=max(steps // 6, 1), checkpoint_every=steps, eval_size=200, seed=3,
              gen_width=8, disc_width=8, cache_dir=str(out / "cache"), runs_dir=str(out / "runs"))

for mode in ("ss-cpgan", "cpgan-baseline"):
    run = train(TrainConfig(mode=mode, name=mode, **common),
                progress=lambda r: r.proxy_fid is not None and print(
                    f"  [{mode}] step {r.step:5d}  L_D {r.L_D:.3f}  L_G {r.L_G:.3f}  "
                    f"weight {r.lam}  proxy FID {r.proxy_fid:.4f}  mIoU {r.miou:.3f}", flush=True))
    last = read_metrics(run / "metrics.csv")[-1]
    print(f"{mode}: final mIoU {float(last['miou']):.3f}, fg IoU {float(last['fg_iou']):.3f}, "
          f"degenerate {float(last['degenerate_frac']):.3f}")
    run_cli(["plot", "--metrics", str(run / "metrics.csv"), "--out", str(run / "curves.png")])
    print(f"  curves: {run / 'curves.png'}   samples: {run / 'samples'}")
