"""DLG on one image's gradient versus DLG on a client's whole FedAvg update.

    python demos/single_vs_fl.py [--dataset photo_patches] [--out demo_out]
"""

import argparse
from pathlib import Path

import numpy as np

from fedleak import inversion as inv
from fedleak.data import load_dataset
from fedleak.fl import FederatedSetup, FLConfig, client_update
from fedleak.harness import render_grid
from fedleak.metrics import match_reconstructions, to_unit_range
from fedleak.models import ArchitectureSpec, build_model, loss_and_param_grads


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--dataset", default="photo_patches")
    ap.add_argument("--out", default="demo_out")
    args = ap.parse_args()
    ds = load_dataset(args.dataset)
    ns = ds.norm_stats
    spec = ArchitectureSpec("cnn_small", ds.image_shape, ds.num_classes, activation="sigmoid")
    cfg = FLConfig(num_clients=100, batch_size=10, lr=0.1, seed=0)
    setup = FederatedSetup.build(ds, spec, cfg, max_test=100)
    sizes = [len(y) for y in setup.client_y]
    k = int(np.argsort(sizes, kind="stable")[len(sizes) // 2])
    p = build_model(spec, 0)
    X, Y = setup.client_x[k], setup.client_y[k]

    _, g = loss_and_param_grads(p, spec, X[:1], Y[:1])
    one = inv.attack_dlg(g, p, spec, inv.default_config("dlg", batch_size=1))
    upd = client_update(p, spec, X, Y, cfg, 0, k)
    many = inv.attack_dlg(upd, p, spec, inv.default_config("dlg"))

    def psnr(r, truth):
        return match_reconstructions(to_unit_range(r.images, ns), to_unit_range(truth, ns),
                                     with_ssim=False).mean_psnr

    print(f"client {k}: {len(Y)} images, {upd.meta.num_steps} local steps")
    print(f"one-image gradient  PSNR {psnr(one, X[:1]):6.2f} dB")
    print(f"whole update        PSNR {psnr(many, X):6.2f} dB (best match in the shard)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    render_grid(to_unit_range(many.images, ns), 1, 10, out / "dlg_update.png")
    render_grid(to_unit_range(one.images, ns), 1, 1, out / "dlg_single.png")
    print(f"grids written to {out}/")


if __name__ == "__main__":
    main()
