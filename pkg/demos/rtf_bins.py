"""Imprint-module recovery on a single step and on a multi-step local update.

Counts how many client images come back pixel-exact (per-pixel MSE < 1e-4).

    python demos/rtf_bins.py [--dataset photo_patches] [--epochs 1 5]
"""

import argparse

import numpy as np
import torch

from fedleak import analytic
from fedleak.data import load_dataset
from fedleak.fl import FederatedSetup, FLConfig, client_update
from fedleak.models import ArchitectureSpec, build_model


def exact(rec, X, tol=1e-4):
    d = torch.cdist(X.flatten(1).double(), rec.images.flatten(1).double()) ** 2 / X[0].numel()
    return int((d.min(1).values < tol).sum())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--dataset", default="photo_patches")
    ap.add_argument("--bins", type=int, default=100)
    ap.add_argument("--epochs", type=int, nargs="+", default=[1, 5])
    args = ap.parse_args()
    ds = load_dataset(args.dataset)
    spec = ArchitectureSpec("imprint", ds.image_shape, ds.num_classes, backbone="cnn_small",
                            imprint_bins=args.bins)
    setup = FederatedSetup.build(ds, spec, FLConfig(num_clients=100, seed=0), max_test=500)
    p = build_model(spec, 0)
    block = analytic.build_imprint(args.bins, spec.input_dim, analytic.brightness_stats(setup.test_x))
    p["imprint.weight"], p["imprint.bias"] = block.weight, block.bias
    k = int(np.argsort([len(y) for y in setup.client_y], kind="stable")[50])
    X, Y = setup.client_x[k], setup.client_y[k]

    first = FLConfig(batch_size=10, lr=0.1)
    r = analytic.attack_rtf(client_update(p, spec, X[:10], Y[:10], first), ds.image_shape)
    print(f"single step, 10 images: {exact(r, X[:10])}/10 exact, {r.extra['num_occupied']} bins hit")
    for e in args.epochs:
        c = FLConfig(batch_size=10, local_epochs=e, lr=0.1)
        r = analytic.attack_rtf(client_update(p, spec, X, Y, c), ds.image_shape)
        print(f"E={e}, {len(Y)} images: {exact(r, X)} exact, {r.extra['num_occupied']} bins hit")


if __name__ == "__main__":
    main()
