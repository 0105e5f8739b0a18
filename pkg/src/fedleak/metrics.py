"""Reconstruction fidelity, label-count accuracy and model accuracy."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.ndimage import correlate1d
from scipy.optimize import linear_sum_assignment

from .data import NormStats, denormalize
from .models import ArchitectureSpec, ParameterSet, accuracy


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def mse(a, b) -> float:
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(m: float) -> float:
    return math.inf if m == 0 else 10.0 * math.log10(1.0 / m)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    w = np.exp(-r ** 2 / (2 * sigma ** 2))
    return w / w.sum()


def ssim(a, b, data_range: float = 1.0, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over an 11x11 Gaussian window (sigma 1.5), channels averaged.

    Images are ``C x H x W`` or ``H x W``; statistics use the unbiased
    (N-1) covariance and only windows fully inside the image are averaged.
    """
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    w = _gaussian_window()
    pad = len(w) // 2
    n = len(w) ** 2
    cov_norm = n / (n - 1)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    vals = []
    for ca, cb in zip(a, b):
        def filt(img):
            return correlate1d(correlate1d(img, w, axis=0, mode="reflect"), w, axis=1, mode="reflect")

        ux, uy = filt(ca), filt(cb)
        vx = cov_norm * (filt(ca * ca) - ux * ux)
        vy = cov_norm * (filt(cb * cb) - uy * uy)
        vxy = cov_norm * (filt(ca * cb) - ux * uy)
        s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux ** 2 + uy ** 2 + c1) * (vx + vy + c2))
        if s.shape[0] > 2 * pad and s.shape[1] > 2 * pad:
            s = s[pad:-pad, pad:-pad]
        vals.append(s.mean())
    return float(np.mean(vals))


def image_similarity(a, b) -> dict:
    """MSE, PSNR (``inf`` for identical images) and SSIM of two [0, 1] images."""
    m = mse(a, b)
    return {"mse": m, "psnr": psnr_from_mse(m), "ssim": ssim(a, b)}


def to_unit_range(images, norm_stats: NormStats | None, mode: str = "standardized",
                  clip: bool = True) -> np.ndarray:
    """De-normalize model-domain images into [0, 1] pixel space."""
    x = images.detach().cpu().float() if isinstance(images, torch.Tensor) else torch.as_tensor(images)
    if norm_stats is not None:
        x = denormalize(x, norm_stats, mode)
    x = x.numpy().astype(np.float64)
    return np.clip(x, 0.0, 1.0) if clip else x


@dataclass
class MatchReport:
    assignment: dict[int, int]
    pairs: list[dict]
    unmatched_recovered: list[int]
    unmatched_truth: list[int]
    mean_mse: float
    mean_psnr: float
    mean_ssim: float

    def to_dict(self) -> dict:
        return {
            "assignment": {str(k): v for k, v in self.assignment.items()},
            "pairs": self.pairs,
            "unmatched_recovered": self.unmatched_recovered,
            "unmatched_truth": self.unmatched_truth,
            "mean_mse": self.mean_mse,
            "mean_psnr": _finite(self.mean_psnr),
            "mean_ssim": self.mean_ssim,
        }


def _finite(v: float):
    return "inf" if math.isinf(v) else v


def match_reconstructions(recovered, truth, with_ssim: bool = True) -> MatchReport:
    """Minimum-total-MSE injective matching between recovered and true images.

    Both sets are ``N x C x H x W`` in [0, 1]. Ties resolve to lower indices
    (scipy's assignment is deterministic for a fixed cost matrix).
    """
    r, t = _np(recovered), _np(truth)
    if len(r) == 0 or len(t) == 0:
        raise ValueError("cannot match empty image sets")
    tf = t.reshape(len(t), -1)
    # row by row: a full broadcast is |r| x |t| x pixels
    cost = np.stack([((tf - ri) ** 2).mean(1) for ri in r.reshape(len(r), -1)])
    rows, cols = linear_sum_assignment(cost)
    pairs = []
    for i, j in zip(rows.tolist(), cols.tolist()):
        m = float(cost[i, j])
        pairs.append({"recovered": i, "truth": j, "mse": m, "psnr": psnr_from_mse(m),
                      "ssim": ssim(r[i], t[j]) if with_ssim else float("nan")})
    mean_mse = float(np.mean([p["mse"] for p in pairs]))
    psnrs = [p["psnr"] for p in pairs]
    return MatchReport(
        dict(zip(rows.tolist(), cols.tolist())), pairs,
        sorted(set(range(len(r))) - set(rows.tolist())),
        sorted(set(range(len(t))) - set(cols.tolist())),
        mean_mse, float(np.mean(psnrs)),
        float(np.mean([p["ssim"] for p in pairs])) if with_ssim else float("nan"))


def matched_abs_corr(recovered, truth) -> tuple[float, list[float]]:
    """Hungarian matching on ``|corr|`` (sign-invariant); returns mean and per-pair values."""
    r, t = _np(recovered), _np(truth)
    r = r.reshape(len(r), -1)
    t = t.reshape(len(t), -1)
    r = r - r.mean(1, keepdims=True)
    t = t - t.mean(1, keepdims=True)
    rn = r / np.maximum(np.linalg.norm(r, axis=1, keepdims=True), 1e-12)
    tn = t / np.maximum(np.linalg.norm(t, axis=1, keepdims=True), 1e-12)
    c = np.abs(rn @ tn.T)
    rows, cols = linear_sum_assignment(-c)
    vals = c[rows, cols].tolist()
    return float(np.mean(vals)), vals


def label_count_accuracy(estimate, truth) -> dict:
    """Per-class exact-match fraction and L1 error between count vectors."""
    e = np.asarray(getattr(estimate, "counts", estimate))
    t = np.asarray(truth)
    if e.sum() != t.sum():
        raise ValueError(f"totals differ: estimate {e.sum()} vs truth {t.sum()}")
    return {"exact_match_fraction": float(np.mean(e == t)), "l1_error": int(np.abs(e - t).sum())}


def evaluate_global(params: ParameterSet, spec: ArchitectureSpec, test_x: torch.Tensor,
                    test_y: torch.Tensor) -> float:
    """Top-1 accuracy on a labeled test pool."""
    if test_y is None or len(test_y) == 0:
        raise ValueError("empty test pool")
    return accuracy(params, spec, test_x, test_y)
