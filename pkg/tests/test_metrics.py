import itertools
import math

import numpy as np
import pytest
import torch
from skimage.metrics import structural_similarity

from fedleak.data import NormStats, normalize
from fedleak.metrics import (evaluate_global, image_similarity, label_count_accuracy,
                             match_reconstructions, mse, psnr_from_mse, ssim, to_unit_range)
from fedleak.models import ArchitectureSpec, build_model

rng = np.random.default_rng(0)


def _smooth(n, shape=(3, 32, 32), seed=0):
    r = np.random.default_rng(seed)
    x = r.random((n, *shape))
    x = (x + np.roll(x, 1, -1) + np.roll(x, 1, -2) + np.roll(x, (1, 1), (-2, -1))) / 4
    return x


def test_identical_images():
    a = rng.random((3, 16, 16))
    s = image_similarity(a, a.copy())
    assert s["mse"] == 0 and math.isinf(s["psnr"]) and s["ssim"] == pytest.approx(1.0)


def test_binary_negative_zero_db():
    a = (rng.random((1, 8, 8)) > 0.5).astype(float)
    s = image_similarity(a, 1 - a)
    assert s["mse"] == 1.0 and s["psnr"] == 0.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        image_similarity(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


def test_psnr_mse_consistency():
    for m in [1e-6, 0.003, 0.25, 1.0, 4.0]:
        assert psnr_from_mse(m) == 10 * math.log10(1 / m)


@pytest.mark.parametrize("shape", [(3, 32, 32), (1, 28, 28), (3, 64, 64)])
def test_ssim_matches_skimage(shape):
    a = _smooth(1, shape, 1)[0]
    b = np.clip(a + 0.1 * np.random.default_rng(2).standard_normal(shape), 0, 1)
    ref = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=True, channel_axis=0)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-9)


def test_ssim_symmetric():
    a, b = _smooth(2, seed=3)
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-9


def test_permuted_copy_matches_exactly():
    truth = _smooth(6, seed=4)
    perm = [3, 0, 5, 1, 4, 2]
    rep = match_reconstructions(truth[perm], truth)
    assert rep.mean_mse == 0
    assert rep.assignment == {i: p for i, p in enumerate(perm)}
    assert not rep.unmatched_recovered and not rep.unmatched_truth


def test_one_recovered_three_truths():
    truth = _smooth(3, seed=5)
    rec = truth[2:3] + 0.01
    rep = match_reconstructions(rec, truth)
    assert rep.assignment == {0: 2} and rep.unmatched_truth == [0, 1]


@pytest.mark.parametrize("n_rec,n_truth", [(4, 4), (3, 6), (6, 4), (5, 5)])
def test_matching_optimal_vs_brute_force(n_rec, n_truth):
    r = np.random.default_rng(n_rec * 10 + n_truth)
    rec, truth = r.random((n_rec, 1, 4, 4)), r.random((n_truth, 1, 4, 4))
    cost = np.array([[mse(a, b) for b in truth] for a in rec])
    k = min(n_rec, n_truth)
    best = math.inf
    if n_rec <= n_truth:
        for cols in itertools.permutations(range(n_truth), k):
            best = min(best, sum(cost[i, j] for i, j in enumerate(cols)))
    else:
        for rows in itertools.permutations(range(n_rec), k):
            best = min(best, sum(cost[i, j] for j, i in enumerate(rows)))
    rep = match_reconstructions(rec, truth, with_ssim=False)
    assert rep.mean_mse * k == pytest.approx(best, rel=1e-12)
    assert len(set(rep.assignment.values())) == k


def test_matching_deterministic_on_ties():
    x = np.zeros((3, 1, 2, 2))
    a = match_reconstructions(x, x).assignment
    assert a == match_reconstructions(x, x).assignment == {0: 0, 1: 1, 2: 2}


def test_empty_sets_rejected():
    with pytest.raises(ValueError):
        match_reconstructions(np.zeros((0, 1, 2, 2)), np.zeros((1, 1, 2, 2)))


def test_noise_below_noise_floor():
    # E[(u - t)^2] = t^2 - t + 1/3 >= 1/12 for u ~ U[0, 1], so expected noise PSNR <= 10 log10 12
    floor = 10 * math.log10(12)
    truth = _smooth(100, seed=6)
    noise = np.random.default_rng(7).random(truth.shape)
    pair_psnr = [psnr_from_mse(mse(n, t)) for n, t in zip(noise, truth)]
    assert max(pair_psnr) < floor
    rep = match_reconstructions(noise[:10], truth[:10], with_ssim=False)
    assert rep.mean_psnr < floor


def test_normalization_mode_does_not_shift_scores():
    stats = NormStats((0.4, 0.5, 0.6), (0.2, 0.25, 0.3))
    truth = _smooth(3, seed=8).astype(np.float32)
    rec = np.clip(truth + 0.05 * np.random.default_rng(9).standard_normal(truth.shape), 0, 1)
    rec = rec.astype(np.float32)
    scores = []
    for mode in ("unit_range", "standardized"):
        r = to_unit_range(torch.from_numpy(normalize(rec, stats, mode)), stats, mode)
        t = to_unit_range(torch.from_numpy(normalize(truth, stats, mode)), stats, mode)
        scores.append(match_reconstructions(r, t).mean_psnr)
    assert scores[0] == pytest.approx(scores[1], abs=1e-4)


def test_label_count_accuracy():
    assert label_count_accuracy([2, 3, 5], [2, 3, 5]) == {"exact_match_fraction": 1.0, "l1_error": 0}
    assert label_count_accuracy([0, 10], [10, 0]) == {"exact_match_fraction": 0.0, "l1_error": 20}
    assert label_count_accuracy([3, 2, 5], [3, 3, 4])["l1_error"] == 2
    with pytest.raises(ValueError):
        label_count_accuracy([1, 2], [1, 1])


def test_untrained_model_near_chance():
    spec = ArchitectureSpec("cnn_small", (3, 32, 32), 10)
    p = build_model(spec, 0)
    g = torch.Generator().manual_seed(0)
    x = torch.randn(2000, 3, 32, 32, generator=g)
    y = torch.arange(10).repeat(200)
    acc = evaluate_global(p, spec, x, y)
    assert abs(acc - 0.1) <= 0.02
    assert acc == evaluate_global(p, spec, x, y)


def test_empty_pool_rejected():
    spec = ArchitectureSpec("mlp256", (3, 32, 32), 10)
    with pytest.raises(ValueError):
        evaluate_global(build_model(spec, 0), spec, torch.zeros(0, 3, 32, 32), torch.zeros(0).long())
