import numpy as np
import pytest
import torch
from scipy.stats import norm

from fedleak.analytic import (BatchMixtureWarning, NoActiveUnitError, attack_rtf, brightness_stats,
                              build_imprint, recover_fc_input)
from fedleak.fl import FLConfig, client_update
from fedleak.models import ArchitectureSpec, build_model, loss_and_param_grads

SHAPE = (3, 8, 8)
BINS = 20


def _fc_grads(n, seed=0):
    spec = ArchitectureSpec("mlp256", (3, 32, 32), 10)
    p = build_model(spec, seed)
    g = torch.Generator().manual_seed(seed)
    x, y = torch.randn((n, 3, 32, 32), generator=g), torch.randint(10, (n,), generator=g)
    _, grads = loss_and_param_grads(p.to(torch.float64), spec, x.double(), y)
    return x, grads


@pytest.mark.parametrize("seed", range(5))
def test_single_sample_recovery_exact(seed):
    x, g = _fc_grads(1, seed)
    rec = recover_fc_input(g["fc1.weight"], g["fc1.bias"])
    assert rec.consistent
    assert float((rec.x - x.double().flatten()).norm() / x.norm()) < 1e-5


def test_zero_input_recovers_zero():
    w = torch.zeros(4, 6)
    rec = recover_fc_input(w, torch.tensor([0.0, 0.3, -0.1, 0.0]))
    assert float(rec.x.abs().max()) == 0.0


def test_batch_of_two_flagged():
    _, g = _fc_grads(2)
    with pytest.warns(BatchMixtureWarning):
        rec = recover_fc_input(g["fc1.weight"], g["fc1.bias"])
    assert not rec.consistent


def test_no_active_unit():
    with pytest.raises(NoActiveUnitError):
        recover_fc_input(torch.ones(3, 4), torch.zeros(3))


def test_imprint_thresholds():
    block = build_imprint(100, 12, (0.0, 1.0))
    assert block.weight.shape == (99, 12)
    assert float(block.thresholds[49]) == 0.0
    assert np.allclose(block.thresholds.numpy(), -norm.ppf(np.arange(1, 100) / 100), atol=1e-6)
    assert (np.diff(block.thresholds.numpy()) < 0).all()
    with pytest.raises(ValueError):
        build_imprint(1, 12, (0.0, 1.0))


def test_calibrated_occupancy_nearly_uniform():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(10_000, 3, 8, 8, generator=g) * 0.3 + torch.randn(10_000, 1, 1, 1, generator=g)
    block = build_imprint(100, 192, brightness_stats(x))
    counts = np.bincount(block.bin_index(x).numpy(), minlength=100)
    assert counts.max() / counts.min() < 3


def test_bin_activation_counts_nonincreasing():
    g = torch.Generator().manual_seed(1)
    x = torch.randn(64, *SHAPE, generator=g)
    block = build_imprint(BINS, 192, brightness_stats(x))
    act = (block.calibrated(x)[:, None] + block.thresholds[None, :] > 0).sum(0)
    assert (act[:-1] >= act[1:]).all()


def _imprint_batch(bins_wanted, seed=0):
    spec = ArchitectureSpec("imprint", SHAPE, 4, backbone="mlp256", hidden=32, imprint_bins=BINS)
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(len(bins_wanted), *SHAPE, generator=g) * 0.5
    centers = norm.ppf((np.asarray(bins_wanted) + 0.5) / BINS)
    x = x - x.mean(dim=(1, 2, 3), keepdim=True) + torch.tensor(centers, dtype=torch.float32).view(-1, 1, 1, 1)
    y = torch.randint(4, (len(x),), generator=g)
    p = build_model(spec, 0)
    u = client_update(p, spec, x, y, FLConfig(batch_size=len(x), lr=0.1))
    return x, u


def test_rtf_exact_in_distinct_bins():
    wanted = [2, 5, 7, 9, 11, 13, 16, 18]
    x, u = _imprint_batch(wanted)
    r = attack_rtf(u, SHAPE)
    occ = np.flatnonzero(r.extra["occupied"])
    assert sorted(occ.tolist()) == [b - 1 for b in wanted]
    for i, b in enumerate(wanted):
        assert float(((r.images[b - 1] - x[i]) ** 2).mean()) < 1e-8


def test_rtf_collision_is_mixture():
    x, u = _imprint_batch([4, 4, 10])
    r = attack_rtf(u, SHAPE)
    mix = r.images[3]
    exact = float(((r.images[9] - x[2]) ** 2).mean())
    for i in (0, 1):
        assert float(((mix - x[i]) ** 2).mean()) > 10 * max(exact, 1e-10)


def test_rtf_telescoping():
    _, u = _imprint_batch([3, 8, 15])
    dw = u.delta["imprint.weight"].double()
    diffs = dw[:-1] - dw[1:]
    assert torch.allclose(diffs.sum(0), dw[0] - dw[-1], atol=1e-12)


def test_rtf_empty_update():
    _, u = _imprint_batch([5])
    u.delta = u.delta.map(torch.zeros_like)
    assert attack_rtf(u, SHAPE).extra["num_occupied"] == 0
