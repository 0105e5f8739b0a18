import numpy as np
import pytest
import torch
from scipy.optimize import minimize

from fedleak.fl import FLConfig, client_update
from fedleak.labels import (AuxLogitStats, LabelAmbiguityError, adjust_counts,
                            estimate_confidence_matrix, fit_aux_stats, h_matrix, infer_counts_dlf,
                            infer_counts_ilrg, infer_counts_rlu, infer_counts_zero_shot,
                            infer_label_idlg, project_simplex, solve_simplex_lsq)
from fedleak.models import ArchitectureSpec, build_model, loss_and_param_grads

from conftest import images


def test_adjust_counts_largest_remainder():
    # floors (2, 2, 4); remainders .6, .6, .8 -> index 2 first, then index 0
    assert adjust_counts([2.6, 2.6, 4.8], 10).tolist() == [3, 2, 5]
    assert adjust_counts([-1, 5], 5).tolist() == [0, 5]


def test_adjust_counts_sum_and_nonnegativity():
    rng = np.random.default_rng(0)
    for _ in range(200):
        s = rng.normal(size=rng.integers(1, 12)) * 5
        total = int(rng.integers(0, 500))
        c = adjust_counts(s, total) if (s > 0).any() or total == 0 else None
        if c is None:
            with pytest.warns(UserWarning):
                c = adjust_counts(s, total)
        assert c.sum() == total and (c >= 0).all()


def test_idlg_on_constructed_gradient():
    a = torch.rand(16)
    p = torch.softmax(torch.randn(10), 0)
    y = torch.nn.functional.one_hot(torch.tensor(3), 10)
    g = torch.outer(p - y, a)
    assert infer_label_idlg(g) == 3
    assert infer_label_idlg(17.5 * g) == 3


@pytest.mark.parametrize("fixture", ["cnn", "mlp"])
def test_idlg_single_samples(fixture, request):
    spec, p = request.getfixturevalue(fixture)
    x = images(20, seed=1)
    ys = torch.arange(20) % 10
    for i in range(20):
        _, g = loss_and_param_grads(p, spec, x[i:i + 1], ys[i:i + 1])
        assert infer_label_idlg(g["head.weight"]) == int(ys[i])


def test_idlg_rejects_two_label_average(cnn):
    spec, p = cnn
    _, g = loss_and_param_grads(p, spec, images(2), torch.tensor([1, 6]))
    with pytest.raises(LabelAmbiguityError):
        infer_label_idlg(g["head.weight"])


def test_zero_shot_single_class_batch(mlp):
    spec, p = mlp
    _, g = loss_and_param_grads(p, spec, images(10, seed=2), torch.full((10,), 2))
    est = infer_counts_zero_shot(g, p, spec, 10, 10, probe_seed=0)
    assert est.counts.sum() == 10 and int(np.argmax(est.raw_scores)) == 2


def test_zero_shot_one_class_degenerate():
    spec = ArchitectureSpec("mlp256", (3, 8, 8), 1, hidden=8)
    p = build_model(spec, 0)
    _, g = loss_and_param_grads(p, spec, images(5, (3, 8, 8)), torch.zeros(5, dtype=torch.long))
    assert infer_counts_zero_shot(g, p, spec, 5, 1).counts.tolist() == [5]


def test_dlf_single_step_matches_zero_shot(mlp):
    spec, p = mlp
    x, y = images(10, seed=3), torch.tensor([0, 0, 1, 2, 2, 2, 5, 7, 7, 9])
    u = client_update(p, spec, x, y, FLConfig(batch_size=10, lr=0.01))
    zs = infer_counts_zero_shot(u, p, spec, 10, 10, probe_seed=4)
    dl = infer_counts_dlf(u, p, spec, probe_seed=4, num_classes=10)
    assert np.abs(zs.raw_scores - dl.raw_scores).max() < 1e-6
    assert dl.counts.sum() == 10


def test_dlf_counts_sum_to_dataset_size(mlp):
    spec, p = mlp
    x, y = images(47, seed=5), torch.arange(47) % 10
    u = client_update(p, spec, x, y, FLConfig(batch_size=10, lr=0.004))
    assert infer_counts_dlf(u, p, spec).counts.sum() == 47


def test_ilrg_single_class_and_singleton(cnn):
    spec, p = cnn
    _, g = loss_and_param_grads(p, spec, images(8, seed=6), torch.full((8,), 5))
    est = infer_counts_ilrg(g, p.head(), 8)
    assert est.counts[5] == 8
    _, g1 = loss_and_param_grads(p, spec, images(1, seed=7), torch.tensor([4]))
    est1 = infer_counts_ilrg(g1, p.head(), 1)
    assert int(np.argmax(est1.counts)) == infer_label_idlg(g1["head.weight"]) == 4


def test_confidence_matrix_deterministic_logits():
    mu = np.random.default_rng(0).normal(size=(4, 4))
    aux = AuxLogitStats(mu, np.zeros((4, 4, 4)), np.full(4, 10))
    S = estimate_confidence_matrix(aux).S
    expected = np.exp(mu) / np.exp(mu).sum(1, keepdims=True)
    assert np.allclose(S, expected, atol=1e-12)
    flat = AuxLogitStats(np.zeros((10, 10)), np.zeros((10, 10, 10)), np.full(10, 5))
    assert np.allclose(estimate_confidence_matrix(flat).S, 0.1)


def test_confidence_matrix_monte_carlo_converges():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(5, 5, 5)) * 0.5
    aux = AuxLogitStats(rng.normal(size=(5, 5)), np.einsum("kij,klj->kil", a, a), np.full(5, 10))
    s4 = estimate_confidence_matrix(aux, 10_000, seed=0).S
    s5 = estimate_confidence_matrix(aux, 100_000, seed=1).S
    assert np.abs(s4 - s5).max() < 0.01


def test_h_matrix_is_expected_negative_bias_gradient():
    rng = np.random.default_rng(2)
    S = rng.dirichlet(np.ones(6), size=6)
    z = rng.dirichlet(np.ones(6))
    # a class-c sample has bias gradient p - e_c, so E[-db] = z - S^T z
    assert np.allclose(h_matrix(S) @ z, z - S.T @ z)


def test_project_simplex_against_solver():
    rng = np.random.default_rng(3)
    for _ in range(20):
        v = rng.normal(size=5) * 2
        ref = minimize(lambda z: ((z - v) ** 2).sum(), np.full(5, 0.2), method="SLSQP",
                       bounds=[(0, 1)] * 5, constraints={"type": "eq", "fun": lambda z: z.sum() - 1},
                       options={"ftol": 1e-14}).x
        assert np.abs(project_simplex(v) - ref).max() < 1e-5


def test_simplex_solution_is_feasible():
    rng = np.random.default_rng(4)
    H, v = rng.normal(size=(6, 6)), rng.normal(size=6)
    z, _ = solve_simplex_lsq(H, v)
    assert abs(z.sum() - 1) < 1e-6 and (z >= 0).all() and (z <= 1).all()


def test_rlu_recovers_three_class_batch():
    spec = ArchitectureSpec("cnn_small", (3, 32, 32), 3)
    p = build_model(spec, 0)
    aux_x, aux_y = images(150, seed=8), torch.arange(150) % 3
    aux = fit_aux_stats(p, spec, aux_x, aux_y, 3)
    x, y = images(10, seed=9), torch.tensor([0, 0, 0, 1, 1, 1, 2, 2, 2, 2])
    _, g = loss_and_param_grads(p, spec, x, y)
    est = infer_counts_rlu(g, aux, batch_size=10)
    assert est.counts.tolist() == [3, 3, 4]
    assert abs(sum(est.extra["z"]) - 1) < 1e-6


def test_all_methods_agree_on_singleton(cnn):
    spec, p = cnn
    x, y = images(1, seed=10), torch.tensor([7])
    u = client_update(p, spec, x, y, FLConfig(batch_size=1, lr=0.01))
    aux = fit_aux_stats(p, spec, images(100, seed=11), torch.arange(100) % 10, 10)
    label = infer_label_idlg(u.delta["head.weight"])
    for est in (infer_counts_zero_shot(u, p, spec, 1, 10), infer_counts_dlf(u, p, spec),
                infer_counts_ilrg(u, p.head(), 1, 10), infer_counts_rlu(u, aux)):
        assert est.counts.tolist() == [int(i == label) for i in range(10)], est.method


def test_aux_stats_need_two_per_class(cnn):
    spec, p = cnn
    with pytest.raises(ValueError):
        fit_aux_stats(p, spec, images(3), torch.tensor([0, 1, 1]), 10)
