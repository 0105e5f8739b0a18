import pytest
import torch

from fedleak.fl import (ClientUpdate, ConfigError, FederatedSetup, FLConfig, UpdateMeta, aggregate,
                        aggregation_weights, capture_pseudo_gradient, client_update, num_local_steps,
                        run_rounds)
from fedleak.models import ArchitectureSpec, ParameterSet, build_model, loss_and_param_grads

SPEC = ArchitectureSpec("mlp256", (3, 8, 8), 4, hidden=32)


def _data(n, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn((n, 3, 8, 8), generator=g), torch.randint(4, (n,), generator=g)


def _scalar_update(k, value, n):
    return ClientUpdate(k, 0, ParameterSet(w=torch.tensor([value])), UpdateMeta(1, 1, 1, 1, 1, n))


def test_single_step_delta_is_lr_times_gradient():
    p = build_model(SPEC, 0)
    x, y = _data(20)
    cfg = FLConfig(batch_size=20, lr=0.05)
    u = client_update(p, SPEC, x, y, cfg)
    _, g = loss_and_param_grads(p, SPEC, x, y)
    assert u.meta.num_steps == 1
    assert float((u.delta - g.scale(0.05)).flatten().abs().max()) < 1e-6
    pg = capture_pseudo_gradient(u)
    assert float((pg.normalized - g).flatten().abs().max()) < 1e-5


def test_delta_equals_weight_difference():
    p = build_model(SPEC, 0)
    x, y = _data(35)
    u = client_update(p, SPEC, x, y, FLConfig(batch_size=10, lr=0.1, local_epochs=2), instrument="full")
    steps = u.step_grads
    assert len(steps) == u.meta.num_steps == 8
    total = steps[0].map(torch.zeros_like)
    for g in steps:
        total = total + g.scale(0.1)
    assert float((total - u.delta).flatten().abs().max()) < 1e-6


def test_num_steps():
    assert num_local_steps(480, 10, 1) == 48
    assert num_local_steps(485, 10, 2) == 98


def test_normalized_update_is_step_average():
    p = build_model(SPEC, 0)
    x, y = _data(480)
    u = client_update(p, SPEC, x, y, FLConfig(batch_size=10, lr=0.1), instrument="full")
    pg = capture_pseudo_gradient(u)
    avg = u.step_grads[0].map(torch.zeros_like)
    for g in u.step_grads:
        avg = avg + g.scale(1 / 48)
    assert pg.num_steps == 48
    assert float((pg.normalized - avg).flatten().abs().max()) < 1e-6
    assert pg.normalized.norm() <= max(u.step_grad_norms) + 1e-6


def test_zero_lr_gives_zero_delta():
    p = build_model(SPEC, 0)
    x, y = _data(20)
    u = client_update(p, SPEC, x, y, FLConfig(batch_size=10, lr=0.0))
    assert float(u.delta.flatten().abs().max()) == 0.0


def test_round_lr_decay():
    cfg = FLConfig(lr=0.1, lr_decay=0.95)
    assert cfg.round_lr(0) == 0.1 and abs(cfg.round_lr(3) - 0.1 * 0.95 ** 3) < 1e-15


def test_config_validation_lists_problems():
    with pytest.raises(ConfigError) as exc:
        FLConfig(local_epochs=0, batch_size=0)
    assert "local_epochs" in str(exc.value) and "batch_size" in str(exc.value)


def test_aggregate_two_equal_clients_is_mean():
    g = ParameterSet(w=torch.tensor([1.0]))
    new = aggregate(g, [_scalar_update(0, 0.5, 10), _scalar_update(1, -0.5, 10)])
    assert float(new["w"]) == 1.0


def test_aggregate_weighted_mean():
    # client models 0 and 4 from global 0 -> deltas 0 and -4, weights 0.25 / 0.75
    g = ParameterSet(w=torch.tensor([0.0]))
    new = aggregate(g, [_scalar_update(0, 0.0, 1), _scalar_update(1, -4.0, 3)])
    assert float(new["w"]) == 3.0


def test_aggregate_single_client_is_exact():
    p = build_model(SPEC, 0)
    x, y = _data(30)
    u = client_update(p, SPEC, x, y, FLConfig(batch_size=10))
    new = aggregate(p, [u])
    assert all(torch.equal(new[k], p[k] - u.delta[k]) for k in p)


def test_weights_sum_to_one():
    ups = [_scalar_update(k, 0.0, n) for k, n in enumerate([3, 17, 480, 5])]
    assert abs(sum(aggregation_weights(ups).values()) - 1) < 1e-9


def test_flagged_updates_skipped():
    g = ParameterSet(w=torch.tensor([0.0]))
    bad = _scalar_update(1, float("nan"), 10)
    bad.flagged = True
    assert float(aggregate(g, [_scalar_update(0, -2.0, 10), bad])["w"]) == 2.0


def test_update_save_load(tmp_path):
    p = build_model(SPEC, 0)
    x, y = _data(20)
    u = client_update(p, SPEC, x, y, FLConfig(batch_size=10), instrument=True, num_classes=4)
    u.save(tmp_path / "u")
    r = ClientUpdate.load(tmp_path / "u")
    assert r.meta == u.meta and (r.true_counts == u.true_counts).all()
    assert all(torch.equal(r.delta[k], u.delta[k]) for k in u.delta)


def _setup(toy_dataset, **kw):
    cfg = FLConfig(**{"num_clients": 4, "batch_size": 10, "rounds": 3, "seed": 5, **kw})
    return FederatedSetup.build(toy_dataset, ArchitectureSpec("mlp256", (3, 8, 8), 4, hidden=16), cfg)


def test_run_rounds_reproducible(toy_dataset, tmp_path):
    a = run_rounds(_setup(toy_dataset), keep_updates=True, run_dir=tmp_path)
    b = run_rounds(_setup(toy_dataset), keep_updates=True)
    assert [r.accuracy for r in a] == [r.accuracy for r in b]
    for ra, rb in zip(a, b):
        for ua, ub in zip(ra.updates, rb.updates):
            assert all(torch.equal(ua.delta[k], ub.delta[k]) for k in ua.delta)
    rows = (tmp_path / "accuracy.csv").read_text().strip().splitlines()
    assert rows[0] == "round,accuracy" and len(rows) == 4
    assert len(list((tmp_path / "updates").glob("round*_client*.npz"))) == 12


def test_hooks_see_every_update_and_can_replace_procedure(toy_dataset):
    seen = []

    class Hook:
        serial = True

        def on_update(self, t, u):
            seen.append((t, u.client_id))

        def local_procedure(self, k):
            if k != 2:
                return None

            def proc(params, spec, x, y, cfg, t, k, **kw):
                return ClientUpdate(k, t, params.map(torch.zeros_like),
                                    UpdateMeta(cfg.lr, 1, 1, cfg.batch_size, 1, len(y)))
            return proc

    recs = run_rounds(_setup(toy_dataset, rounds=2), hooks=Hook(), keep_updates={2})
    assert seen == [(t, k) for t in range(2) for k in range(4)]
    assert float(recs[0].updates[0].delta.flatten().abs().max()) == 0.0


def test_client_sampling(toy_dataset):
    recs = run_rounds(_setup(toy_dataset, clients_per_round=2), keep_updates=True)
    assert all(len(r.updates) == 2 for r in recs)


def test_untrained_accuracy_near_chance():
    from fedleak.metrics import evaluate_global

    spec = ArchitectureSpec("cnn_small", (3, 32, 32), 10)
    g = torch.Generator().manual_seed(0)
    x, y = torch.randn(2000, 3, 32, 32, generator=g), torch.randint(10, (2000,), generator=g)
    assert abs(evaluate_global(build_model(spec, 0), spec, x, y) - 0.1) < 0.03
