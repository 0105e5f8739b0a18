import math

import pytest
import torch

from fedleak.models import (ArchitectureError, ArchitectureSpec, ParameterSet, build_model, forward,
                            generate, grad_matching_gradient, logits, loss_and_param_grads,
                            pre_fc_features)
from gradcheck import fd_input_error, fd_param_errors

FD_CASES = [
    ("mlp256", (3, 8, 8), {}),
    ("cnn_small", (3, 8, 8), {}),
    ("cnn_small", (3, 8, 8), {"activation": "sigmoid"}),
    ("vgg16", (3, 32, 32), {}),
    ("resnet18", (3, 8, 8), {}),
    ("imprint", (3, 8, 8), {"backbone": "cnn_small", "imprint_bins": 10,
                            "imprint_output_init": "random", "imprint_output_scale": 0.1}),
    ("dmgan_discriminator", (1, 12, 12), {"backbone": "cnn_small"}),
]


def _jitter(params, seed=1, scale=0.05):
    gen = torch.Generator().manual_seed(seed)
    return params.map(lambda t: t + scale * torch.randn(t.shape, generator=gen))


@pytest.mark.parametrize("arch,shape,kw", FD_CASES, ids=[f"{a}-{k.get('activation', 'relu')}" for a, _, k in FD_CASES])
def test_param_gradients_match_finite_differences(arch, shape, kw):
    spec = ArchitectureSpec(arch, shape, 10, **kw)
    params = _jitter(build_model(spec, 0))
    x = torch.randn((3, *shape), generator=torch.Generator().manual_seed(2))
    y = torch.tensor([0, 3, 9])
    errs = fd_param_errors(spec, params, x, y, per_tensor=3)
    assert max(errs.values()) < 1e-3, {k: v for k, v in errs.items() if v >= 1e-3}


@pytest.mark.parametrize("arch", ["dcgan_generator", "grnn_generator"])
def test_generator_input_gradients(arch):
    spec = ArchitectureSpec(arch, (1, 12, 12), 10)
    p = build_model(spec, 0).to(torch.float64)
    z = torch.randn(2, spec.latent_dim, dtype=torch.float64)

    def fn(zz):
        out = generate(p, spec, zz)
        out = out[0] if isinstance(out, tuple) else out
        return (out ** 2).sum()

    assert fd_input_error(fn, z) < 1e-3


def test_layer_dims(cnn, mlp):
    spec, p = mlp
    assert tuple(p["fc1.weight"].shape) == (256, 3072) and tuple(p["head.weight"].shape) == (10, 256)
    spec, p = cnn
    assert tuple(p["conv1.weight"].shape)[:2] == (32, 3)
    assert tuple(p["conv2.weight"].shape)[:2] == (64, 32)
    assert tuple(p["fc1.weight"].shape)[0] == 512 and tuple(p["head.weight"].shape) == (10, 512)
    tr = forward(p, spec, torch.randn(1, 3, 32, 32))
    assert tr.features.shape == (1, 512)


def test_same_seed_same_params(cnn):
    spec, p = cnn
    q = build_model(spec, 0)
    assert all(torch.equal(p[k], q[k]) for k in p)
    assert not torch.equal(build_model(spec, 1)["fc1.weight"], p["fc1.weight"])


def test_zero_head_gives_uniform_softmax_and_ln10(cnn):
    spec, p = cnn
    p = p.clone()
    p["head.weight"].zero_()
    p["head.bias"].zero_()
    x = torch.randn(4, 3, 32, 32)
    tr = forward(p, spec, x)
    assert torch.allclose(tr.probs, torch.full((4, 10), 0.1))
    loss, _ = loss_and_param_grads(p, spec, x, torch.tensor([0, 1, 2, 3]))
    assert abs(float(loss.detach()) - math.log(10)) < 1e-6


def test_softmax_rows_sum_to_one(mlp):
    spec, p = mlp
    tr = forward(p, spec, 5 * torch.randn(6, 3, 32, 32))
    assert torch.allclose(tr.probs.sum(1), torch.ones(6), atol=1e-6)


@pytest.mark.parametrize("fixture", ["cnn", "mlp"])
def test_head_bias_and_weight_identities(fixture, request):
    spec, p = request.getfixturevalue(fixture)
    x, y = torch.randn(1, 3, 32, 32), torch.tensor([4])
    _, g = loss_and_param_grads(p, spec, x, y)
    tr = forward(p, spec, x)
    err = tr.probs[0] - torch.nn.functional.one_hot(y, 10)[0]
    assert torch.allclose(g["head.bias"], err, atol=1e-6)
    assert torch.allclose(g["head.weight"], torch.outer(err, tr.features[0]), atol=1e-6)


def test_input_gradient_matches_finite_differences(cnn):
    spec, p = cnn
    p = p.to(torch.float64)
    target = loss_and_param_grads(p, spec, torch.randn(2, 3, 32, 32, dtype=torch.float64),
                                  torch.tensor([1, 2]))[1]

    def fn(x):
        _, g = loss_and_param_grads(p, spec, x, torch.tensor([1, 2]), create_graph=True)
        return sum(((g[k] - target[k]) ** 2).sum() for k in g)

    assert fd_input_error(fn, torch.randn(2, 3, 32, 32, dtype=torch.float64)) < 1e-3


def test_grad_matching_at_truth_is_zero(mlp):
    spec, p = mlp
    x, y = torch.randn(2, 3, 32, 32), torch.tensor([1, 7])
    _, target = loss_and_param_grads(p, spec, x, y)

    def l2(g):
        return sum(((g[k] - target[k]) ** 2).sum() for k in g)

    val, dx, dy = grad_matching_gradient(l2, p, spec, x, y)
    assert float(val) < 1e-10 and float(dx.norm()) < 1e-6 and dy is None


def test_scaled_target_keeps_minimizer(mlp):
    spec, p = mlp
    x, y = torch.randn(1, 3, 32, 32), torch.tensor([3])
    _, t = loss_and_param_grads(p, spec, x, y)
    v1, _, _ = grad_matching_gradient(lambda g: sum(((g[k] - t[k]) ** 2).sum() for k in g), p, spec, x, y)
    v2, dx2, _ = grad_matching_gradient(lambda g: sum(((g[k] - 2 * t[k]) ** 2).sum() for k in g),
                                        p, spec, x, y)
    assert float(v1) < 1e-10 < float(v2)
    assert float(dx2.norm()) > 0


def test_soft_labels_get_gradients(mlp):
    spec, p = mlp
    _, dx, dy = grad_matching_gradient(lambda g: g["head.bias"].pow(2).sum(), p, spec,
                                       torch.randn(2, 3, 32, 32), torch.randn(2, 10))
    assert dy is not None and dy.shape == (2, 10) and float(dy.norm()) > 0


def test_parameter_set_algebra_and_io(tmp_path, mlp):
    spec, p = mlp
    q = p.scale(2.0)
    assert torch.allclose((q - p).flatten(), p.flatten())
    assert torch.equal(p.unflatten(p.flatten())["fc1.weight"], p["fc1.weight"])
    assert p.numel() == 3072 * 256 + 256 + 256 * 10 + 10
    p.save(tmp_path / "m", {"arch": spec.to_dict()})
    r, manifest = ParameterSet.load(tmp_path / "m")
    assert list(r) == list(p) and all(torch.equal(r[k], p[k]) for k in p)
    assert ArchitectureSpec.from_dict(manifest["arch"]) == spec


def test_head_is_last_layer(cnn):
    spec, p = cnn
    w, b = p.head()
    assert w is p["head.weight"] and b is p["head.bias"]


def test_imprint_model_structure():
    spec = ArchitectureSpec("imprint", (3, 8, 8), 10, backbone="mlp256", imprint_bins=20)
    p = build_model(spec, 0)
    assert p["imprint.weight"].shape == (19, 192)
    assert torch.allclose(p["restore.weight"], torch.full((192, 19), 1 / 19))
    assert "backbone.head.weight" not in p and "head.weight" in p


def test_dmgan_discriminator_has_extra_class():
    spec = ArchitectureSpec("dmgan_discriminator", (1, 28, 28), 10, backbone="cnn_small")
    assert logits(build_model(spec, 0), spec, torch.randn(2, 1, 28, 28)).shape == (2, 11)


def test_pre_fc_features_feed_fc1(cnn):
    spec, p = cnn
    f = pre_fc_features(p, spec, torch.randn(2, 3, 32, 32))
    assert f.shape == (2, p["fc1.weight"].shape[1])


def test_invalid_specs():
    with pytest.raises(ArchitectureError):
        ArchitectureSpec("lenet")
    with pytest.raises(ArchitectureError):
        ArchitectureSpec("imprint", backbone=None)
    with pytest.raises(ArchitectureError):
        build_model(ArchitectureSpec("vgg16", (3, 28, 28)), 0)


def test_wrong_input_shape_rejected(cnn):
    spec, p = cnn
    with pytest.raises(Exception):
        logits(p, spec, torch.randn(1, 1, 28, 28))


def test_init_schemes_differ():
    base = ArchitectureSpec("mlp256", (3, 8, 8), 10)
    u = build_model(base, 0)["fc1.weight"]
    assert float(u.abs().max()) <= 1 / math.sqrt(192) + 1e-7
    d = build_model(ArchitectureSpec("mlp256", (3, 8, 8), 10, init="dlg"), 0)["fc1.weight"]
    assert 0.4 < float(d.abs().max()) <= 0.5
    n = build_model(ArchitectureSpec("mlp256", (3, 8, 8), 10, init="normal"), 0)
    assert float(n["fc1.bias"].abs().max()) == 0.0
    assert abs(float(n["fc1.weight"].std()) - math.sqrt(2 / 192)) < 0.01
