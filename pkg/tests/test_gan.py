import numpy as np
import pytest
import torch

from fedleak import gan
from fedleak.fl import FLConfig, FederatedSetup, run_rounds
from fedleak.models import ArchitectureSpec, ParameterSet, build_model, loss_and_param_grads

SHAPE = (3, 8, 8)
CLS = ArchitectureSpec("cnn_small", SHAPE, 4)


def _target(seed=0, label=2):
    p = build_model(CLS, seed)
    x = torch.rand(1, *SHAPE, generator=torch.Generator().manual_seed(seed)) * 2 - 1
    return p, loss_and_param_grads(p, CLS, x, torch.tensor([label]))[1]


def test_discriminator_step_decreases_loss():
    dspec = ArchitectureSpec("dmgan_discriminator", SHAPE, 4, backbone="cnn_small")
    d = build_model(dspec, 0)
    g = torch.Generator().manual_seed(1)
    real, fake = torch.randn(8, *SHAPE, generator=g), torch.randn(8, *SHAPE, generator=g)
    y = torch.randint(4, (8,), generator=g)
    new, before, after = gan.discriminator_step(d, dspec, real, y, fake, lr=0.05)
    assert after < before
    assert dspec.output_classes == 5


def test_ggl_deterministic_and_in_generator_range():
    p, grad = _target()
    G = gan.untrained_generator(SHAPE, 4, None, seed=3)
    cfg = gan.default_gan_config("ggl", iterations=60, seed=7)
    a = gan.attack_ggl(grad, G, p, CLS, cfg)
    b = gan.attack_ggl(grad, G, p, CLS, cfg)
    assert torch.equal(a.images, b.images) and a.loss_trace == b.loss_trace
    assert int(a.labels[0]) == 2
    z = torch.tensor(a.extra["latent"])[None]
    with torch.no_grad():
        again = G.images(z, a.labels)
    h = [gan.params_hash(ParameterSet(x=t)) for t in (again, a.images)]
    assert h[0] == h[1]


def test_ggl_shape_mismatch():
    p, grad = _target()
    G = gan.untrained_generator((1, 8, 8), 4, None)
    with pytest.raises(ValueError):
        gan.attack_ggl(grad, G, p, CLS, gan.default_gan_config("ggl", iterations=10))


def test_ggl_population_default():
    p, grad = _target()
    G = gan.untrained_generator(SHAPE, 4, None)
    r = gan.attack_ggl(grad, G, p, CLS, gan.default_gan_config("ggl", iterations=30))
    # 4 + floor(3 ln 100) = 17 candidates per generation
    assert r.iterations % 17 == 0


def test_sliced_wasserstein():
    a = ParameterSet(w=torch.tensor([3.0, 1.0, 2.0]))
    b = ParameterSet(w=torch.tensor([1.0, 2.0, 3.0]))
    c = ParameterSet(w=torch.tensor([2.0, 3.0, 4.0]))
    assert float(gan.sliced_wasserstein(a, b)) == 0.0
    assert float(gan.sliced_wasserstein(b, c)) == pytest.approx(1.0)
    assert float(gan.sliced_wasserstein(c, b)) == pytest.approx(1.0)


def test_grnn_loss_decreases():
    p, grad = _target(1)
    cfg = gan.default_gan_config("grnn", batch_size=1, iterations=100, lr=1e-3)
    r = gan.attack_grnn(grad, p, CLS, cfg)
    assert np.mean(r.loss_trace[-10:]) < np.mean(r.loss_trace[:10])
    assert r.images.shape == (1, *SHAPE) and not r.flags["diverged"]


def test_generator_save_load(tmp_path):
    G = gan.untrained_generator(SHAPE, 4, None, seed=2)
    G.save(tmp_path / "g")
    H = gan.GeneratorHandle.load(tmp_path / "g")
    z = torch.randn(2, G.latent_dim)
    y = torch.tensor([0, 1])
    assert torch.equal(G.pixels(z, y), H.pixels(z, y))


class _Spy:
    def __init__(self, inner=None):
        self.inner = inner
        self.hashes = {}

    def local_procedure(self, k):
        return self.inner.local_procedure(k) if self.inner else None

    def on_update(self, t, u):
        self.hashes[(t, u.client_id)] = gan.params_hash(u.delta)


def test_dmgan_victims_run_unmodified_procedure(toy_dataset):
    dspec = gan._discriminator_spec(SHAPE, 4)
    cfg = FLConfig(num_clients=4, rounds=1, batch_size=20, lr=0.05, partition_mode="iid", seed=5)
    runs = []
    for attack in (True, False):
        setup = FederatedSetup.build(toy_dataset, dspec, cfg, max_test=50)
        hook = None
        if attack:
            hook = gan.DMGANAttacker(0, dspec, 3, gan.default_gan_config("dmgan", gan_epochs=1),
                                     toy_dataset.norm_stats, cfg.normalization)
        spy = _Spy(hook)
        run_rounds(setup, hooks=spy)
        runs.append(spy.hashes)
    victims = [k for k in runs[0] if k[1] != 0]
    assert len(victims) == 3
    assert all(runs[0][k] == runs[1][k] for k in victims)
    assert runs[0][(0, 0)] != runs[1][(0, 0)]


def test_dmgan_records_samples(toy_dataset):
    cfg = FLConfig(num_clients=3, rounds=2, batch_size=20, lr=0.05, partition_mode="iid", seed=0)
    res = gan.run_dmgan(toy_dataset, cfg, 1, gan.default_gan_config("dmgan", gan_epochs=1, samples=4),
                        max_test=50)
    assert len(res.samples) == 2 and res.samples[0].shape == (4, *SHAPE)
    assert len(res.accuracy) == 2


def test_dmgan_absent_class(toy_dataset):
    from fedleak.fl import ConfigError

    cfg = FLConfig(num_clients=2, rounds=1, batch_size=20, partition_mode="iid", seed=0)
    with pytest.raises(ConfigError):
        gan.run_dmgan(toy_dataset, cfg, 7, max_test=20)
