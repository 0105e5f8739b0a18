"""GAN-based attacks: latent search (GGL), generator fitting (GRNN) and the
client-side generator attack run inside the FedAvg loop (DMGAN).

Generators emit ``tanh`` images that are mapped to [0, 1] pixels and then
into the target model's normalized input domain.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetHandle, NormStats
from .fl import ClientUpdate, ConfigError, FederatedSetup, FLConfig, client_update, run_rounds
from .inversion import DISTANCES, as_target
from .labels import LabelAmbiguityError, infer_label_idlg
from .models import (ArchitectureSpec, ParameterSet, build_model, generate, logits,
                     loss_and_param_grads)
from .results import ReconstructionResult
from .utils import derive_seed, torch_generator, total_variation



@dataclass
class GanAttackConfig:
    """``iterations`` is the evaluation budget for CMA-ES and the step count
    for first-order generator training."""

    optimizer: str = "cma_es"
    population: int | None = None
    sigma: float = 0.5
    iterations: int = 25_000
    lr: float = 1e-4
    batch_size: int = 1
    l2_weight: float = 1.0
    wasserstein_weight: float = 1.0
    tv_weight: float = 1e-3
    distance: str = "cosine"
    target_class: int = 3
    gan_epochs: int = 10
    gan_lr: float = 2e-4
    samples: int = 64
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


GAN_DEFAULTS = {
    "ggl": GanAttackConfig(optimizer="cma_es", batch_size=1, iterations=25_000),
    "grnn": GanAttackConfig(optimizer="adam", batch_size=10, iterations=1000, lr=1e-4),
    "dmgan": GanAttackConfig(optimizer="adam", batch_size=1, gan_epochs=10),
}


def default_gan_config(method: str, **overrides) -> GanAttackConfig:
    return replace(GAN_DEFAULTS[method], **overrides)


@dataclass
class GeneratorHandle:
    """Generator parameters plus the mapping from its output to model inputs."""

    spec: ArchitectureSpec
    params: ParameterSet
    norm_stats: NormStats | None
    normalization: str = "standardized"
    pretrained: bool = False
    corpus: str = ""

    @property
    def latent_dim(self) -> int:
        return self.spec.latent_dim

    @property
    def output_shape(self) -> tuple[int, int, int]:
        return self.spec.input_shape

    def pixels(self, z: torch.Tensor, labels: torch.Tensor | None = None) -> torch.Tensor:
        out = generate(self.params, self.spec, z, labels)
        if isinstance(out, tuple):
            out = out[0]
        return (out + 1) / 2

    def images(self, z: torch.Tensor, labels: torch.Tensor | None = None) -> torch.Tensor:
        return to_model_domain(self.pixels(z, labels), self.norm_stats, self.normalization)

    def save(self, path) -> None:
        self.params.save(path, {"arch": self.spec.to_dict(), "pretrained": self.pretrained,
                                "corpus": self.corpus, "normalization": self.normalization,
                                "norm_stats": None if self.norm_stats is None else
                                [list(self.norm_stats.mean), list(self.norm_stats.std)]})

    @classmethod
    def load(cls, path) -> "GeneratorHandle":
        params, m = ParameterSet.load(path)
        ns = None if m["norm_stats"] is None else NormStats(tuple(m["norm_stats"][0]),
                                                            tuple(m["norm_stats"][1]))
        return cls(ArchitectureSpec.from_dict(m["arch"]), params, ns, m["normalization"],
                   m["pretrained"], m["corpus"])


def to_model_domain(pixels: torch.Tensor, norm_stats: NormStats | None, mode: str) -> torch.Tensor:
    if mode == "unit_range" or norm_stats is None:
        return pixels
    mean, std = (torch.from_numpy(a).to(pixels) for a in norm_stats.arrays(pixels.dim()))
    return (pixels - mean) / std


def untrained_generator(shape, num_classes: int, norm_stats: NormStats | None,
                        conditional: bool = True, seed: int = 0,
                        normalization: str = "standardized") -> GeneratorHandle:
    spec = ArchitectureSpec("dcgan_generator", shape, num_classes, conditional=conditional)
    return GeneratorHandle(spec, build_model(spec, seed), norm_stats, normalization, False, "")


# --------------------------------------------------------------------------- #
# generator pretraining


def _discriminator_spec(shape, num_classes: int) -> ArchitectureSpec:
    return ArchitectureSpec("dmgan_discriminator", shape, num_classes, backbone="cnn_small")


def pretrain_generator(dataset: DatasetHandle, indices=None, epochs: int = 15,
                       batch_size: int = 64, lr: float = 2e-4, seed: int = 0,
                       normalization: str = "standardized") -> GeneratorHandle:
    """Train a class-conditional DCGAN generator on ``dataset[indices]``.

    The discriminator is a small CNN with ``C + 1`` outputs (real classes plus
    "fake"), trained with cross-entropy; the generator is trained to make
    ``D`` predict the conditioning class.
    """
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    real = dataset.batch(idx, "unit_range") * 2 - 1
    labels = dataset.label_tensor(idx)
    c = dataset.num_classes
    gspec = ArchitectureSpec("dcgan_generator", dataset.image_shape, c, conditional=True)
    dspec = _discriminator_spec(dataset.image_shape, c)
    gp = build_model(gspec, derive_seed(seed, "gen") % 2**31).requires_grad_()
    dp = build_model(dspec, derive_seed(seed, "disc") % 2**31).requires_grad_()
    gopt = torch.optim.Adam(list(gp.values()), lr=lr, betas=(0.5, 0.999))
    dopt = torch.optim.Adam(list(dp.values()), lr=lr, betas=(0.5, 0.999))
    gen = torch_generator(seed)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        perm = rng.permutation(len(idx))
        for i in range(0, len(perm), batch_size):
            b = torch.from_numpy(perm[i:i + batch_size])
            xr, yr = real[b], labels[b]
            z = torch.randn(len(b), gspec.latent_dim, generator=gen)
            yf = torch.randint(c, (len(b),), generator=gen)
            xf = generate(gp, gspec, z, yf)
            d_loss = (F.cross_entropy(logits(dp, dspec, xr), yr) +
                      F.cross_entropy(logits(dp, dspec, xf.detach()), torch.full_like(yf, c)))
            dopt.zero_grad()
            d_loss.backward()
            dopt.step()
            g_loss = F.cross_entropy(logits(dp, dspec, xf), yf)
            gopt.zero_grad()
            g_loss.backward()
            gopt.step()
    return GeneratorHandle(gspec, gp.detach(), dataset.norm_stats, normalization, True,
                           f"{dataset.name}:{len(idx)}")


# --------------------------------------------------------------------------- #
# GGL


def _infer_label(tgt, spec: ArchitectureSpec, gen: torch.Generator, flags: dict) -> int:
    try:
        return infer_label_idlg(tgt.grad["head.weight"], require_single=not tgt.is_update)
    except LabelAmbiguityError as exc:
        flags["label_fallback"] = str(exc)
        return int(torch.randint(spec.output_classes, (1,), generator=gen))


def attack_ggl(update_or_grad, generator: GeneratorHandle, params: ParameterSet,
               spec: ArchitectureSpec, cfg: GanAttackConfig | None = None,
               label: int | None = None) -> ReconstructionResult:
    """CMA-ES search over the generator's latent space for one image.

    The label comes from the sign rule (seeded random fallback). Each
    candidate latent is scored by the distance between the gradient of
    ``G(z)`` under that label and the target's normalized gradient.
    """
    import cma

    cfg = cfg or default_gan_config("ggl")
    if generator.output_shape != spec.input_shape:
        raise ValueError(f"generator emits {generator.output_shape}, model expects {spec.input_shape}")
    t0 = time.perf_counter()
    tgt = as_target(update_or_grad)
    params = params.detach()
    flags: dict = {}
    gen = torch_generator(cfg.seed)
    if label is None:
        label = _infer_label(tgt, spec, gen, flags)
    y = torch.tensor([int(label)])
    cond = y if generator.spec.conditional else None
    n = generator.latent_dim
    dist = DISTANCES[cfg.distance]
    names = list(tgt.grad)

    def score(z: np.ndarray) -> float:
        zt = torch.as_tensor(z, dtype=torch.float32)[None]
        with torch.no_grad():
            x = generator.images(zt, cond)
        _, g = loss_and_param_grads(params, spec, x, y, names=names)
        return float(dist(g, tgt.grad))

    popsize = cfg.population or 4 + int(3 * math.log(n))
    es = cma.CMAEvolutionStrategy(np.zeros(n), cfg.sigma,
                                  {"popsize": popsize, "seed": cfg.seed + 1, "verbose": -9,
                                   "maxfevals": cfg.iterations, "CMA_diagonal": n > 50})
    trace: list[float] = []
    while not es.stop():
        cands = es.ask()
        vals = [score(z) for z in cands]
        es.tell(cands, vals)
        trace.append(float(min(vals)))
    best = torch.as_tensor(es.result.xbest, dtype=torch.float32)[None]
    with torch.no_grad():
        x = generator.images(best, cond)
    return ReconstructionResult("ggl", x, y, loss_trace=trace, iterations=int(es.result.evaluations),
                                seed=cfg.seed, seconds=time.perf_counter() - t0, flags=flags,
                                extra={"latent": best[0].tolist(), "label": int(label),
                                       "pretrained_generator": generator.pretrained})


# --------------------------------------------------------------------------- #
# GRNN


def sliced_wasserstein(a: ParameterSet, b: ParameterSet) -> torch.Tensor:
    """Sum over tensors of the 1-D W1 distance between their sorted entries."""
    return sum((torch.sort(a[k].flatten())[0] - torch.sort(b[k].flatten())[0]).abs().mean()
               for k in b)


def attack_grnn(update_or_grad, params: ParameterSet, spec: ArchitectureSpec,
                cfg: GanAttackConfig | None = None, norm_stats: NormStats | None = None,
                normalization: str = "standardized") -> ReconstructionResult:
    """Fit a fresh generator so that its (image, soft label) batch reproduces the target.

    The loss is ``l2_weight * L2 + wasserstein_weight * W1 + tv_weight * TV``
    between dummy and target gradients; labels come from a GLU head.
    """
    cfg = cfg or default_gan_config("grnn")
    t0 = time.perf_counter()
    tgt = as_target(update_or_grad)
    params = params.detach()
    gspec = ArchitectureSpec("grnn_generator", spec.input_shape, spec.output_classes)
    gp = build_model(gspec, cfg.seed).requires_grad_()
    gen = torch_generator(cfg.seed)
    z = torch.randn(cfg.batch_size, gspec.latent_dim, generator=gen)
    opt = torch.optim.Adam(list(gp.values()), lr=cfg.lr)
    trace: list[float] = []
    diverged = False
    for _ in range(cfg.iterations):
        px, y = generate(gp, gspec, z)
        x = to_model_domain((px + 1) / 2, norm_stats, normalization)
        _, g = loss_and_param_grads(params, spec, x, y, create_graph=True)
        loss = (cfg.l2_weight * sum(((g[k] - tgt.grad[k]) ** 2).sum() for k in g)
                + cfg.wasserstein_weight * sliced_wasserstein(g, tgt.grad)
                + cfg.tv_weight * total_variation(x))
        opt.zero_grad()
        loss.backward()
        opt.step()
        val = float(loss.detach())
        trace.append(val)
        if not math.isfinite(val):
            diverged = True
            break
    with torch.no_grad():
        px, y = generate(gp.detach(), gspec, z)
        x = to_model_domain((px + 1) / 2, norm_stats, normalization)
    return ReconstructionResult("grnn", x, y.argmax(1), loss_trace=trace, iterations=len(trace),
                                seed=cfg.seed, seconds=time.perf_counter() - t0,
                                flags={"diverged": diverged})


# --------------------------------------------------------------------------- #
# DMGAN


def discriminator_step(dparams: ParameterSet, dspec: ArchitectureSpec, real_x, real_y,
                       fake_x, lr: float) -> tuple[ParameterSet, float, float]:
    """One SGD step of the discriminator on real and fake (extra-class) samples.

    Returns the new parameters and the batch loss before and after the step.
    """
    fake_y = torch.full((len(fake_x),), dspec.output_classes - 1, dtype=torch.long)
    x = torch.cat([real_x, fake_x])
    y = torch.cat([real_y, fake_y])
    before, g = loss_and_param_grads(dparams, dspec, x, y)
    new = dparams.zip_map(g, lambda p, d: p - lr * d)
    with torch.no_grad():
        after = F.cross_entropy(logits(new, dspec, x), y)
    return new, float(before.detach()), float(after)


class DMGANAttacker:
    """Attacker hook: trains a local generator against the received global
    model and injects its samples, labelled as the extra class, into local
    training."""

    serial = True

    def __init__(self, attacker_id: int, dspec: ArchitectureSpec, target_class: int,
                 cfg: GanAttackConfig, norm_stats: NormStats | None, normalization: str):
        self.attacker_id = attacker_id
        self.dspec = dspec
        self.target = target_class
        self.cfg = cfg
        self.gspec = ArchitectureSpec("dcgan_generator", dspec.input_shape, dspec.num_classes)
        self.gparams = build_model(self.gspec, derive_seed(cfg.seed, "dmgan_gen") % 2**31).requires_grad_()
        self.gopt = torch.optim.Adam(list(self.gparams.values()), lr=cfg.gan_lr, betas=(0.5, 0.999))
        self.gen = torch_generator(derive_seed(cfg.seed, "dmgan_z"))
        self.norm_stats, self.normalization = norm_stats, normalization
        self.fixed_z = torch.randn(cfg.samples, self.gspec.latent_dim, generator=self.gen)
        self.samples: list[torch.Tensor] = []

    def sample(self, z: torch.Tensor) -> torch.Tensor:
        px = (generate(self.gparams, self.gspec, z) + 1) / 2
        return to_model_domain(px, self.norm_stats, self.normalization)

    def local_procedure(self, client_id: int):
        return self._procedure if client_id == self.attacker_id else None

    def _train_generator(self, dparams: ParameterSet, steps: int, batch: int) -> None:
        dparams = dparams.detach()
        target = torch.full((batch,), self.target, dtype=torch.long)
        for _ in range(steps):
            z = torch.randn(batch, self.gspec.latent_dim, generator=self.gen)
            loss = F.cross_entropy(logits(dparams, self.dspec, self.sample(z)), target)
            self.gopt.zero_grad()
            loss.backward()
            self.gopt.step()

    def _procedure(self, global_params, spec, x, y, cfg: FLConfig, round_idx, client_id,
                   instrument=False, num_classes=None) -> ClientUpdate:
        steps_per_epoch = max(1, math.ceil(len(y) / cfg.batch_size))
        self._train_generator(global_params, self.cfg.gan_epochs * steps_per_epoch, cfg.batch_size)
        with torch.no_grad():
            self.samples.append(self.sample(self.fixed_z).detach().clone())
            n_fake = max(1, len(y) // 2)
            fake = self.sample(torch.randn(n_fake, self.gspec.latent_dim, generator=self.gen))
        fake_y = torch.full((n_fake,), spec.output_classes - 1, dtype=torch.long)
        xa, ya = torch.cat([x, fake]), torch.cat([y, fake_y])
        return client_update(global_params, spec, xa, ya, cfg, round_idx, client_id,
                             instrument=instrument, num_classes=num_classes)


@dataclass
class DMGANResult:
    samples: list[torch.Tensor]
    accuracy: list[float | None]
    attacker_id: int
    generator: GeneratorHandle
    records: list = field(default_factory=list)


def run_dmgan(dataset: DatasetHandle, fl_cfg: FLConfig, target_class: int,
              gan_cfg: GanAttackConfig | None = None, attacker_id: int = 0,
              run_dir=None, max_test: int | None = 2000) -> DMGANResult:
    """FedAvg with one client running the generator attack for ``target_class``.

    The global model is a CNN discriminator with one extra output. The
    attacker's own samples of the target class are removed; victims train
    normally.
    """
    gan_cfg = gan_cfg or default_gan_config("dmgan", target_class=target_class)
    dspec = _discriminator_spec(dataset.image_shape, dataset.num_classes)
    setup = FederatedSetup.build(dataset, dspec, fl_cfg, max_test=max_test)
    if not any((setup.client_y[k] == target_class).any()
               for k in range(fl_cfg.num_clients) if k != attacker_id):
        raise ConfigError(f"target class {target_class} is absent from every victim shard")
    keep = setup.client_y[attacker_id] != target_class
    setup.client_x[attacker_id] = setup.client_x[attacker_id][keep]
    setup.client_y[attacker_id] = setup.client_y[attacker_id][keep]
    attacker = DMGANAttacker(attacker_id, dspec, target_class, gan_cfg, dataset.norm_stats,
                             fl_cfg.normalization)
    records = run_rounds(setup, hooks=attacker, run_dir=run_dir)
    handle = GeneratorHandle(attacker.gspec, attacker.gparams.detach(), dataset.norm_stats,
                             fl_cfg.normalization, True, f"dmgan:{dataset.name}")
    return DMGANResult(attacker.samples, [r.accuracy for r in records], attacker_id, handle, records)


def params_hash(params: ParameterSet) -> str:
    h = hashlib.sha256()
    for k, v in params.items():
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()
