"""Optimization-based reconstruction from gradients and client updates.

Targets are either a raw batch gradient (:class:`ParameterSet`) or a
:class:`ClientUpdate`. Multi-step updates are compared through their per-step
normalization ``delta / (lr * num_steps)`` so that dummy gradients and
simulated dummy updates live on the same scale as the observation.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

from .data import NormStats, pixel_box
from .fl import ClientUpdate, UpdateMeta, capture_pseudo_gradient
from .labels import LabelAmbiguityError, adjust_counts, infer_counts_dlf, infer_label_idlg
from .models import (ArchitectureSpec, ParameterSet,
                     loss_and_param_grads, pre_fc_features)
from .results import ReconstructionResult
from .utils import torch_generator, total_variation

log = logging.getLogger(__name__)


class AttackAbort(RuntimeError):
    """An attack could not run at all (as opposed to running and failing)."""


@dataclass
class AttackConfig:
    """Hyperparameters shared by the optimization attacks.

    ``optimizer`` is ``lbfgs`` (quasi-Newton), ``adam`` or ``sgd``; ``signed``
    replaces the input gradient by its sign before the optimizer step.
    ``tv`` is the total-variation weight (alpha / lambda_tv).
    """

    batch_size: int = 10
    iterations: int = 300
    lr: float = 1.0
    optimizer: str = "lbfgs"
    distance: str = "l2"
    tv: float = 0.0
    lambda_mi: float = 1.0
    temperature: float = 10.0
    signed: bool = False
    boxed: bool = False
    lr_decay: bool = False
    restarts: int = 3
    history_size: int = 100
    order_prior: float = 1.0
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


DEFAULTS = {
    "dlg": AttackConfig(batch_size=10, iterations=300, lr=1.0, optimizer="lbfgs", distance="l2"),
    "idlg": AttackConfig(batch_size=1, iterations=300, lr=1.0, optimizer="lbfgs", distance="l2"),
    "inverting_gradients": AttackConfig(batch_size=10, iterations=24_000, lr=1.0, optimizer="adam",
                                        distance="cosine", tv=1e-1, signed=True, boxed=True,
                                        lr_decay=True),
    "dlf": AttackConfig(batch_size=10, iterations=400, lr=0.1, optimizer="adam",
                        distance="cosine", tv=1e-2, boxed=True),
    "cpa": AttackConfig(batch_size=10, iterations=25_000, lr=1e-3, optimizer="adam",
                        tv=0.0, lambda_mi=1.0, temperature=10.0),
}


def default_config(method: str, **overrides) -> AttackConfig:
    return replace(DEFAULTS[method], **overrides)


@dataclass
class Target:
    """What an attack matches: a gradient-like ParameterSet plus update metadata."""

    grad: ParameterSet
    update: ClientUpdate | None

    @property
    def is_update(self) -> bool:
        return self.update is not None


def as_target(update_or_grad) -> Target:
    if isinstance(update_or_grad, ClientUpdate):
        return Target(capture_pseudo_gradient(update_or_grad).normalized.detach(), update_or_grad)
    if isinstance(update_or_grad, ParameterSet):
        return Target(update_or_grad.detach(), None)
    raise TypeError(f"expected ClientUpdate or ParameterSet, got {type(update_or_grad).__name__}")


# --------------------------------------------------------------------------- #
# distances


def l2_distance(a: ParameterSet, b: ParameterSet) -> torch.Tensor:
    return sum(((a[k] - b[k]) ** 2).sum() for k in b)


def cosine_distance(a: ParameterSet, b: ParameterSet) -> torch.Tensor:
    dot = sum((a[k] * b[k]).sum() for k in b)
    na = torch.sqrt(sum((a[k] ** 2).sum() for k in b))
    nb = torch.sqrt(sum((b[k] ** 2).sum() for k in b))
    return 1 - dot / (na * nb + 1e-20)


DISTANCES = {"l2": l2_distance, "cosine": cosine_distance}


def _box(norm_stats: NormStats | None, mode: str):
    if norm_stats is None:
        return None
    lo, hi = pixel_box(norm_stats, mode)
    return lo, hi


def _clamp_(x: torch.Tensor, box) -> None:
    if box is None:
        return
    lo, hi = box
    with torch.no_grad():
        x.copy_(torch.max(torch.min(x, torch.as_tensor(hi).to(x)), torch.as_tensor(lo).to(x)))


def labels_from_counts(counts, n: int | None = None) -> torch.Tensor:
    """Expand a count vector into a sorted label list, rescaled to ``n`` entries."""
    counts = np.asarray(counts)
    if n is not None and counts.sum() != n:
        counts = adjust_counts(counts, n)
    return torch.from_numpy(np.repeat(np.arange(len(counts)), counts)).long()


def simulate_update(params: ParameterSet, spec: ArchitectureSpec, x: torch.Tensor,
                    y: torch.Tensor, lr: float, batch_size: int, epochs: int,
                    order: list[torch.Tensor] | None = None, per_epoch: bool = False):
    """Differentiable local SGD on a dummy dataset; returns the normalized delta.

    ``order`` lists the index batches of each epoch (flattened over epochs); by
    default the dummy set is walked in order. The result is
    ``(W_0 - W_U) / (lr * U)``; with ``per_epoch`` the per-epoch normalized
    deltas are returned too.
    """
    n = len(x)
    if order is None:
        order = [torch.arange(i, min(i + batch_size, n)) for i in range(0, n, batch_size)] * epochs
    steps_per_epoch = len(order) // epochs
    cur = params
    total = None
    epoch_sums, acc = [], None
    for s, idx in enumerate(order):
        _, g = loss_and_param_grads(cur, spec, x[idx], y[idx], create_graph=True)
        cur = cur.zip_map(g, lambda p, d: p - lr * d)
        acc = g if acc is None else acc + g
        if per_epoch and (s + 1) % steps_per_epoch == 0:
            epoch_sums.append(acc.scale(1.0 / steps_per_epoch))
            total = acc if total is None else total + acc
            acc = None
    if not per_epoch:
        return acc.scale(1.0 / len(order))
    if acc is not None:
        total = acc if total is None else total + acc
    return total.scale(1.0 / len(order)), epoch_sums


# --------------------------------------------------------------------------- #
# DLG / iDLG


def _init_dummy(shape, gen, init: str = "randn") -> torch.Tensor:
    if init == "uniform":
        return torch.rand(shape, generator=gen)
    return torch.randn(shape, generator=gen)


def _run_lbfgs(variables, closure_loss, cfg: AttackConfig, trace: list[float]) -> bool:
    def fresh():
        return torch.optim.LBFGS(variables, lr=cfg.lr, history_size=cfg.history_size,
                                 max_iter=1, line_search_fn="strong_wolfe")

    opt = fresh()
    prev = math.inf
    for _ in range(cfg.iterations):
        def closure():
            opt.zero_grad()
            loss = closure_loss()
            loss.backward()
            return loss

        loss = opt.step(closure)
        val = float(loss.detach())
        trace.append(val)
        if not math.isfinite(val):
            return False
        if val < 1e-12:
            break
        # a stalled line search leaves the curvature memory useless; start over
        if val == prev:
            opt = fresh()
        prev = val
    return True


def attack_dlg(target_grad, params: ParameterSet, spec: ArchitectureSpec,
               cfg: AttackConfig | None = None) -> ReconstructionResult:
    """Joint image and soft-label optimization under the L2 gradient distance.

    ``target_grad`` may be a raw gradient or a client update (matched through
    its per-step normalization). Non-finite losses restart from a new seed.
    """
    cfg = cfg or default_config("dlg")
    t0 = time.perf_counter()
    tgt = as_target(target_grad)
    params = params.detach()
    n, c = cfg.batch_size, spec.output_classes
    dist = DISTANCES[cfg.distance]
    if tgt.grad.norm() == 0:
        x = torch.zeros((n, *spec.input_shape))
        return ReconstructionResult("dlg", x, torch.zeros(n, dtype=torch.long), seed=cfg.seed,
                                    flags={"diverged": True, "degenerate_target": True},
                                    seconds=time.perf_counter() - t0)
    best = None
    for attempt in range(cfg.restarts + 1):
        gen = torch_generator(cfg.seed + 1000 * attempt)
        x = _init_dummy((n, *spec.input_shape), gen).requires_grad_(True)
        y = torch.randn((n, c), generator=gen).requires_grad_(True)
        trace: list[float] = []

        def loss_fn():
            _, g = loss_and_param_grads(params, spec, x, F.softmax(y, -1), create_graph=True)
            return dist(g, tgt.grad)

        ok = _run_lbfgs([x, y], loss_fn, cfg, trace)
        finite = [v for v in trace if math.isfinite(v)]
        cand = (x.detach().clone(), y.detach().argmax(1), trace, finite[-1] if finite else math.inf)
        if best is None or cand[3] < best[3]:
            best = cand
        if ok:
            break
        log.warning("dlg restart %d: non-finite loss", attempt + 1)
    x, labels, trace, _ = best
    return ReconstructionResult("dlg", x, labels, loss_trace=trace, iterations=len(trace),
                                seed=cfg.seed, seconds=time.perf_counter() - t0,
                                flags={"diverged": not ok, "restarts": attempt})


def attack_idlg(target_grad, params: ParameterSet, spec: ArchitectureSpec,
                cfg: AttackConfig | None = None, label: int | None = None) -> ReconstructionResult:
    """Single-image reconstruction with the label fixed by the sign rule.

    When the sign rule is ambiguous a seeded random class is used and
    ``flags["label_fallback"]`` records it. ``label`` forces a class.
    """
    cfg = cfg or default_config("idlg")
    t0 = time.perf_counter()
    tgt = as_target(target_grad)
    params = params.detach()
    flags: dict = {}
    gen = torch_generator(cfg.seed)
    if label is None:
        try:
            label = infer_label_idlg(tgt.grad["head.weight"], require_single=not tgt.is_update)
        except LabelAmbiguityError as exc:
            label = int(torch.randint(spec.output_classes, (1,), generator=gen))
            flags["label_fallback"] = str(exc)
    y = torch.full((cfg.batch_size,), int(label), dtype=torch.long)
    dist = DISTANCES[cfg.distance]
    x = _init_dummy((cfg.batch_size, *spec.input_shape), gen).requires_grad_(True)
    trace: list[float] = []

    def loss_fn():
        _, g = loss_and_param_grads(params, spec, x, y, create_graph=True)
        return dist(g, tgt.grad)

    ok = _run_lbfgs([x], loss_fn, cfg, trace)
    flags["diverged"] = not ok
    return ReconstructionResult("idlg", x.detach(), y, loss_trace=trace, iterations=len(trace),
                                seed=cfg.seed, seconds=time.perf_counter() - t0, flags=flags)


# --------------------------------------------------------------------------- #
# first-order attacks


def _first_order(variables, loss_fn, cfg: AttackConfig, box, trace: list[float],
                 clamp_vars=None) -> None:
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(variables, lr=cfg.lr)
    elif cfg.optimizer == "sgd":
        opt = torch.optim.SGD(variables, lr=cfg.lr)
    else:
        raise ValueError(f"{cfg.optimizer!r} is not a first-order optimizer")
    sched = None
    if cfg.lr_decay:
        m = [int(cfg.iterations * f) for f in (3 / 8, 5 / 8, 7 / 8)]
        sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=m, gamma=0.1)
    for _ in range(cfg.iterations):
        opt.zero_grad()
        loss = loss_fn()
        loss.backward()
        if cfg.signed:
            for v in variables:
                if v.grad is not None:
                    v.grad.sign_()
        opt.step()
        if sched is not None:
            sched.step()
        if cfg.boxed:
            for v in clamp_vars or variables[:1]:
                _clamp_(v, box)
        val = float(loss.detach())
        trace.append(val)
        if not math.isfinite(val):
            break


def attack_inverting_gradients(update_or_grad, params: ParameterSet, spec: ArchitectureSpec,
                               cfg: AttackConfig | None = None, labels=None,
                               norm_stats: NormStats | None = None,
                               normalization: str = "standardized") -> ReconstructionResult:
    """Cosine gradient matching with a TV prior.

    ``labels`` (a label tensor of length ``cfg.batch_size``) fixes the dummy
    labels; otherwise soft labels are optimized jointly. For a client update
    the dummy batch is run through the update's local SGD schedule
    (``num_steps`` steps of ``batch_size`` at ``lr``, cycling through the
    dummy set) and the normalized simulated delta is matched.
    """
    cfg = cfg or default_config("inverting_gradients")
    t0 = time.perf_counter()
    tgt = as_target(update_or_grad)
    if tgt.grad.norm() == 0:
        raise AttackAbort("target gradient has zero norm; cosine distance undefined")
    params = params.detach()
    gen = torch_generator(cfg.seed)
    n = cfg.batch_size
    x = _init_dummy((n, *spec.input_shape), gen).requires_grad_(True)
    joint = labels is None
    y_var = torch.randn((n, spec.output_classes), generator=gen).requires_grad_(True) if joint else None
    y_fixed = None if joint else torch.as_tensor(labels).long()
    box = _box(norm_stats, normalization)
    dist = DISTANCES[cfg.distance]
    order = None
    if tgt.is_update:
        m = tgt.update.meta
        bs = min(m.batch_size, n)
        per_epoch = [torch.arange(i, min(i + bs, n)) for i in range(0, n, bs)]
        order = [per_epoch[s % len(per_epoch)] for s in range(m.num_steps)]

    def loss_fn():
        y = F.softmax(y_var, -1) if joint else y_fixed
        if tgt.is_update:
            g = simulate_update(params, spec, x, y, tgt.update.meta.lr, len(order[0]), 1, order)
        else:
            _, g = loss_and_param_grads(params, spec, x, y, create_graph=True)
        return dist(g, tgt.grad) + cfg.tv * total_variation(x)

    trace: list[float] = []
    variables = [x] + ([y_var] if joint else [])
    _first_order(variables, loss_fn, cfg, box, trace, clamp_vars=[x])
    out_labels = y_var.detach().argmax(1) if joint else y_fixed
    return ReconstructionResult("inverting_gradients", x.detach(), out_labels, loss_trace=trace,
                                iterations=len(trace), seed=cfg.seed,
                                seconds=time.perf_counter() - t0,
                                flags={"diverged": not all(math.isfinite(v) for v in trace),
                                       "joint_labels": joint})


def attack_dlf(update: ClientUpdate, global_params: ParameterSet, spec: ArchitectureSpec,
               cfg: AttackConfig | None = None, counts=None, probe_seed: int = 0,
               norm_stats: NormStats | None = None, normalization: str = "standardized",
               max_dummies: int | None = None) -> ReconstructionResult:
    """Simulation-based reconstruction of a client's whole local dataset.

    A dummy dataset of ``|D|`` images with labels from the inferred counts is
    run through the client's ``E``-epoch SGD each iteration, reshuffling the
    batch order every time. The loss matches the total simulated update to
    the observed one and, as the order-invariant term, each epoch's summed
    update to the observed per-epoch average (weight ``cfg.order_prior``).
    """
    cfg = cfg or default_config("dlf")
    t0 = time.perf_counter()
    if not isinstance(update, ClientUpdate):
        n0 = cfg.batch_size
        update = ClientUpdate(-1, 0, update, UpdateMeta(1.0, 1.0, 1, n0, 1, n0))
    m = update.meta
    tgt = as_target(update)
    params = global_params.detach()
    if counts is None:
        try:
            counts = infer_counts_dlf(update, params, spec, probe_seed).counts
        except Exception as exc:
            raise AttackAbort(f"label count inference failed: {exc}") from exc
    counts = np.asarray(counts)
    n = int(counts.sum()) if max_dummies is None else min(int(counts.sum()), max_dummies)
    y = labels_from_counts(counts, n)
    gen = torch_generator(cfg.seed)
    x = _init_dummy((n, *spec.input_shape), gen).requires_grad_(True)
    box = _box(norm_stats, normalization)
    dist = DISTANCES[cfg.distance]
    shuffle = np.random.default_rng(cfg.seed)
    bs = m.batch_size

    def loss_fn():
        order = []
        for _ in range(m.epochs):
            perm = torch.from_numpy(shuffle.permutation(n))
            order += [perm[i:i + bs] for i in range(0, n, bs)]
        total, epochs = simulate_update(params, spec, x, y, m.lr, bs, m.epochs, order, per_epoch=True)
        loss = dist(total, tgt.grad)
        if cfg.order_prior and m.epochs > 1:
            loss = loss + cfg.order_prior * sum(dist(e, tgt.grad) for e in epochs) / len(epochs)
        return loss + cfg.tv * total_variation(x)

    trace: list[float] = []
    _first_order([x], loss_fn, cfg, box, trace)
    return ReconstructionResult("dlf", x.detach(), y, counts=counts, loss_trace=trace,
                                iterations=len(trace), seed=cfg.seed,
                                seconds=time.perf_counter() - t0,
                                flags={"diverged": not all(math.isfinite(v) for v in trace)})


# --------------------------------------------------------------------------- #
# CPA


class WhiteningError(ValueError):
    pass


@dataclass
class Whitening:
    matrix: torch.Tensor      # (n, m): maps centered observations to unit covariance
    dewhiten: torch.Tensor    # (m, n)
    mean: torch.Tensor        # (m, 1)
    rank: int


def whiten(G: torch.Tensor, n: int, rel_tol: float = 1e-10) -> Whitening:
    """PCA whitening of the rows of ``G`` (mixtures x samples) down to ``n`` components."""
    G = G.double()
    mean = G.mean(1, keepdim=True)
    Gc = G - mean
    cov = Gc @ Gc.T / Gc.shape[1]
    evals, evecs = torch.linalg.eigh(cov)
    evals, evecs = evals.flip(0), evecs.flip(1)
    rank = int((evals > rel_tol * evals[0].clamp_min(1e-300)).sum())
    if rank < n:
        raise WhiteningError(f"gradient matrix has rank {rank} < {n} requested sources")
    d, e = evals[:n], evecs[:, :n]
    return Whitening((e / d.sqrt()).T, e * d.sqrt(), mean, rank)


def negentropy(s: torch.Tensor, a: float = 1.0) -> torch.Tensor:
    """Log-cosh contrast ``E[(1/a^2) log cosh^2(a s)]`` per row."""
    return (2.0 / a ** 2 * _logcosh(a * s)).mean(1)


def _logcosh(x: torch.Tensor) -> torch.Tensor:
    return x.abs() + F.softplus(-2 * x.abs()) - math.log(2.0)


_GAUSS_NEGENTROPY = None


def _gauss_level(a: float = 1.0) -> float:
    global _GAUSS_NEGENTROPY
    if _GAUSS_NEGENTROPY is None:
        z = torch.randn(200_000, generator=torch_generator(0), dtype=torch.float64)
        _GAUSS_NEGENTROPY = float(negentropy(z[None], a))
    return _GAUSS_NEGENTROPY


def unmix(Z: torch.Tensor, cfg: AttackConfig, image_shape=None, a: float = 1.0):
    """Optimize an unmixing matrix ``U`` for whitened mixtures ``Z`` (n x samples).

    Maximizes ``sum_i (J(U_i Z) - J_gauss)^2 - lambda_tv TV - lambda_mi R_mi``
    with ``R_mi = mean_{i != j} exp(T |cos(U_i, U_j)|)``. ``U`` is kept
    orthogonal, ``U = expm(K - K^T) Q0``, so every estimate has unit variance
    and the decorrelation term stays at its floor; a free ``U`` stalls on the
    kink of ``|cos|`` at zero.
    """
    n = Z.shape[0]
    gen = torch_generator(cfg.seed)
    Q0 = torch.linalg.qr(torch.randn(n, n, generator=gen, dtype=torch.float64))[0]
    K = torch.zeros(n, n, dtype=torch.float64, requires_grad=True)
    Zd = Z.double()
    opt = torch.optim.Adam([K], lr=cfg.lr)
    g0 = _gauss_level(a)
    off = ~torch.eye(n, dtype=torch.bool)
    trace: list[float] = []
    for _ in range(cfg.iterations):
        opt.zero_grad()
        U = torch.linalg.matrix_exp(K - K.T) @ Q0
        S = U @ Zd
        obj = ((negentropy(S, a) - g0) ** 2).sum()
        if cfg.tv and image_shape is not None:
            obj = obj - cfg.tv * total_variation(S.view(n, *image_shape))
        if cfg.lambda_mi and n > 1:
            cos = (U @ U.T).abs()[off]
            obj = obj - cfg.lambda_mi * torch.exp(cfg.temperature * cos).mean()
        (-obj).backward()
        opt.step()
        trace.append(float(obj.detach()))
    with torch.no_grad():
        U = torch.linalg.matrix_exp(K - K.T) @ Q0
    return U.detach(), trace


def _disambiguate_sign(est: torch.Tensor, uncentered: torch.Tensor | None) -> torch.Tensor:
    """Flip each row so that its uncentered mean is positive (skewness if ~0)."""
    out = est.clone()
    for i in range(len(est)):
        ref = float(uncentered[i].mean()) if uncentered is not None else 0.0
        if abs(ref) < 1e-8 * float(uncentered[i].abs().max() if uncentered is not None else 1.0):
            c = est[i] - est[i].mean()
            ref = float((c ** 3).mean())
        if ref < 0:
            out[i] = -out[i]
    return out


def separate_sources(G: torch.Tensor, n: int, cfg: AttackConfig, image_shape=None):
    """Blind source separation of the rows of ``G`` into ``n`` sources.

    Returns ``(sources, trace, whitening)``; ``sources`` are ``n x samples``
    with unit variance, sign-disambiguated by the uncentered row means.
    """
    w = whiten(G, n)
    Gd = G.double()
    Z = w.matrix @ (Gd - w.mean)
    U, trace = unmix(Z, cfg, image_shape)
    est = U @ Z
    unc = U @ (w.matrix @ Gd)
    return _disambiguate_sign(est, unc), trace, w


def _rescale_rows(est: torch.Tensor, target_mean: float, target_std: float) -> torch.Tensor:
    c = est - est.mean(1, keepdim=True)
    return c / c.std(1, keepdim=True).clamp_min(1e-12) * target_std + target_mean


def attack_cpa(update_or_grad, spec: ArchitectureSpec, cfg: AttackConfig | None = None,
               layer: str = "fc1", pixel_mean: float = 0.0, pixel_std: float = 1.0
               ) -> ReconstructionResult:
    """Recover the inputs of a fully connected first layer by ICA on its gradient.

    Each row of the weight gradient is a linear mixture of the batch inputs.
    The rows are whitened to ``cfg.batch_size`` components and unmixed by
    negentropy maximization. Recovered rows are rescaled to
    ``pixel_mean``/``pixel_std`` (statistics of the normalized data).
    """
    cfg = cfg or default_config("cpa")
    t0 = time.perf_counter()
    tgt = as_target(update_or_grad)
    key = f"{layer}.weight"
    if key not in tgt.grad:
        raise AttackAbort(f"model has no fully connected layer {layer!r}")
    G = tgt.grad[key].detach()
    if spec.arch not in ("mlp256",) and layer == "fc1" and G.shape[1] != spec.input_dim:
        raise AttackAbort("first layer does not see raw pixels; use attack_cpa_fi")
    try:
        S, trace, w = separate_sources(G, cfg.batch_size, cfg, spec.input_shape)
    except WhiteningError as exc:
        raise AttackAbort(str(exc)) from exc
    images = _rescale_rows(S, pixel_mean, pixel_std).float().view(-1, *spec.input_shape)
    return ReconstructionResult("cpa", images, loss_trace=trace, iterations=len(trace),
                                seed=cfg.seed, seconds=time.perf_counter() - t0,
                                extra={"rank": w.rank})


def invert_features(params: ParameterSet, spec: ArchitectureSpec, z: torch.Tensor,
                    cfg: AttackConfig, norm_stats: NormStats | None = None,
                    normalization: str = "standardized"):
    """Find ``x`` maximizing ``cos(f(x), z) - tv * TV(x)`` with ``f`` the pre-FC features."""
    gen = torch_generator(cfg.seed)
    x = _init_dummy((len(z), *spec.input_shape), gen).mul_(0.1).requires_grad_(True)
    params = params.detach()
    z = z.detach().float()
    box = _box(norm_stats, normalization)
    trace: list[float] = []

    def loss_fn():
        f = pre_fc_features(params, spec, x)
        return -F.cosine_similarity(f, z, dim=1).mean() + cfg.tv * total_variation(x)

    _first_order([x], loss_fn, cfg, box, trace)
    return x.detach(), trace


def attack_cpa_fi(update_or_grad, params: ParameterSet, spec: ArchitectureSpec,
                  cfg: AttackConfig | None = None, fi_cfg: AttackConfig | None = None,
                  norm_stats: NormStats | None = None, normalization: str = "standardized"
                  ) -> ReconstructionResult:
    """CPA on the first FC layer of a CNN, then feature inversion of the embeddings.

    Stage 1 separates the pre-FC embeddings (non-negative ReLU outputs, so
    each is sign-fixed to a positive mean). Stage 2 optimizes images whose
    pre-FC features align with each embedding.
    """
    cfg = cfg or default_config("cpa")
    fi_cfg = fi_cfg or AttackConfig(iterations=2000, lr=0.05, optimizer="adam", tv=0.05,
                                    boxed=True, seed=cfg.seed)
    t0 = time.perf_counter()
    tgt = as_target(update_or_grad)
    if "fc1.weight" not in tgt.grad:
        raise AttackAbort("model has no fc1 layer")
    G = tgt.grad["fc1.weight"].detach()
    try:
        S, trace, w = separate_sources(G, cfg.batch_size, cfg, None)
    except WhiteningError as exc:
        raise AttackAbort(f"stage 1 failed: {exc}") from exc
    emb = S - S.min(1, keepdim=True).values
    x, fi_trace = invert_features(params, spec, emb, fi_cfg, norm_stats, normalization)
    return ReconstructionResult("cpa_fi", x, loss_trace=trace + fi_trace,
                                iterations=len(trace) + len(fi_trace), seed=cfg.seed,
                                seconds=time.perf_counter() - t0,
                                extra={"rank": w.rank, "embeddings": emb.float()})
