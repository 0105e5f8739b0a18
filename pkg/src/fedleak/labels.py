"""Label and label-count inference from classifier-head gradients.

All procedures read the head weight/bias gradient (or the per-step normalized
head delta of a multi-step client update). Count estimates are returned as
:class:`LabelCountEstimate` with the pre-rounding scores kept alongside the
integer counts.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import nnls

from .fl import ClientUpdate, capture_pseudo_gradient
from .models import ArchitectureSpec, ParameterSet, forward, logits
from .utils import torch_generator

log = logging.getLogger(__name__)


class LabelAmbiguityError(ValueError):
    """The sign rule found no unique label (multi-sample or degenerate gradient)."""


class LabelInferenceError(RuntimeError):
    pass


@dataclass
class LabelCountEstimate:
    counts: np.ndarray
    raw_scores: np.ndarray
    method: str
    total: int
    extra: dict = field(default_factory=dict)

    def to_dict(self, truth=None) -> dict:
        d = {"method": self.method, "total": self.total, "counts": self.counts.tolist(),
             "raw_scores": [float(v) for v in self.raw_scores]}
        if truth is not None:
            d["true_counts"] = np.asarray(truth).tolist()
        return d


def adjust_counts(raw_scores, target_total: int) -> np.ndarray:
    """Non-negative integers summing to ``target_total``, proportional to the scores.

    Negatives are clamped to zero, the rest scaled to the total, and the
    remainder after flooring goes to the largest fractional parts (ties to
    the lower index).
    """
    if target_total < 0:
        raise ValueError("target_total must be >= 0")
    s = np.clip(np.asarray(raw_scores, dtype=np.float64), 0.0, None)
    if s.sum() <= 0:
        if target_total > 0:
            warnings.warn("all label scores are non-positive; falling back to a uniform split")
        s = np.ones_like(s)
    q = s * target_total / s.sum()
    counts = np.floor(q).astype(np.int64)
    short = int(target_total - counts.sum())
    frac = q - counts
    order = np.lexsort((np.arange(len(q)), -frac))
    counts[order[:short]] += 1
    return counts


def _head_grads(update_or_grad) -> tuple[torch.Tensor, torch.Tensor, ClientUpdate | None]:
    if isinstance(update_or_grad, ClientUpdate):
        g = capture_pseudo_gradient(update_or_grad).normalized
        return g["head.weight"], g["head.bias"], update_or_grad
    if isinstance(update_or_grad, ParameterSet):
        return update_or_grad["head.weight"], update_or_grad["head.bias"], None
    w, b = update_or_grad
    return w, b, None


# --------------------------------------------------------------------------- #
# sign rule


def infer_label_idlg(head_weight_grad: torch.Tensor, require_single: bool = True,
                     rank_tol: float = 1e-3) -> int:
    """Label of a single-sample gradient from the signs of head-row inner products.

    Returns the unique row whose inner product with every other row is
    non-positive. With ``require_single`` a gradient that is not rank one
    (an average over several samples) is rejected up front.
    """
    g = head_weight_grad.detach().double().reshape(head_weight_grad.shape[0], -1)
    if g.shape[0] == 1:
        return 0
    if require_single:
        sv = torch.linalg.svdvals(g)
        if sv[0] <= 0:
            raise LabelAmbiguityError("zero gradient")
        if sv[1] / sv[0] > rank_tol:
            raise LabelAmbiguityError(
                f"head gradient is not rank one (s2/s1 = {float(sv[1] / sv[0]):.2e}); "
                "it averages more than one sample")
    gram = g @ g.T
    off = gram - torch.diag(torch.diag(gram))
    qualifies = (off <= 0).all(dim=1) & (g.norm(dim=1) > 0)
    hits = torch.nonzero(qualifies).flatten()
    if len(hits) != 1:
        raise LabelAmbiguityError(f"{len(hits)} rows satisfy the sign rule")
    return int(hits[0])


# --------------------------------------------------------------------------- #
# probe-based count estimates


def _probe_stats(params: ParameterSet, spec: ArchitectureSpec, n: int, seed: int):
    g = torch_generator(seed)
    x = torch.randn((n, *spec.input_shape), generator=g)
    with torch.no_grad():
        tr = forward(params, spec, x)
    return tr.probs.double().mean(0), float(tr.features.double().sum(1).mean())


def infer_counts_zero_shot(update_or_grad, params: ParameterSet, spec: ArchitectureSpec,
                           batch_size: int, num_classes: int | None = None,
                           probe_seed: int = 0, min_activation: float = 1e-6,
                           target_total: int | None = None) -> LabelCountEstimate:
    """Batch label counts from the row sums of the head weight gradient.

    ``|B|`` standard-normal probe inputs at ``params`` estimate the mean
    softmax output and the mean summed last-hidden activation ``a``. Then
    ``count_c = sum_i P_ic - |B| * rowsum(dW_c) / a``.
    """
    gw, _, upd = _head_grads(update_or_grad)
    c = num_classes or gw.shape[0]
    if target_total is None:
        target_total = upd.meta.data_size if upd is not None else batch_size
    if c == 1:
        return LabelCountEstimate(np.array([target_total]), np.array([float(batch_size)]),
                                  "zero_shot", target_total)
    p_bar, a_bar = _probe_stats(params, spec, batch_size, probe_seed)
    if abs(a_bar) < min_activation:
        raise LabelInferenceError(f"activation mean underflow (|a| = {abs(a_bar):.2e})")
    dw = gw.detach().double().sum(1)
    raw = (batch_size * p_bar - batch_size * dw / a_bar).numpy()[:c]
    return LabelCountEstimate(adjust_counts(raw, target_total), raw, "zero_shot", target_total,
                              {"a_bar": a_bar})


def infer_counts_dlf(update: ClientUpdate, global_params: ParameterSet, spec: ArchitectureSpec,
                     probe_seed: int = 0, num_classes: int | None = None,
                     min_activation: float = 1e-6) -> LabelCountEstimate:
    """Client dataset label counts from a multi-step update.

    Probe statistics at the global and the client weights are linearly
    interpolated over the ``U`` local steps; each step contributes
    ``|B| p_u - |B| rowsum(dW) / (U a_u)`` with ``dW = delta / lr``. The sum
    over steps is divided by the number of epochs and adjusted to ``|D|``.
    """
    m = update.meta
    b, u_total = m.batch_size, m.num_steps
    client = global_params.detach() - update.delta
    p_s, a_s = _probe_stats(global_params, spec, b, probe_seed)
    p_k, a_k = _probe_stats(client, spec, b, probe_seed)
    dw = (update.delta["head.weight"].detach().double() / m.lr).sum(1)
    u = torch.arange(1, u_total + 1, dtype=torch.float64)[:, None]
    p_u = (u / u_total) * p_s + ((u_total - u) / u_total) * p_k
    a_u = (u / u_total) * a_s + ((u_total - u) / u_total) * a_k
    if (a_u.abs() < min_activation).any() or (a_s > 0) != (a_k > 0):
        raise LabelInferenceError(
            f"interpolated activation crosses zero (a_start={a_s:.3g}, a_end={a_k:.3g})")
    lam = b * p_u - b * dw[None, :] / (u_total * a_u)
    raw = (lam.sum(0) / m.epochs).numpy()
    if num_classes is not None:
        raw = raw[:num_classes]
    return LabelCountEstimate(adjust_counts(raw, m.data_size), raw, "dlf", m.data_size,
                              {"a_start": a_s, "a_end": a_k})


def infer_counts_ilrg(update_or_grad, head_params: tuple[torch.Tensor, torch.Tensor],
                      batch_size: int, num_classes: int | None = None,
                      eps: float = 1e-12, target_total: int | None = None) -> LabelCountEstimate:
    """Instance-wise counts by solving the bias-gradient equations.

    Per-class mean last-hidden activations are approximated by
    ``dW_c / db_c``; their softmax outputs ``P_c`` under the current head give
    ``|B| db = (P - I) N``, solved for ``N >= 0`` with ``sum N = |B|``.
    """
    gw, gb, upd = _head_grads(update_or_grad)
    w, bias = (t.detach().double() for t in head_params)
    gw, gb = gw.detach().double(), gb.detach().double()
    c = gw.shape[0]
    small = gb.abs() < eps
    if small.any():
        cond = float(gb.abs().max() / max(float(gb.abs().min()), 1e-300))
        warnings.warn(f"near-zero bias gradients (condition {cond:.2e}); using pseudo-inverse")
    inv = torch.where(small, torch.zeros_like(gb), 1.0 / torch.where(small, torch.ones_like(gb), gb))
    a_bar = gw * inv[:, None]
    p_bar = torch.softmax(a_bar @ w.T + bias, dim=1)  # row c: softmax for class-c mean
    a_mat = p_bar.T - torch.eye(c, dtype=torch.float64)
    rhs = batch_size * gb
    lhs = torch.cat([a_mat, torch.ones(1, c, dtype=torch.float64)]).numpy()
    rhs = np.concatenate([rhs.numpy(), [batch_size]])
    n, _ = nnls(lhs, rhs)
    if target_total is None:
        target_total = upd.meta.data_size if upd is not None else batch_size
    raw = n * target_total / batch_size
    if num_classes is not None:
        raw = raw[:num_classes]
    return LabelCountEstimate(adjust_counts(raw, target_total), raw, "ilrg", target_total)


# --------------------------------------------------------------------------- #
# RLU


@dataclass
class AuxLogitStats:
    mean: np.ndarray        # (C, C): row c is the mean logit vector on class-c data
    cov: np.ndarray         # (C, C, C)
    counts: np.ndarray      # (C,)


@dataclass
class ErroneousConfidenceMatrix:
    S: np.ndarray
    H: np.ndarray


def fit_aux_stats(params: ParameterSet, spec: ArchitectureSpec, x: torch.Tensor,
                  y: torch.Tensor, num_classes: int) -> AuxLogitStats:
    with torch.no_grad():
        out = logits(params, spec, x).double().numpy()[:, :num_classes]
    y = y.numpy()
    mean = np.zeros((num_classes, num_classes))
    cov = np.zeros((num_classes, num_classes, num_classes))
    counts = np.bincount(y, minlength=num_classes)
    if counts.min() < 2:
        raise ValueError("auxiliary data needs at least 2 samples per class")
    for c in range(num_classes):
        z = out[y == c]
        mean[c] = z.mean(0)
        cov[c] = np.cov(z, rowvar=False)
    return AuxLogitStats(mean, cov, counts)


def h_matrix(S: np.ndarray) -> np.ndarray:
    """``H z`` is the expected negative bias gradient for class proportions ``z``."""
    H = -S.T.copy()
    np.fill_diagonal(H, 0.0)
    off_row = S.sum(1) - np.diag(S)
    H[np.diag_indices_from(H)] = off_row
    return H


def estimate_confidence_matrix(aux: AuxLogitStats, num_samples: int = 10_000, seed: int = 0,
                               jitter: float = 1e-9, mean: np.ndarray | None = None
                               ) -> ErroneousConfidenceMatrix:
    """Monte-Carlo expected softmax of Gaussian logits, one row per true class."""
    rng = np.random.default_rng(seed)
    mu = aux.mean if mean is None else mean
    c = mu.shape[0]
    S = np.zeros((c, c))
    for k in range(c):
        cov = (aux.cov[k] + aux.cov[k].T) / 2
        if np.allclose(cov, 0):
            z = mu[k][None, :]
        else:
            try:
                L = np.linalg.cholesky(cov + jitter * np.eye(c) * max(1.0, np.trace(cov) / c))
            except np.linalg.LinAlgError as exc:
                raise LabelInferenceError(f"class {k} logit covariance is not PSD") from exc
            z = mu[k] + rng.standard_normal((num_samples, c)) @ L.T
        z = z - z.max(1, keepdims=True)
        p = np.exp(z)
        S[k] = (p / p.sum(1, keepdims=True)).mean(0)
    return ErroneousConfidenceMatrix(S, h_matrix(S))


def project_simplex(v: np.ndarray) -> np.ndarray:
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1
    k = np.arange(1, len(v) + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1), 0.0)


def solve_simplex_lsq(H: np.ndarray, v: np.ndarray, iters: int = 500, step: float | None = None,
                      tol: float = 1e-10, max_iters: int = 20_000) -> tuple[np.ndarray, int]:
    """Projected gradient descent for ``min ||Hz - v||^2`` over the simplex.

    Runs ``iters`` steps at ``step`` (default ``0.1 / ||H||_2``); if the
    iterate is still moving it continues at ``1 / L`` up to ``max_iters``.
    """
    norm2 = np.linalg.norm(H, 2)
    if norm2 == 0:
        return np.full(H.shape[1], 1.0 / H.shape[1]), 0
    z = np.full(H.shape[1], 1.0 / H.shape[1])
    schedule = [(step or 0.1 / norm2, iters), (1.0 / (2 * norm2 ** 2), max_iters)]
    it = 0
    for eta, n in schedule:
        for _ in range(n):
            z_new = project_simplex(z - eta * 2 * H.T @ (H @ z - v))
            it += 1
            moved = np.abs(z_new - z).max()
            z = z_new
            if moved < tol:
                return z, it
    raise LabelInferenceError(f"simplex solver did not converge in {it} iterations")


def infer_counts_rlu(update_or_grad, aux: AuxLogitStats, batch_size: int | None = None,
                     num_samples: int = 10_000, seed: int = 0, iters: int = 500,
                     aux_end: AuxLogitStats | None = None) -> LabelCountEstimate:
    """Counts from the bias update using expected erroneous confidences.

    For a raw gradient ``v = -db`` and ``H z ~ v`` for proportions ``z``. For
    a client update, ``v = -(delta_b / lr) * |B| / |D|`` summed over epochs:
    with ``E > 1`` the class logit means are advanced epoch by epoch by
    ``-delta_b / E * (||a||^2 + 1)``, with ``a`` the least-squares ratio
    ``delta_W / delta_b``. ``aux_end`` (stats at the client weights) replaces
    the last epoch's matrix when given.
    """
    gw, gb, upd = _head_grads(update_or_grad)
    c = aux.mean.shape[0]
    if upd is None:
        if batch_size is None:
            raise ValueError("batch_size is required for a raw gradient")
        v = -gb.detach().double().numpy()[:c]
        H = estimate_confidence_matrix(aux, num_samples, seed).H
        total = batch_size
    else:
        m = upd.meta
        db = upd.delta["head.bias"].detach().double().numpy()[:c]
        dw = upd.delta["head.weight"].detach().double().numpy()[:c]
        v = -db / m.lr * m.batch_size / m.data_size
        H = np.zeros((c, c))
        mu = aux.mean.copy()
        a = dw.T @ db / max(float(db @ db), 1e-300)
        shift = -db / m.epochs * (a @ a + 1.0)
        for e in range(m.epochs):
            if e == m.epochs - 1 and e > 0 and aux_end is not None:
                H += estimate_confidence_matrix(aux_end, num_samples, seed + e).H
            else:
                H += estimate_confidence_matrix(aux, num_samples, seed + e, mean=mu).H
            mu = mu + shift[None, :]
        total = m.data_size
    z, used = solve_simplex_lsq(H, v, iters=iters)
    return LabelCountEstimate(adjust_counts(total * z, total), total * z, "rlu", total,
                              {"z": z.tolist(), "solver_iterations": used})
