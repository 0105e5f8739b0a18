"""Closed-form input recovery from fully connected layer gradients.

``recover_fc_input`` inverts a single sample's first-layer gradient. The
imprint block sorts inputs into bins by a calibrated linear measurement
(brightness by default) so that differences of adjacent-bin gradients isolate
individual inputs, even inside a batch.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from scipy.stats import norm

from .fl import ClientUpdate
from .models import ParameterSet
from .results import ReconstructionResult

log = logging.getLogger(__name__)


class NoActiveUnitError(ValueError):
    pass


class BatchMixtureWarning(UserWarning):
    pass


@dataclass
class FCRecovery:
    x: torch.Tensor
    unit: int
    disagreement: float
    consistent: bool


def recover_fc_input(weight_grad: torch.Tensor, bias_grad: torch.Tensor,
                     threshold: float = 1e-8, tol: float = 1e-3) -> FCRecovery:
    """Recover a layer input as ``dL/dW_l / dL/db_l`` for the unit with largest ``|dL/db_l|``.

    ``weight_grad`` is ``(units, d)``; the input may have any trailing shape
    flattened to ``d``. A second active unit is used to check consistency: a
    single sample gives the same ``x`` from every unit, a batch does not.
    """
    w = weight_grad.reshape(weight_grad.shape[0], -1)
    mag = bias_grad.abs()
    order = torch.argsort(mag, descending=True)
    l = int(order[0])
    if mag[l] <= threshold:
        raise NoActiveUnitError("no unit has a bias gradient above threshold")
    x = w[l] / bias_grad[l]
    disagreement = 0.0
    if len(order) > 1 and mag[order[1]] > threshold:
        x2 = w[int(order[1])] / bias_grad[int(order[1])]
        disagreement = float((x - x2).norm() / max(float(x.norm()), 1e-12))
    consistent = disagreement <= tol
    if not consistent:
        warnings.warn(f"recovered input differs across units by {disagreement:.2e}; "
                      "gradient likely averages several samples", BatchMixtureWarning)
    return FCRecovery(x, l, disagreement, consistent)


# --------------------------------------------------------------------------- #
# imprint block


@dataclass
class ImprintBlock:
    """``bins - 1`` ReLU neurons sharing one measurement vector.

    Neuron ``l`` (1-based) fires when the calibrated measurement
    ``(<x, m> - mean) / std`` exceeds the Gaussian quantile ``Phi^-1(l / bins)``.
    ``thresholds`` holds ``-Phi^-1(l / bins)``; ``bias`` adds the calibration shift.
    """

    bins: int
    measurement: torch.Tensor
    mean: float
    std: float
    thresholds: torch.Tensor

    @property
    def weight(self) -> torch.Tensor:
        return (self.measurement / self.std).expand(self.bins - 1, -1).contiguous()

    @property
    def bias(self) -> torch.Tensor:
        return self.thresholds - self.mean / self.std

    def calibrated(self, x: torch.Tensor) -> torch.Tensor:
        return (x.reshape(len(x), -1) @ self.measurement - self.mean) / self.std

    def bin_index(self, x: torch.Tensor) -> torch.Tensor:
        """Number of neurons each input activates (0 = bottom bin, unrecoverable)."""
        h = self.calibrated(x)
        return (h[:, None] + self.thresholds[None, :] > 0).sum(1)

    def to_dict(self) -> dict:
        return {"bins": self.bins, "mean": self.mean, "std": self.std}


def measurement_vector(input_dim: int, kind: str = "brightness", seed: int = 0) -> torch.Tensor:
    if kind == "brightness":
        return torch.full((input_dim,), 1.0 / input_dim)
    if kind == "random":
        g = torch.Generator().manual_seed(int(seed))
        return torch.randn(input_dim, generator=g) / input_dim
    raise ValueError(f"unknown measurement {kind!r}")


def brightness_stats(images: torch.Tensor, kind: str = "brightness", seed: int = 0) -> tuple[float, float]:
    """Mean and std of the raw measurement over ``images`` (normalized domain)."""
    m = measurement_vector(images[0].numel(), kind, seed)
    h = images.reshape(len(images), -1).double() @ m.double()
    return float(h.mean()), float(h.std())


def build_imprint(bins: int, input_dim: int, brightness: tuple[float, float],
                  measurement: str = "brightness", seed: int = 0) -> ImprintBlock:
    if bins < 2:
        raise ValueError("imprint needs at least 2 bins")
    mean, std = brightness
    if not std > 0:
        raise ValueError("brightness std must be positive")
    q = norm.ppf(np.arange(1, bins) / bins)
    thresholds = torch.tensor(-q, dtype=torch.float32)
    if bins % 2 == 0:
        thresholds[bins // 2 - 1] = 0.0
    return ImprintBlock(bins, measurement_vector(input_dim, measurement, seed),
                        float(mean), float(std), thresholds)


def attack_rtf(update: ClientUpdate | ParameterSet, image_shape: tuple[int, ...],
               abs_tol: float = 1e-9, rel_tol: float = 1e-6,
               box: tuple | None = None) -> ReconstructionResult:
    """Recover one candidate per bin from imprint-layer weight and bias changes.

    Candidate ``l`` is ``(dW_l - dW_{l+1}) / (db_l - db_{l+1})``; the top
    neuron's candidate is ``dW / db`` alone. Candidates with a vanishing
    denominator are marked empty in ``extra["occupied"]`` rather than dropped.
    ``box`` optionally clamps candidates to ``(low, high)``.
    """
    t0 = time.perf_counter()
    g = update.delta if isinstance(update, ClientUpdate) else update
    dw = g["imprint.weight"].double()
    db = g["imprint.bias"].double()
    n = len(db)
    num = dw.clone()
    den = db.clone()
    num[:-1] -= dw[1:]
    den[:-1] -= db[1:]
    floor = max(abs_tol, rel_tol * float(db.abs().max()))
    occupied = den.abs() > floor
    safe = torch.where(occupied, den, torch.ones_like(den))
    cand = (num / safe[:, None]).float()
    cand[~occupied] = 0.0
    images = cand.reshape(n, *image_shape)
    if box is not None:
        lo, hi = box
        images = torch.max(torch.min(images, torch.as_tensor(hi).to(images)), torch.as_tensor(lo).to(images))
    return ReconstructionResult("rtf", images, iterations=0, seconds=time.perf_counter() - t0,
                                extra={"occupied": occupied.tolist(),
                                       "num_occupied": int(occupied.sum())})
