"""Reconstruction result container shared by all attack families."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch


@dataclass
class ReconstructionResult:
    """Output of one attack run.

    ``images`` are in the model's normalized input domain. ``flags`` records
    non-fatal conditions such as ``diverged`` or ``label_fallback``.
    """

    method: str
    images: torch.Tensor
    labels: torch.Tensor | None = None
    counts: np.ndarray | None = None
    loss_trace: list[float] = field(default_factory=list)
    iterations: int = 0
    seed: int | None = None
    seconds: float = 0.0
    flags: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "method": self.method,
            "num_images": int(len(self.images)),
            "labels": None if self.labels is None else self.labels.tolist(),
            "counts": None if self.counts is None else np.asarray(self.counts).tolist(),
            "final_loss": self.loss_trace[-1] if self.loss_trace else None,
            "iterations": self.iterations,
            "seed": self.seed,
            "seconds": round(self.seconds, 3),
            "flags": self.flags,
            **{k: v for k, v in self.extra.items() if _jsonable(v)},
        }

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        np.save(d / "images.npy", self.images.detach().cpu().numpy())
        (d / "result.json").write_text(json.dumps(
            {**self.summary(), "loss_trace": [float(v) for v in self.loss_trace]}, indent=1))


def _jsonable(v) -> bool:
    try:
        json.dumps(v)
    except TypeError:
        return False
    return True
