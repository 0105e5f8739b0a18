"""Seed derivation and small tensor helpers shared across modules."""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(master: int, role: str) -> int:
    """Child seed = first 8 bytes of sha256("<master>:<role>"), as a 63-bit int.

    Any language with SHA-256 reproduces the assignment of seeds to roles.
    """
    digest = hashlib.sha256(f"{int(master)}:{role}".encode()).digest()
    return int.from_bytes(digest[:8], "big") & (2**63 - 1)


def torch_generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed) % (2**63))


def total_variation(x: torch.Tensor) -> torch.Tensor:
    """Anisotropic TV: mean |horizontal diff| + mean |vertical diff|."""
    dx = (x[..., :, 1:] - x[..., :, :-1]).abs().mean()
    dy = (x[..., 1:, :] - x[..., :-1, :]).abs().mean()
    return dx + dy


def to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)
