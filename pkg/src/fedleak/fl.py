"""Synchronous FedAvg simulation with captured client updates.

Local training is plain mini-batch SGD (no momentum, no weight decay). The
round's learning rate is ``lr * lr_decay**t``. A client's update is the model
difference ``W^{t-1} - W^k``; attacks read it through
:func:`capture_pseudo_gradient`.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
import torch

from .data import DatasetHandle, PartitionPlan, make_batches, partition
from .models import ArchitectureSpec, ParameterSet, accuracy, build_model, loss_and_param_grads
from .utils import derive_seed

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid experiment or FL configuration."""


class FLAbort(RuntimeError):
    """A hook raised; ``records`` holds the rounds completed so far."""

    def __init__(self, message: str, records: list):
        super().__init__(message)
        self.records = records


@dataclass
class FLConfig:
    num_clients: int = 10
    clients_per_round: int | None = None
    local_epochs: int = 1
    batch_size: int = 10
    lr: float = 0.1
    lr_decay: float = 0.95
    rounds: int = 1
    beta: float = 0.5
    partition_mode: str = "dirichlet"
    seed: int = 0
    normalization: str = "standardized"

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if self.num_clients < 1:
            out.append("num_clients must be >= 1")
        if self.clients_per_round is not None and not 1 <= self.clients_per_round <= self.num_clients:
            out.append("clients_per_round must be in [1, num_clients]")
        if self.local_epochs < 1:
            out.append("local_epochs must be >= 1")
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if self.lr < 0:
            out.append("lr must be >= 0")
        if not 0 < self.lr_decay <= 1:
            out.append("lr_decay must be in (0, 1]")
        if self.rounds < 0:
            out.append("rounds must be >= 0")
        if self.partition_mode not in ("iid", "dirichlet"):
            out.append(f"unknown partition mode {self.partition_mode!r}")
        if self.partition_mode == "dirichlet" and not self.beta > 0:
            out.append("beta must be > 0")
        if self.normalization not in ("unit_range", "standardized"):
            out.append(f"unknown normalization {self.normalization!r}")
        return out

    @property
    def plan(self) -> PartitionPlan:
        return PartitionPlan(self.partition_mode, self.num_clients, self.beta,
                             derive_seed(self.seed, "partition") % (2**31))

    def round_lr(self, t: int) -> float:
        return self.lr * self.lr_decay ** t


@dataclass
class UpdateMeta:
    lr: float
    lr_decay_applied: float
    epochs: int
    batch_size: int
    num_steps: int
    data_size: int


@dataclass
class ClientUpdate:
    """Model difference ``W^{t-1} - W^k`` with training metadata.

    Instrumented runs also fill ``true_counts`` (label histogram of the local
    training set) and ``step_grads`` (one gradient per local step).
    """

    client_id: int
    round: int
    delta: ParameterSet
    meta: UpdateMeta
    flagged: bool = False
    true_counts: np.ndarray | None = None
    step_grads: list[ParameterSet] | None = None
    step_grad_norms: list[float] | None = None

    def save(self, path: str | Path) -> None:
        manifest = {"client_id": self.client_id, "round": self.round, "flagged": self.flagged,
                    "meta": asdict(self.meta)}
        if self.true_counts is not None:
            manifest["true_counts"] = self.true_counts.tolist()
        self.delta.save(path, manifest)

    @classmethod
    def load(cls, path: str | Path) -> "ClientUpdate":
        delta, m = ParameterSet.load(path)
        tc = m.get("true_counts")
        return cls(m["client_id"], m["round"], delta, UpdateMeta(**m["meta"]), m["flagged"],
                   None if tc is None else np.asarray(tc))


@dataclass
class PseudoGradient:
    delta: ParameterSet
    normalized: ParameterSet
    scale: float
    num_steps: int


@dataclass
class RoundRecord:
    round: int
    accuracy: float | None
    updates: list[ClientUpdate]
    global_before: ParameterSet | None = None
    global_after: ParameterSet | None = None
    lr: float = 0.0


class Hooks(Protocol):
    serial: bool

    def on_update(self, record_round: int, update: ClientUpdate) -> None: ...


LocalProcedure = Callable[..., ClientUpdate]


def num_local_steps(data_size: int, batch_size: int, epochs: int) -> int:
    return math.ceil(data_size / batch_size) * epochs


def client_update(global_params: ParameterSet, spec: ArchitectureSpec, x: torch.Tensor,
                  y: torch.Tensor, cfg: FLConfig, round_idx: int = 0, client_id: int = 0,
                  instrument: bool | str = False, num_classes: int | None = None) -> ClientUpdate:
    """Run ``cfg.local_epochs`` epochs of mini-batch SGD and return the delta.

    ``instrument=True`` records the local label histogram and per-step
    gradient norms; ``instrument="full"`` also keeps every step gradient.
    """
    n = len(y)
    if n == 0:
        raise ValueError(f"client {client_id} has no training data")
    lr = cfg.round_lr(round_idx)
    params = global_params.clone()
    # summing the steps avoids the cancellation of W_old - W_new in float32
    delta = params.map(torch.zeros_like)
    steps, finite = 0, True
    grads_kept, norms = [], []
    seed = derive_seed(cfg.seed, f"batches:{client_id}:{round_idx}") % (2**31)
    for epoch in range(cfg.local_epochs):
        for idx in make_batches(np.arange(n), cfg.batch_size, seed=seed, epoch=epoch):
            idx_t = torch.from_numpy(idx)
            loss, g = loss_and_param_grads(params, spec, x[idx_t], y[idx_t])
            if not torch.isfinite(loss):
                finite = False
                break
            delta = delta.zip_map(g, lambda a, d: a + lr * d)
            params = global_params.detach() - delta
            steps += 1
            if instrument:
                norms.append(g.norm())
                if instrument == "full":
                    grads_kept.append(g)
        if not finite:
            break
    meta = UpdateMeta(lr, cfg.lr_decay ** round_idx, cfg.local_epochs, cfg.batch_size,
                      num_local_steps(n, cfg.batch_size, cfg.local_epochs), n)
    flagged = not finite or not delta.is_finite()
    if flagged:
        log.warning("client %d diverged in round %d; update flagged", client_id, round_idx)
    counts = None
    if instrument:
        k = num_classes or spec.output_classes
        counts = np.bincount(y.numpy(), minlength=k)
    return ClientUpdate(client_id, round_idx, delta, meta, flagged, counts,
                        grads_kept if instrument == "full" else None, norms if instrument else None)


def aggregate(global_params: ParameterSet, updates: list[ClientUpdate]) -> ParameterSet:
    """FedAvg: ``global - sum_k (n^k / n) delta^k`` over non-flagged updates."""
    good = sorted((u for u in updates if not u.flagged), key=lambda u: u.client_id)
    if not good:
        raise RuntimeError("all client updates are flagged; nothing to aggregate")
    n = sum(u.meta.data_size for u in good)
    avg = None
    for u in good:
        term = u.delta.scale(u.meta.data_size / n)
        avg = term if avg is None else avg + term
    return global_params.detach() - avg


def aggregation_weights(updates: list[ClientUpdate]) -> dict[int, float]:
    good = [u for u in updates if not u.flagged]
    n = sum(u.meta.data_size for u in good)
    return {u.client_id: u.meta.data_size / n for u in good}


def capture_pseudo_gradient(update: ClientUpdate | ParameterSet) -> PseudoGradient:
    """Raw delta plus the per-step normalization ``delta / (lr * num_steps)``.

    A bare :class:`ParameterSet` is treated as a single-step gradient.
    """
    if isinstance(update, ParameterSet):
        return PseudoGradient(update, update, 1.0, 1)
    m = update.meta
    scale = m.lr * m.num_steps
    if scale <= 0:
        raise ValueError("update has zero learning rate or no local steps; cannot normalize")
    return PseudoGradient(update.delta, update.delta.scale(1.0 / scale), scale, m.num_steps)


@dataclass
class FederatedSetup:
    """Dataset, shards and cached client tensors for one simulated federation."""

    dataset: DatasetHandle
    spec: ArchitectureSpec
    cfg: FLConfig
    shards: list
    client_x: list[torch.Tensor] = field(default_factory=list)
    client_y: list[torch.Tensor] = field(default_factory=list)
    test_x: torch.Tensor | None = None
    test_y: torch.Tensor | None = None

    @classmethod
    def build(cls, dataset: DatasetHandle, spec: ArchitectureSpec, cfg: FLConfig,
              max_test: int | None = None) -> "FederatedSetup":
        shards = partition(dataset, cfg.plan, min_train=cfg.batch_size)
        mode = cfg.normalization
        xs = [dataset.batch(s.train_indices, mode) for s in shards]
        ys = [dataset.label_tensor(s.train_indices) for s in shards]
        test = np.sort(np.concatenate([s.test_indices for s in shards]))
        if max_test is not None and len(test) > max_test:
            rng = np.random.default_rng(derive_seed(cfg.seed, "test_subsample") % (2**31))
            test = np.sort(rng.choice(test, max_test, replace=False))
        return cls(dataset, spec, cfg, shards, xs, ys,
                   dataset.batch(test, mode) if len(test) else None,
                   dataset.label_tensor(test) if len(test) else None)


def run_rounds(setup: FederatedSetup, hooks=None, params: ParameterSet | None = None,
               run_dir: str | Path | None = None, keep_updates: bool | set = False,
               keep_params: bool = False, instrument: bool | str = False,
               evaluate: bool = True) -> list[RoundRecord]:
    """Run ``cfg.rounds`` FedAvg rounds.

    ``hooks`` may define ``on_round_start(round, params)``,
    ``on_update(round, update)`` to observe client updates, ``local_procedure(client_id)`` returning a replacement for
    :func:`client_update` (or ``None``), and ``on_round_end(record)``.
    ``keep_updates`` is ``True`` for all clients or a set of client ids.
    """
    cfg, spec = setup.cfg, setup.spec
    if params is None:
        params = build_model(spec, derive_seed(cfg.seed, "init") % (2**31))
    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "updates").mkdir(parents=True, exist_ok=True)
        _write_manifest(run_dir, setup)
    rng = np.random.default_rng(derive_seed(cfg.seed, "client_sampling") % (2**31))
    records: list[RoundRecord] = []
    for t in range(cfg.rounds):
        t0 = time.perf_counter()
        ids = list(range(cfg.num_clients))
        if cfg.clients_per_round is not None and cfg.clients_per_round < cfg.num_clients:
            ids = sorted(rng.choice(cfg.num_clients, cfg.clients_per_round, replace=False).tolist())
        if hasattr(hooks, "on_round_start"):
            hooks.on_round_start(t, params)
        updates = []
        try:
            for k in ids:
                proc = getattr(hooks, "local_procedure", None)
                proc = proc(k) if proc is not None else None
                fn = proc or client_update
                u = fn(params, spec, setup.client_x[k], setup.client_y[k], cfg, t, k,
                       instrument=instrument, num_classes=setup.dataset.num_classes)
                if hasattr(hooks, "on_update"):
                    hooks.on_update(t, u)
                updates.append(u)
            new = aggregate(params, updates)
        except Exception as exc:
            if run_dir is not None:
                _write_accuracy(run_dir, records)
            raise FLAbort(f"round {t} aborted: {exc}", records) from exc
        acc = None
        if evaluate and setup.test_x is not None:
            acc = accuracy(new, spec, setup.test_x, setup.test_y)
        kept = [u for u in updates if keep_updates is True or
                (keep_updates and u.client_id in keep_updates)]
        rec = RoundRecord(t, acc, kept, params if keep_params else None,
                          new if keep_params else None, cfg.round_lr(t))
        records.append(rec)
        if run_dir is not None:
            for u in kept:
                u.save(run_dir / "updates" / f"round{t:03d}_client{u.client_id:03d}")
            new.save(run_dir / "global_latest", {"round": t, "arch": spec.to_dict()})
            if t == 0:
                params.save(run_dir / "global_initial", {"round": -1, "arch": spec.to_dict()})
            if kept:
                params.save(run_dir / "updates" / f"round{t:03d}_global_before", {"round": t})
            _write_accuracy(run_dir, records)
        if hasattr(hooks, "on_round_end"):
            hooks.on_round_end(rec)
        log.info("round %d: acc=%s (%.1fs)", t, acc, time.perf_counter() - t0)
        params = new
    return records


def _write_manifest(run_dir: Path, setup: FederatedSetup) -> None:
    manifest = {
        "dataset": setup.dataset.name,
        "fl": asdict(setup.cfg),
        "arch": setup.spec.to_dict(),
        "shards": [{"client_id": s.client_id, "train": len(s.train_indices),
                    "test": len(s.test_indices)} for s in setup.shards],
    }
    (run_dir / "fl_manifest.json").write_text(json.dumps(manifest, indent=1))


def _write_accuracy(run_dir: Path, records: list[RoundRecord]) -> None:
    with open(run_dir / "accuracy.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "accuracy"])
        for r in records:
            w.writerow([r.round, "" if r.accuracy is None else f"{r.accuracy:.6f}"])
