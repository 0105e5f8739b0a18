"""Experiment configuration, execution and reporting.

A run directory ("bundle") holds::

    config.yaml        the resolved experiment config
    manifest.json      config hash, package version, wall-clock, platform
    fl_manifest.json   shard sizes and FL settings
    accuracy.csv       round, accuracy
    updates/           retained client updates and the global model they came from
    attacks/<job>/     images.npy, result.json, match.json, grid.png
    results.json       per-attack metrics (validated against the bundled schema)
    summary.txt        fixed-width table of results.json
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import platform
import shutil
import time
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np
import torch
import yaml

from . import analytic, gan, inversion, labels
from .data import DatasetError, DatasetHandle, load_dataset, pixel_box, subset
from .fl import ClientUpdate, ConfigError, FederatedSetup, FLConfig, client_update, run_rounds
from .metrics import label_count_accuracy, match_reconstructions, matched_abs_corr, to_unit_range
from .models import ArchitectureSpec, ParameterSet, build_model
from .results import ReconstructionResult
from .utils import derive_seed

log = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"
SERVER_ATTACKS = ("dlg", "idlg", "inverting_gradients", "dlf", "rtf", "cpa", "ggl", "grnn")
LABEL_METHODS = ("zero_shot", "dlf", "ilrg", "rlu")
ALL_METHODS = SERVER_ATTACKS + ("dmgan",)
AUX_PER_CLASS = 50


@dataclass
class AttackSpec:
    """One attack job against client updates of a given round.

    ``clients`` is a list of ids or ``"median"`` (the client whose shard
    size is the median). ``model`` optionally overrides the architecture;
    the update is then produced from a fresh model of that architecture on
    the same client data. ``generator`` (ggl) is ``pretrained`` or
    ``untrained``.
    """

    method: str
    round: int = 0
    clients: list[int] | str = "median"
    config: dict = field(default_factory=dict)
    model: dict | None = None
    label_methods: list[str] = field(default_factory=list)
    generator: str = "pretrained"
    generator_epochs: int = 15
    max_truth: int | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        return cls(**d)


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    dataset: str = "cifar10"
    cache_dir: str | None = None
    download: bool = True
    max_images: int | None = None
    model: dict = field(default_factory=lambda: {"arch": "cnn_small"})
    fl: dict = field(default_factory=dict)
    attacks: list[AttackSpec] = field(default_factory=list)
    output_dir: str = "runs"
    seed: int = 0
    max_test: int | None = 2000
    keep_updates: str = "attacked"

    # --- (de)serialization ------------------------------------------------ #

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attacks"] = [asdict(a) for a in self.attacks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        d = dict(d)
        problems = []
        attacks = []
        for i, a in enumerate(d.pop("attacks", None) or []):
            try:
                attacks.append(AttackSpec.from_dict(a))
            except TypeError as exc:
                problems.append(f"attacks.{i}: {exc}")
        if problems:
            raise ConfigError("; ".join(problems))
        return cls(attacks=attacks, **d)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    # --- derived objects ------------------------------------------------- #

    def fl_config(self) -> FLConfig:
        return FLConfig(**{"seed": self.seed, **self.fl})

    def arch_spec(self, shape, num_classes: int, override: dict | None = None) -> ArchitectureSpec:
        d = dict(override or self.model)
        arch = d.pop("arch")
        return ArchitectureSpec(arch, tuple(shape), num_classes, **d)

    def problems(self) -> list[str]:
        out = []
        try:
            FLConfig(**{"seed": self.seed, **self.fl})
        except (ConfigError, TypeError) as exc:
            out.append(f"fl: {exc}")
        if "arch" not in self.model:
            out.append("model.arch is required")
        if self.keep_updates not in ("attacked", "all"):
            out.append("keep_updates must be attacked or all")
        rounds = self.fl.get("rounds", 1)
        for i, a in enumerate(self.attacks):
            where = f"attacks.{i} ({a.method})"
            if a.method not in ALL_METHODS:
                out.append(f"{where}: unknown method; choose from {', '.join(ALL_METHODS)}")
                continue
            if not 0 <= a.round < max(rounds, 1):
                out.append(f"{where}: round {a.round} outside 0..{rounds - 1}")
            if isinstance(a.clients, str) and a.clients != "median":
                out.append(f"{where}: clients must be a list of ids or 'median'")
            bad = sorted(set(a.label_methods) - set(LABEL_METHODS))
            if bad:
                out.append(f"{where}: unknown label methods {bad}")
            if a.generator not in ("pretrained", "untrained"):
                out.append(f"{where}: generator must be pretrained or untrained")
            if a.method != "dmgan":
                cfg_fields = {f.name for f in fields(gan.GanAttackConfig if a.method in ("ggl", "grnn")
                                                    else inversion.AttackConfig)}
                extra = sorted(set(a.config) - cfg_fields)
                if extra:
                    out.append(f"{where}: unknown attack config keys {extra}")
            model = a.model or self.model
            if a.method == "rtf" and model.get("arch") != "imprint":
                out.append(f"{where}: rtf needs an imprint model (set attacks.{i}.model)")
        return out

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise ConfigError("\n".join(problems))


def _parse_scalar(text: str):
    return yaml.safe_load(text)


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` assignments (list indices allowed) to a nested dict."""
    d = copy.deepcopy(d)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form path=value")
        path, raw = item.split("=", 1)
        keys = path.split(".")
        node = d
        for k in keys[:-1]:
            if isinstance(node, list):
                node = node[int(k)]
            else:
                node = node.setdefault(k, {})
        last = keys[-1]
        if isinstance(node, list):
            node[int(last)] = _parse_scalar(raw)
        else:
            node[last] = _parse_scalar(raw)
    return d


def read_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    text = path.read_text()
    try:
        d = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return d


def load_config(path: str | Path, overrides: list[str] | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig.from_dict(apply_overrides(read_config_file(path), overrides))
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------- #
# presets


def preset_names() -> list[str]:
    root = resources.files("fedleak") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def preset_path(name: str) -> Path:
    p = resources.files("fedleak") / "presets" / f"{name}.yaml"
    if not p.is_file():
        raise ConfigError(f"no preset named {name!r}; available: {', '.join(preset_names())}")
    return Path(str(p))


def preset_description(name: str) -> str:
    first = preset_path(name).read_text().splitlines()[0]
    return first.lstrip("# ").strip()


# --------------------------------------------------------------------------- #
# running


def _package_version() -> str:
    try:
        return version("fedleak")
    except PackageNotFoundError:
        return "unknown"


@dataclass
class AttackContext:
    """Everything an attack job needs besides its own settings."""

    dataset: DatasetHandle
    setup: FederatedSetup
    spec: ArchitectureSpec
    global_params: ParameterSet
    update: ClientUpdate
    truth_x: torch.Tensor
    truth_y: torch.Tensor
    aux_x: torch.Tensor | None
    aux_y: torch.Tensor | None
    seed: int
    run_dir: Path | None = None


def _attack_config(a: AttackSpec, seed: int):
    if a.method in ("ggl", "grnn"):
        return gan.default_gan_config(a.method, **{"seed": seed, **a.config})
    return inversion.default_config(a.method if a.method in inversion.DEFAULTS else "dlg",
                                    **{"seed": seed, **a.config})


def _ggl_generator(a: AttackSpec, ctx: AttackContext, normalization: str) -> gan.GeneratorHandle:
    ds = ctx.dataset
    if a.generator == "untrained":
        return gan.untrained_generator(ds.image_shape, ds.num_classes, ds.norm_stats,
                                       seed=derive_seed(ctx.seed, "generator") % 2**31,
                                       normalization=normalization)
    cache = None if ctx.run_dir is None else ctx.run_dir / f"generator_{ds.name}_{a.generator_epochs}"
    if cache is not None and cache.with_suffix(".npz").exists():
        return gan.GeneratorHandle.load(cache)
    # public data for the generator: every shard except the attacked client's
    own = set(ctx.setup.shards[ctx.update.client_id].train_indices.tolist())
    idx = np.array([i for s in ctx.setup.shards for i in s.train_indices if i not in own])
    handle = gan.pretrain_generator(ds, idx, epochs=a.generator_epochs,
                                    seed=derive_seed(ctx.seed, "generator") % 2**31,
                                    normalization=normalization)
    if cache is not None:
        handle.save(cache)
    return handle


def run_attack(a: AttackSpec, ctx: AttackContext) -> ReconstructionResult:
    """Dispatch one server-side attack on ``ctx.update``."""
    cfg = _attack_config(a, ctx.seed)
    ns, mode = ctx.dataset.norm_stats, ctx.setup.cfg.normalization
    p, spec, u = ctx.global_params, ctx.spec, ctx.update
    m = a.method
    if m == "dlg":
        return inversion.attack_dlg(u, p, spec, cfg)
    if m == "idlg":
        return inversion.attack_idlg(u, p, spec, cfg)
    if m == "inverting_gradients":
        return inversion.attack_inverting_gradients(u, p, spec, cfg, norm_stats=ns, normalization=mode)
    if m == "dlf":
        return inversion.attack_dlf(u, p, spec, cfg, probe_seed=derive_seed(ctx.seed, "probe") % 2**31,
                                    norm_stats=ns, normalization=mode)
    if m == "rtf":
        return analytic.attack_rtf(u, spec.input_shape, box=pixel_box(ns, mode))
    if m == "cpa":
        if spec.arch == "mlp256":
            flat = ctx.aux_x if ctx.aux_x is not None else ctx.truth_x
            return inversion.attack_cpa(u, spec, cfg, pixel_mean=float(flat.mean()),
                                        pixel_std=float(flat.std()))
        return inversion.attack_cpa_fi(u, p, spec, cfg, norm_stats=ns, normalization=mode)
    if m == "ggl":
        return gan.attack_ggl(u, _ggl_generator(a, ctx, mode), p, spec, cfg)
    if m == "grnn":
        return gan.attack_grnn(u, p, spec, cfg, norm_stats=ns, normalization=mode)
    raise ConfigError(f"{m} is not a server-side attack")


def infer_label_counts(method: str, ctx: AttackContext) -> labels.LabelCountEstimate:
    u, p, spec = ctx.update, ctx.global_params, ctx.spec
    n = u.meta.data_size
    c = ctx.dataset.num_classes
    seed = derive_seed(ctx.seed, f"labels:{method}") % 2**31
    if method == "zero_shot":
        return labels.infer_counts_zero_shot(u, p, spec, u.meta.batch_size, c, probe_seed=seed,
                                             target_total=n)
    if method == "dlf":
        return labels.infer_counts_dlf(u, p, spec, probe_seed=seed, num_classes=c)
    if method == "ilrg":
        return labels.infer_counts_ilrg(u, p.head(), u.meta.batch_size, c, target_total=n)
    if method == "rlu":
        if ctx.aux_x is None:
            raise labels.LabelInferenceError("rlu needs auxiliary data (test pool is empty)")
        aux = labels.fit_aux_stats(p, spec, ctx.aux_x, ctx.aux_y, c)
        return labels.infer_counts_rlu(u, aux, seed=seed)
    raise ConfigError(f"unknown label method {method}")


def evaluate_attack(result: ReconstructionResult, ctx: AttackContext, max_truth: int | None) -> dict:
    """Match reconstructions against the attacked client's training images."""
    ns, mode = ctx.dataset.norm_stats, ctx.setup.cfg.normalization
    truth = ctx.truth_x if max_truth is None else ctx.truth_x[:max_truth]
    rec = to_unit_range(result.images, ns, mode)
    tru = to_unit_range(truth, ns, mode)
    if result.method == "rtf" and "occupied" in result.extra:
        occ = np.asarray(result.extra["occupied"], dtype=bool)
        rec = rec[occ] if occ.any() else rec[:0]
    out: dict = {"num_truth": int(len(tru)), "num_recovered": int(len(rec))}
    if len(rec) == 0:
        out.update(mean_psnr=None, mean_ssim=None, mean_mse=None, matched_abs_corr=None)
        return out
    report = match_reconstructions(rec, tru)
    out.update(mean_psnr=report.to_dict()["mean_psnr"], mean_ssim=report.mean_ssim,
               mean_mse=report.mean_mse, matched_abs_corr=matched_abs_corr(rec, tru)[0])
    out["match"] = report.to_dict()
    return out


def _median_client(setup: FederatedSetup) -> int:
    sizes = np.array([len(y) for y in setup.client_y])
    return int(np.argsort(sizes, kind="stable")[len(sizes) // 2])


def _attacked_clients(a: AttackSpec, setup: FederatedSetup) -> list[int]:
    ids = [_median_client(setup)] if a.clients == "median" else list(a.clients)
    bad = [k for k in ids if not 0 <= k < setup.cfg.num_clients]
    if bad:
        raise ConfigError(f"{a.method}: client ids {bad} out of range")
    return ids


class _Capture:
    """Keep the global model broadcast in each attacked round."""

    serial = True

    def __init__(self, rounds: set[int]):
        self.rounds = rounds
        self.params: dict[int, ParameterSet] = {}

    def on_round_start(self, t: int, params: ParameterSet) -> None:
        if t in self.rounds:
            self.params[t] = params.clone()


def _load_data(cfg: ExperimentConfig) -> DatasetHandle:
    ds = load_dataset(cfg.dataset, cfg.cache_dir, cfg.download)
    if cfg.max_images is not None and cfg.max_images < len(ds):
        rng = np.random.default_rng(derive_seed(cfg.seed, "max_images") % 2**31)
        ds = subset(ds, np.sort(rng.choice(len(ds), cfg.max_images, replace=False)))
    return ds


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, default=_json_default))


def _json_default(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(type(v).__name__)


def run_experiment(config: ExperimentConfig | str | Path, output_dir: str | Path | None = None,
                   overrides: list[str] | None = None) -> tuple[Path, int]:
    """Run FL rounds plus the configured attacks and write a bundle.

    Returns ``(bundle_dir, exit_code)``; the code is 3 when any attack
    aborted (its error is recorded and the other jobs still run). Invalid
    configs raise :class:`ConfigError` before anything is written.
    """
    if not isinstance(config, ExperimentConfig):
        config = load_config(config, overrides)
    else:
        config.validate()
    t_start = time.perf_counter()
    try:
        ds = _load_data(config)
    except DatasetError as exc:
        raise ConfigError(f"dataset: {exc}") from exc
    fl_cfg = config.fl_config()
    try:
        spec = config.arch_spec(ds.image_shape, ds.num_classes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from exc

    out = Path(output_dir or Path(config.output_dir) / config.name)
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    (out / "config.yaml").write_text(config.dump())

    server = [a for a in config.attacks if a.method != "dmgan"]
    dmgan_jobs = [a for a in config.attacks if a.method == "dmgan"]
    status = 0
    results: dict = {"schema_version": SCHEMA_VERSION, "experiment": config.name, "attacks": [],
                     "label_inference": [], "fl": {}}

    if dmgan_jobs:
        a = dmgan_jobs[0]
        gcfg = gan.default_gan_config("dmgan", **{"seed": config.seed, **a.config})
        res = gan.run_dmgan(ds, fl_cfg, gcfg.target_class, gcfg, run_dir=out, max_test=config.max_test)
        samples = res.samples[-1] if res.samples else torch.empty(0)
        entry = {"method": "dmgan", "round": fl_cfg.rounds - 1, "client": res.attacker_id,
                 "status": "ok", "target_class": gcfg.target_class,
                 "num_samples": int(len(samples))}
        job = out / "attacks" / "dmgan"
        job.mkdir(parents=True)
        if len(samples):
            np.save(job / "samples.npy", samples.numpy())
            render_grid(to_unit_range(samples, ds.norm_stats, fl_cfg.normalization),
                        8, int(np.ceil(len(samples) / 8)), job / "grid.png")
        res.generator.save(job / "generator")
        results["attacks"].append(entry)
        records = res.records
        setup = None
    else:
        setup = FederatedSetup.build(ds, spec, fl_cfg, max_test=config.max_test)
        targets = {(a.round, k) for a in server for k in _attacked_clients(a, setup)}
        keep: bool | set = True if config.keep_updates == "all" else {k for _, k in targets}
        capture = _Capture({t for t, _ in targets})
        params0 = build_model(spec, derive_seed(config.seed, "model_init") % 2**31)
        fl_records = run_rounds(setup, hooks=capture, params=params0, run_dir=out, keep_updates=keep)
        records = fl_records
        stored = {t: _StoredRound(list(fl_records[t].updates), capture.params[t])
                  for t in capture.params}
        for a in server:
            for k in _attacked_clients(a, setup):
                entry, code = _run_job(a, k, config, ds, setup, stored, out)
                results["label_inference"] += entry.pop("label_inference", [])
                results["attacks"].append(entry)
                status = max(status, code)

    results["fl"] = {"rounds": len(records),
                     "final_accuracy": records[-1].accuracy if records else None,
                     "accuracy": [r.accuracy for r in records]}
    manifest = {"schema_version": SCHEMA_VERSION, "config_hash": config.config_hash(),
                "package_version": _package_version(), "torch": torch.__version__,
                "python": platform.python_version(), "wall_clock_seconds":
                round(time.perf_counter() - t_start, 3), "exit_code": status}
    _write_json(out / "manifest.json", manifest)
    _write_json(out / "results.json", results)
    emit_report(out)
    return out, status


def _job_context(a: AttackSpec, k: int, config: ExperimentConfig, ds: DatasetHandle,
                 setup: FederatedSetup, records, run_dir: Path) -> AttackContext:
    seed = derive_seed(config.seed, f"attack:{a.method}:{a.round}:{k}") % 2**31
    if a.model is not None:
        # side update: fresh model of the override architecture, same client data
        spec = config.arch_spec(ds.image_shape, ds.num_classes, a.model)
        params = build_model(spec, derive_seed(config.seed, f"model_init:{spec.arch}") % 2**31)
        if spec.arch == "imprint":
            params = _calibrate_imprint(params, spec, setup, config)
        cfg = setup.cfg
        u = client_update(params, spec, setup.client_x[k], setup.client_y[k], cfg, a.round, k,
                          num_classes=ds.num_classes)
    else:
        spec = setup.spec
        rec = records[a.round]
        if rec.global_before is None:
            raise ConfigError(f"global model of round {a.round} was not stored")
        params = rec.global_before
        u = next(x for x in rec.updates if x.client_id == k)
    aux_x, aux_y = _aux_split(setup, config.seed)
    return AttackContext(ds, setup, spec, params, u, setup.client_x[k], setup.client_y[k],
                         aux_x, aux_y, seed, run_dir)


def _aux_split(setup: FederatedSetup, seed: int, per_class: int = AUX_PER_CLASS):
    """Server-held auxiliary data: up to ``per_class`` test-pool samples of each class."""
    if setup.test_y is None or len(setup.test_y) == 0:
        return None, None
    rng = np.random.default_rng(derive_seed(seed, "aux") % 2**31)
    y = setup.test_y.numpy()
    idx = np.sort(np.concatenate([rng.permutation(np.flatnonzero(y == c))[:per_class]
                                  for c in np.unique(y)]))
    return setup.test_x[idx], setup.test_y[idx]


def _calibrate_imprint(params: ParameterSet, spec: ArchitectureSpec, setup: FederatedSetup,
                       config: ExperimentConfig) -> ParameterSet:
    """Re-seat imprint thresholds on brightness statistics of the server's test pool."""
    if setup.test_x is None or len(setup.test_x) == 0:
        return params
    mean, std = analytic.brightness_stats(setup.test_x, spec.imprint_measurement)
    block = analytic.build_imprint(spec.imprint_bins, spec.input_dim, (mean, std),
                                   spec.imprint_measurement,
                                   derive_seed(config.seed, "imprint") % 2**31)
    params = params.clone()
    params["imprint.weight"] = block.weight.to(params["imprint.weight"])
    params["imprint.bias"] = block.bias.to(params["imprint.bias"])
    return params


def _run_job(a: AttackSpec, k: int, config: ExperimentConfig, ds: DatasetHandle,
             setup: FederatedSetup, records, out: Path) -> tuple[dict, int]:
    name = f"{a.method}_r{a.round:03d}_c{k:03d}"
    job = out / "attacks" / name
    entry: dict = {"method": a.method, "round": a.round, "client": k, "job": name}
    ctx = _job_context(a, k, config, ds, setup, records, out)
    entry["data_size"] = int(ctx.update.meta.data_size)
    label_entries = []
    true_counts = np.bincount(ctx.truth_y.numpy(), minlength=ds.num_classes)
    for lm in a.label_methods:
        le = {"method": lm, "job": name, "true_counts": true_counts.tolist()}
        try:
            est = infer_label_counts(lm, ctx)
            le.update(status="ok", counts=est.counts.tolist(), **label_count_accuracy(est, true_counts))
        except (labels.LabelInferenceError, ValueError) as exc:
            le.update(status="failed", error=str(exc))
        label_entries.append(le)
    entry["label_inference"] = label_entries
    try:
        result = run_attack(a, ctx)
    except (inversion.AttackAbort, analytic.NoActiveUnitError) as exc:
        entry.update(status="aborted", error=str(exc))
        log.warning("%s aborted: %s", name, exc)
        job.mkdir(parents=True, exist_ok=True)
        _write_json(job / "error.json", entry)
        return entry, 3
    result.save(job)
    metrics = evaluate_attack(result, ctx, a.max_truth)
    if "match" in metrics:
        _write_json(job / "match.json", metrics.pop("match"))
    imgs = to_unit_range(result.images, ds.norm_stats, setup.cfg.normalization)
    cols = min(10, len(imgs))
    captions = None
    if result.labels is not None and len(imgs) <= 100:
        captions = [f"l={int(v)}" for v in result.labels.flatten()[:len(imgs)]]
    render_grid(imgs[:100], int(np.ceil(min(len(imgs), 100) / cols)), cols, job / "grid.png",
                captions)
    entry.update(status="ok", seconds=round(result.seconds, 3), iterations=result.iterations,
                 flags=result.flags, **metrics)
    return entry, 0


# --------------------------------------------------------------------------- #
# offline replay


def _rebuild(run_dir: Path) -> tuple[ExperimentConfig, DatasetHandle, FederatedSetup]:
    config = ExperimentConfig.from_dict(read_config_file(run_dir / "config.yaml"))
    try:
        ds = _load_data(config)
    except DatasetError as exc:
        raise ConfigError(f"dataset: {exc}") from exc
    spec = config.arch_spec(ds.image_shape, ds.num_classes)
    setup = FederatedSetup.build(ds, spec, config.fl_config(), max_test=config.max_test)
    return config, ds, setup


def replay_attacks(run_dir: str | Path, attack_config: str | Path,
                   overrides: list[str] | None = None) -> int:
    """Run attacks from ``attack_config`` on updates stored in ``run_dir``.

    The attack config is a mapping with an ``attacks`` list (same schema as
    the experiment config). Results are appended to ``results.json``.
    """
    run_dir = Path(run_dir)
    if not (run_dir / "config.yaml").is_file():
        raise ConfigError(f"{run_dir} is not a run directory")
    raw = apply_overrides(read_config_file(attack_config), overrides)
    config, ds, setup = _rebuild(run_dir)
    try:
        attacks = [AttackSpec.from_dict(a) for a in raw.get("attacks", [])]
    except TypeError as exc:
        raise ConfigError(f"attacks: {exc}") from exc
    probe = copy.deepcopy(config)
    probe.attacks = attacks
    probe.validate()
    results = json.loads((run_dir / "results.json").read_text())
    status = 0
    for a in attacks:
        if a.method == "dmgan":
            raise ConfigError("dmgan runs inside training and cannot be replayed")
        records = _stored_records(run_dir, a.round)
        for k in _attacked_clients(a, setup):
            if a.model is None and k not in {u.client_id for u in records[a.round].updates}:
                raise ConfigError(f"no stored update for round {a.round} client {k}")
            entry, code = _run_job(a, k, config, ds, setup, records, run_dir)
            results["label_inference"] += entry.pop("label_inference", [])
            results["attacks"].append(entry)
            status = max(status, code)
    _write_json(run_dir / "results.json", results)
    emit_report(run_dir)
    return status


@dataclass
class _StoredRound:
    updates: list[ClientUpdate]
    global_before: ParameterSet | None


def _stored_records(run_dir: Path, t: int) -> dict[int, _StoredRound]:
    upd = run_dir / "updates"
    gb = upd / f"round{t:03d}_global_before.npz"
    before = ParameterSet.load(gb.with_suffix(""))[0] if gb.exists() else None
    ups = [ClientUpdate.load(p.with_suffix("")) for p in sorted(upd.glob(f"round{t:03d}_client*.npz"))]
    return {t: _StoredRound(ups, before)}


# --------------------------------------------------------------------------- #
# reporting


def results_schema() -> dict:
    return json.loads((resources.files("fedleak") / "schema" / "results.schema.json").read_text())


def emit_report(run_dir: str | Path) -> Path:
    """Validate ``results.json`` and write ``summary.txt``; returns the summary path."""
    import jsonschema

    run_dir = Path(run_dir)
    results = json.loads((run_dir / "results.json").read_text())
    jsonschema.validate(results, results_schema())
    lines = [f"experiment {results['experiment']}  (schema {results['schema_version']})"]
    fl = results["fl"]
    acc = fl.get("final_accuracy")
    lines.append(f"FL rounds {fl['rounds']}  final accuracy "
                 f"{'n/a' if acc is None else f'{acc:.4f}'}")
    lines.append("")
    header = f"{'job':<32}{'status':<9}{'|D|':>6}{'rec':>6}{'PSNR':>9}{'SSIM':>8}{'|corr|':>8}{'sec':>9}"
    lines += [header, "-" * len(header)]
    for e in results["attacks"]:
        def num(key, fmt):
            v = e.get(key)
            if v is None:
                return "-"
            return v if isinstance(v, str) else format(v, fmt)
        lines.append(f"{e.get('job', e['method']):<32}{e['status']:<9}{e.get('data_size', '-'):>6}"
                     f"{e.get('num_recovered', '-'):>6}{num('mean_psnr', '.2f'):>9}"
                     f"{num('mean_ssim', '.3f'):>8}{num('matched_abs_corr', '.3f'):>8}"
                     f"{num('seconds', '.1f'):>9}")
    if results["label_inference"]:
        lines += ["", f"{'label method':<14}{'job':<32}{'exact':>8}{'L1':>6}"]
        for e in results["label_inference"]:
            if e["status"] == "ok":
                lines.append(f"{e['method']:<14}{e['job']:<32}{e['exact_match_fraction']:>8.2f}"
                             f"{e['l1_error']:>6}")
            else:
                lines.append(f"{e['method']:<14}{e['job']:<32}  failed: {e['error']}")
    path = run_dir / "summary.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def render_grid(images, rows: int, cols: int, path: str | Path, captions=None,
                scale: int = 2) -> Path:
    """Write an ``rows x cols`` PNG grid of ``N x C x H x W`` images in [0, 1]."""
    from PIL import Image, ImageDraw

    x = np.asarray(images.detach().cpu() if isinstance(images, torch.Tensor) else images,
                   dtype=np.float64)
    if len(x) == 0:
        raise ValueError("no images to render")
    if rows * cols < len(x):
        raise ValueError(f"{len(x)} images do not fit a {rows}x{cols} grid")
    n, c, h, w = x.shape
    pad = 2
    cap_h = 12 if captions else 0
    ch, cw = h * scale + cap_h, w * scale
    canvas = np.full((rows * (ch + pad) + pad, cols * (cw + pad) + pad, 3), 255, dtype=np.uint8)
    for i in range(n):
        img = np.clip(x[i], 0, 1).transpose(1, 2, 0)
        img = np.repeat(img, 3, axis=2) if c == 1 else img
        img = np.kron((img * 255).round().astype(np.uint8), np.ones((scale, scale, 1), dtype=np.uint8))
        r, q = divmod(i, cols)
        top, left = pad + r * (ch + pad), pad + q * (cw + pad)
        canvas[top:top + h * scale, left:left + cw] = img
    pil = Image.fromarray(canvas)
    if captions:
        draw = ImageDraw.Draw(pil)
        for i, text in enumerate(captions[:n]):
            r, q = divmod(i, cols)
            draw.text((pad + q * (cw + pad) + 1, pad + r * (ch + pad) + h * scale), str(text),
                      fill=(0, 0, 0))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pil.save(path, format="PNG")
    return path
