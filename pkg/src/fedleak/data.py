"""Benchmark image datasets, normalization and client partitioning.

Images are held as ``N x C x H x W`` arrays. Real datasets are fetched into a
cache directory laid out as ``<cache_dir>/<name>/raw`` (downloaded archives)
and ``<cache_dir>/<name>/processed`` (a single ``.npz`` built on first use).
Two offline datasets ship with the package for environments without network
access: ``photo_patches`` (32x32 RGB crops from bundled photographs, one class
per photograph) and ``mnist_sample`` (5,000 real MNIST digits).
"""

from __future__ import annotations

import functools
import gzip
import io
import logging
import os
import pickle
import tarfile
import urllib.request
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

log = logging.getLogger(__name__)

CACHE_ENV = "FEDLEAK_DATA"

# name -> (channels, height, width, classes, total size)
DATASET_INFO = {
    "mnist": (1, 28, 28, 10, 70_000),
    "cifar10": (3, 32, 32, 10, 60_000),
    "cifar100": (3, 32, 32, 100, 60_000),
    "tiny_imagenet": (3, 64, 64, 200, 120_000),
}

_URLS = {
    "mnist": [
        "https://ossci-datasets.s3.amazonaws.com/mnist/train-images-idx3-ubyte.gz",
        "https://ossci-datasets.s3.amazonaws.com/mnist/train-labels-idx1-ubyte.gz",
        "https://ossci-datasets.s3.amazonaws.com/mnist/t10k-images-idx3-ubyte.gz",
        "https://ossci-datasets.s3.amazonaws.com/mnist/t10k-labels-idx1-ubyte.gz",
    ],
    "cifar10": ["https://www.cs.toronto.edu/~kriz/cifar-10-python.tar.gz"],
    "cifar100": ["https://www.cs.toronto.edu/~kriz/cifar-100-python.tar.gz"],
    "tiny_imagenet": ["http://cs231n.stanford.edu/tiny-imagenet-200.zip"],
}

# per-channel statistics in [0, 1] pixel units
_NORM_STATS = {
    "mnist": ((0.1307,), (0.3081,)),
    "mnist_sample": ((0.1307,), (0.3081,)),
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "cifar100": ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
    "tiny_imagenet": ((0.4802, 0.4481, 0.3975), (0.2770, 0.2691, 0.2821)),
}

NORMALIZATION_MODES = ("unit_range", "standardized")


class DatasetError(ValueError):
    """Unknown dataset or unusable cache."""


class PartitionError(RuntimeError):
    pass


@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def arrays(self, ndim: int = 4) -> tuple[np.ndarray, np.ndarray]:
        shape = (1, -1) + (1,) * (ndim - 2)
        return (np.asarray(self.mean, np.float32).reshape(shape),
                np.asarray(self.std, np.float32).reshape(shape))


@dataclass
class DatasetHandle:
    """A loaded dataset.

    ``pixels`` is uint8 (raw) or float32 already in [0, 1]; use :meth:`batch`
    to obtain normalized float32 tensors.
    """

    name: str
    pixels: np.ndarray
    labels: np.ndarray
    num_classes: int
    norm_stats: NormStats

    def __post_init__(self):
        if len(self.pixels) != len(self.labels):
            raise DatasetError(
                f"{self.name}: {len(self.pixels)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"{self.name}: label outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])

    def batch(self, indices=None, mode: str = "standardized") -> torch.Tensor:
        x = self.pixels if indices is None else self.pixels[np.asarray(indices)]
        return torch.from_numpy(normalize(x, self.norm_stats, mode))

    def label_tensor(self, indices=None) -> torch.Tensor:
        y = self.labels if indices is None else self.labels[np.asarray(indices)]
        return torch.from_numpy(np.asarray(y, dtype=np.int64))


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    train_indices: np.ndarray
    test_indices: np.ndarray

    @property
    def size(self) -> int:
        return len(self.train_indices) + len(self.test_indices)


@dataclass(frozen=True)
class PartitionPlan:
    mode: str = "dirichlet"
    num_clients: int = 10
    beta: float = 0.5
    seed: int = 0
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.mode not in ("iid", "dirichlet"):
            raise ValueError(f"unknown partition mode {self.mode!r}")
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.mode == "dirichlet" and not self.beta > 0:
            raise ValueError("dirichlet partition requires beta > 0")


# --------------------------------------------------------------------------- #
# loading


def default_cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "fedleak"))


def load_dataset(name: str, cache_dir: str | os.PathLike | None = None,
                 download: bool = True) -> DatasetHandle:
    """Load one of the benchmark datasets, downloading it on first use.

    The official train and test splits are concatenated; partitioning later
    carves per-client train/test sets out of the whole pool. For
    ``tiny_imagenet`` the validation split stands in for the unlabeled test
    split.
    """
    if name == "mnist_sample":
        return mnist_sample()
    if name not in DATASET_INFO and name != "photo_patches":
        raise DatasetError(f"unknown dataset {name!r}; expected one of "
                           f"{sorted(DATASET_INFO) + ['photo_patches', 'mnist_sample']}")
    root = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    if name == "photo_patches":
        return _cached_photo_patches(root / name / "processed" / f"{name}.npz")
    raw, processed = root / name / "raw", root / name / "processed"
    target = processed / f"{name}.npz"
    if target.exists():
        try:
            with np.load(target) as z:
                pixels, labels = z["pixels"], z["labels"]
        except (OSError, ValueError, KeyError) as exc:
            raise DatasetError(f"corrupt processed cache {target}: {exc}") from exc
    else:
        raw.mkdir(parents=True, exist_ok=True)
        for url in _URLS[name]:
            dest = raw / url.rsplit("/", 1)[1]
            if not dest.exists():
                if not download:
                    raise DatasetError(f"{dest} missing and download disabled")
                _fetch(url, dest)
        pixels, labels = _PARSERS[name](raw)
        processed.mkdir(parents=True, exist_ok=True)
        np.savez(target, pixels=pixels, labels=labels)
    c, h, w, k, _ = DATASET_INFO[name]
    if pixels.shape[1:] != (c, h, w):
        raise DatasetError(f"{name}: cached images have shape {pixels.shape[1:]}")
    return DatasetHandle(name, pixels, labels.astype(np.int64), k, NormStats(*_NORM_STATS[name]))


def _fetch(url: str, dest: Path) -> None:
    log.info("downloading %s", url)
    tmp = dest.with_suffix(dest.suffix + ".part")
    try:
        with urllib.request.urlopen(url, timeout=60) as resp, open(tmp, "wb") as fh:
            while chunk := resp.read(1 << 20):
                fh.write(chunk)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise DatasetError(
            f"could not download {url} ({exc}); place the file at {dest} manually") from exc
    tmp.rename(dest)


def _read_idx(path: Path) -> np.ndarray:
    with gzip.open(path, "rb") as fh:
        data = fh.read()
    ndim = data[3]
    dims = np.frombuffer(data, dtype=">u4", count=ndim, offset=4)
    return np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim).reshape(dims)


def _parse_mnist(raw: Path):
    xs = [_read_idx(raw / f"{s}-images-idx3-ubyte.gz") for s in ("train", "t10k")]
    ys = [_read_idx(raw / f"{s}-labels-idx1-ubyte.gz") for s in ("train", "t10k")]
    return np.concatenate(xs)[:, None], np.concatenate(ys)


def _parse_cifar(raw: Path, archive: str, members: Sequence[str], key: bytes):
    xs, ys = [], []
    with tarfile.open(raw / archive, "r:gz") as tar:
        names = {m.name.rsplit("/", 1)[-1]: m for m in tar.getmembers()}
        for member in members:
            d = pickle.load(tar.extractfile(names[member]), encoding="bytes")
            xs.append(np.asarray(d[b"data"], np.uint8).reshape(-1, 3, 32, 32))
            ys.append(np.asarray(d[key]))
    return np.concatenate(xs), np.concatenate(ys)


def _parse_tiny(raw: Path):
    from PIL import Image

    xs, ys = [], []
    with zipfile.ZipFile(raw / "tiny-imagenet-200.zip") as zf:
        wnids = zf.read("tiny-imagenet-200/wnids.txt").decode().split()
        index = {w: i for i, w in enumerate(wnids)}
        val = {}
        for line in zf.read("tiny-imagenet-200/val/val_annotations.txt").decode().splitlines():
            parts = line.split("\t")
            val[parts[0]] = index[parts[1]]
        for name in zf.namelist():
            if not name.endswith(".JPEG"):
                continue
            parts = name.split("/")
            if parts[1] == "train":
                label = index[parts[2]]
            elif parts[1] == "val":
                label = val[parts[-1]]
            else:
                continue
            img = Image.open(io.BytesIO(zf.read(name))).convert("RGB")
            xs.append(np.asarray(img, np.uint8).transpose(2, 0, 1))
            ys.append(label)
    return np.stack(xs), np.asarray(ys)


_PARSERS = {
    "mnist": _parse_mnist,
    "cifar10": lambda raw: _parse_cifar(
        raw, "cifar-10-python.tar.gz",
        [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"], b"labels"),
    "cifar100": lambda raw: _parse_cifar(
        raw, "cifar-100-python.tar.gz", ["train", "test"], b"fine_labels"),
    "tiny_imagenet": _parse_tiny,
}


# --------------------------------------------------------------------------- #
# offline datasets

PHOTO_SOURCES = ("astronaut", "chelsea", "coffee", "rocket", "hubble_deep_field",
                 "immunohistochemistry", "retina", "colorwheel", "china", "flower")


def _photo(name: str) -> np.ndarray:
    if name in ("china", "flower"):
        from sklearn.datasets import load_sample_image
        return load_sample_image(f"{name}.jpg")
    import skimage.data
    return getattr(skimage.data, name)()


@functools.lru_cache(maxsize=2)
def _cached_photo_patches(target: Path) -> DatasetHandle:
    if target.exists():
        try:
            with np.load(target) as z:
                return DatasetHandle("photo_patches", z["pixels"], z["labels"], len(PHOTO_SOURCES),
                                     NormStats(tuple(z["mean"].tolist()), tuple(z["std"].tolist())))
        except (OSError, ValueError, KeyError) as exc:
            raise DatasetError(f"corrupt processed cache {target}: {exc}") from exc
    ds = photo_patches()
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        tmp = target.with_suffix(".tmp.npz")
        np.savez(tmp, pixels=ds.pixels, labels=ds.labels, mean=np.array(ds.norm_stats.mean),
                 std=np.array(ds.norm_stats.std))
        tmp.replace(target)
    except OSError as exc:
        log.warning("could not cache photo_patches at %s: %s", target, exc)
    return ds


@functools.lru_cache(maxsize=2)
def photo_patches(num_per_class: int = 6000, size: int = 32, seed: int = 0) -> DatasetHandle:
    """A CIFAR-shaped 10-class dataset of random crops from bundled photographs.

    Class ``k`` holds crops of ``PHOTO_SOURCES[k]`` taken at random positions
    and scales (48-192 px squares, downsampled to ``size``), randomly mirrored.
    The images have natural-image statistics, which is what the attacks care
    about, and the classes are learnable.
    """
    from PIL import Image

    rng = np.random.default_rng(seed)
    xs = np.empty((num_per_class * len(PHOTO_SOURCES), 3, size, size), np.uint8)
    ys = np.repeat(np.arange(len(PHOTO_SOURCES)), num_per_class)
    i = 0
    for name in PHOTO_SOURCES:
        photo = Image.fromarray(_photo(name)[..., :3])
        w, h = photo.size
        for _ in range(num_per_class):
            s = int(rng.integers(48, min(192, w, h) + 1))
            left, top = int(rng.integers(0, w - s + 1)), int(rng.integers(0, h - s + 1))
            crop = photo.crop((left, top, left + s, top + s)).resize((size, size), Image.BILINEAR)
            arr = np.asarray(crop, np.uint8)
            if rng.random() < 0.5:
                arr = arr[:, ::-1]
            xs[i] = arr.transpose(2, 0, 1)
            i += 1
    mean = tuple(float(v) for v in xs.mean(axis=(0, 2, 3)) / 255.0)
    std = tuple(float(v) for v in xs.std(axis=(0, 2, 3)) / 255.0)
    return DatasetHandle("photo_patches", xs, ys, len(PHOTO_SOURCES), NormStats(mean, std))


@functools.lru_cache(maxsize=1)
def mnist_sample() -> DatasetHandle:
    """5,000 real MNIST digits (500 per class) bundled with ``mlxtend``."""
    import importlib.resources

    try:
        src = importlib.resources.files("mlxtend.data") / "data" / "mnist_5k.csv.gz"
    except ModuleNotFoundError as exc:
        raise DatasetError("mnist_sample requires the 'mlxtend' package") from exc
    with gzip.open(src) as fh:
        table = np.loadtxt(fh, delimiter=",", dtype=np.float32)
    pixels = table[:, :-1].astype(np.uint8).reshape(-1, 1, 28, 28)
    return DatasetHandle("mnist_sample", pixels, table[:, -1].astype(np.int64), 10,
                         NormStats(*_NORM_STATS["mnist_sample"]))


def subset(dataset: DatasetHandle, indices) -> DatasetHandle:
    indices = np.asarray(indices)
    return DatasetHandle(dataset.name, dataset.pixels[indices], dataset.labels[indices],
                         dataset.num_classes, dataset.norm_stats)


# --------------------------------------------------------------------------- #
# normalization


def normalize(images: np.ndarray, norm_stats: NormStats, mode: str = "standardized") -> np.ndarray:
    """Map raw images into the model's input domain.

    uint8 input is first scaled to [0, 1]; float input is assumed to be in
    [0, 1] already. ``standardized`` then applies per-channel (x - mean) / std.
    """
    if mode not in NORMALIZATION_MODES:
        raise ValueError(f"unknown normalization mode {mode!r}")
    x = np.asarray(images)
    x = x.astype(np.float32) / 255.0 if x.dtype == np.uint8 else x.astype(np.float32, copy=True)
    if mode == "unit_range":
        return x
    mean, std = norm_stats.arrays(x.ndim)
    if np.any(std == 0):
        raise ValueError("normalization stats contain a zero standard deviation channel")
    return (x - mean) / std


def denormalize(images, norm_stats: NormStats, mode: str = "standardized"):
    """Inverse of :func:`normalize` for float images (numpy or torch)."""
    if mode == "unit_range":
        return images
    if mode != "standardized":
        raise ValueError(f"unknown normalization mode {mode!r}")
    mean, std = norm_stats.arrays(images.ndim)
    if isinstance(images, torch.Tensor):
        mean = torch.from_numpy(mean).to(images)
        std = torch.from_numpy(std).to(images)
    return images * std + mean


def pixel_box(norm_stats: NormStats, mode: str, ndim: int = 4):
    """Lower/upper bounds of valid pixels in the normalized domain."""
    if mode == "unit_range":
        return 0.0, 1.0
    mean, std = norm_stats.arrays(ndim)
    return torch.from_numpy(-mean / std), torch.from_numpy((1 - mean) / std)


# --------------------------------------------------------------------------- #
# partitioning


def _split_shard(client_id: int, idx: np.ndarray, rng: np.random.Generator,
                 test_fraction: float) -> ClientShard:
    idx = rng.permutation(idx)
    n_test = int(round(test_fraction * len(idx)))
    return ClientShard(client_id, np.sort(idx[n_test:]), np.sort(idx[:n_test]))


def _dirichlet_assign(labels: np.ndarray, num_clients: int, beta: float,
                      rng: np.random.Generator) -> list[np.ndarray]:
    parts: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        p = rng.dirichlet(np.full(num_clients, beta))
        cuts = (np.cumsum(p)[:-1] * len(idx)).astype(int)
        for k, chunk in enumerate(np.split(idx, cuts)):
            parts[k].append(chunk)
    return [np.concatenate(p) for p in parts]


def partition(dataset: DatasetHandle | np.ndarray, plan: PartitionPlan,
              min_train: int = 1, max_retries: int = 10) -> list[ClientShard]:
    """Split a dataset across ``plan.num_clients`` disjoint client shards.

    ``dataset`` may also be a bare label array. Each shard is split into
    train/test by ``plan.test_fraction``. Under the Dirichlet regime, a draw in
    which some client ends up with fewer than ``min_train`` training samples is
    redrawn with the next seed, up to ``max_retries`` times.
    """
    labels = dataset.labels if isinstance(dataset, DatasetHandle) else np.asarray(dataset)
    n = len(labels)
    if plan.mode == "iid":
        rng = np.random.default_rng(plan.seed)
        shards = [_split_shard(k, idx, rng, plan.test_fraction)
                  for k, idx in enumerate(np.array_split(rng.permutation(n), plan.num_clients))]
        if min(len(s.train_indices) for s in shards) < min_train:
            raise PartitionError(f"IID split leaves fewer than {min_train} training samples")
        return shards
    for attempt in range(max_retries + 1):
        rng = np.random.default_rng(plan.seed + attempt)
        assigned = _dirichlet_assign(labels, plan.num_clients, plan.beta, rng)
        shards = [_split_shard(k, idx, rng, plan.test_fraction) for k, idx in enumerate(assigned)]
        smallest = min(len(s.train_indices) for s in shards)
        if smallest >= min_train:
            if attempt:
                log.info("dirichlet partition accepted after %d redraws", attempt)
            return shards
    raise PartitionError(
        f"no Dirichlet draw gave every client >= {min_train} training samples "
        f"after {max_retries} retries (beta={plan.beta}, K={plan.num_clients})")


def label_histogram(labels: np.ndarray, indices, num_classes: int) -> np.ndarray:
    return np.bincount(np.asarray(labels)[np.asarray(indices, dtype=int)], minlength=num_classes)


def make_batches(indices, batch_size: int, seed: int | None = None,
                 epoch: int = 0) -> list[np.ndarray]:
    """Shuffle ``indices`` deterministically per ``(seed, epoch)`` and chunk them.

    The last partial batch is kept. ``seed=None`` keeps the given order.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if isinstance(indices, ClientShard):
        indices = indices.train_indices
    idx = np.asarray(indices)
    if idx.size == 0:
        raise ValueError("cannot batch an empty shard")
    if seed is not None:
        idx = np.random.default_rng([seed, epoch]).permutation(idx)
    return [idx[i:i + batch_size] for i in range(0, len(idx), batch_size)]
