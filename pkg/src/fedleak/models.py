"""Model architectures behind a functional differentiation contract.

Parameters live outside the modules in a :class:`ParameterSet`; every call
goes through :func:`torch.func.functional_call`, so the same module instance
serves training, gradient capture and second-order gradient matching. Every
classifier ends in an affine layer named ``head``.
"""

from __future__ import annotations

import functools
import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

CLASSIFIERS = ("mlp256", "cnn_small", "vgg16", "resnet18", "imprint", "dmgan_discriminator")
GENERATORS = ("dcgan_generator", "grnn_generator")
INITS = ("uniform", "dlg", "normal")


class ArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class ArchitectureSpec:
    """Static description of a network.

    ``backbone`` names the wrapped classifier for ``imprint`` and
    ``dmgan_discriminator``. For ``dmgan_discriminator`` ``num_classes`` counts
    the real classes; the built head has one extra output. Generators use
    ``input_shape`` as their output shape and ``latent_dim`` as input size.
    """

    arch: str
    input_shape: tuple[int, int, int] = (3, 32, 32)
    num_classes: int = 10
    activation: str = "relu"
    init: str = "uniform"
    backbone: str | None = None
    hidden: int = 256
    imprint_bins: int = 100
    imprint_mean: float = 0.0
    imprint_std: float = 1.0
    imprint_measurement: str = "brightness"
    imprint_output_init: str = "ones"
    imprint_output_scale: float = 1.0
    latent_dim: int = 100
    conditional: bool = False

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.arch not in CLASSIFIERS + GENERATORS:
            raise ArchitectureError(f"unknown arch {self.arch!r}")
        if self.activation not in ("relu", "sigmoid"):
            raise ArchitectureError(f"unknown activation {self.activation!r}")
        if self.init not in INITS:
            raise ArchitectureError(f"unknown init {self.init!r}")
        if self.arch in ("imprint", "dmgan_discriminator"):
            if self.backbone not in ("mlp256", "cnn_small", "vgg16", "resnet18"):
                raise ArchitectureError(f"{self.arch} needs a classifier backbone, got {self.backbone!r}")
        if len(self.input_shape) != 3:
            raise ArchitectureError("input_shape must be (C, H, W)")

    @property
    def output_classes(self) -> int:
        return self.num_classes + 1 if self.arch == "dmgan_discriminator" else self.num_classes

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def is_generator(self) -> bool:
        return self.arch in GENERATORS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(**d)


class ParameterSet(OrderedDict):
    """Ordered ``name -> tensor`` map with vector-space helpers."""

    HEAD = "head"

    def head(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Classifier weight ``(n_L, n_{L-1})`` and bias ``(n_L,)``."""
        return self["head.weight"], self["head.bias"]

    def map(self, fn: Callable[[torch.Tensor], torch.Tensor]) -> "ParameterSet":
        return ParameterSet((k, fn(v)) for k, v in self.items())

    def zip_map(self, other: "ParameterSet", fn) -> "ParameterSet":
        if list(self) != list(other):
            raise KeyError("parameter sets have different layouts")
        return ParameterSet((k, fn(v, other[k])) for k, v in self.items())

    def __add__(self, other):
        return self.zip_map(other, torch.add)

    def __sub__(self, other):
        return self.zip_map(other, torch.sub)

    def scale(self, c: float) -> "ParameterSet":
        return self.map(lambda v: v * c)

    def clone(self) -> "ParameterSet":
        return self.map(lambda v: v.detach().clone())

    def detach(self) -> "ParameterSet":
        return self.map(torch.Tensor.detach)

    def to(self, dtype: torch.dtype) -> "ParameterSet":
        return self.map(lambda v: v.to(dtype))

    def requires_grad_(self) -> "ParameterSet":
        return self.map(lambda v: v.detach().clone().requires_grad_(True))

    def numel(self) -> int:
        return sum(v.numel() for v in self.values())

    def flatten(self) -> torch.Tensor:
        return torch.cat([v.reshape(-1) for v in self.values()])

    def unflatten(self, vec: torch.Tensor) -> "ParameterSet":
        """Inverse of :meth:`flatten` using this set's shapes."""
        if vec.numel() != self.numel():
            raise ValueError(f"vector has {vec.numel()} entries, expected {self.numel()}")
        out, i = ParameterSet(), 0
        for k, v in self.items():
            out[k] = vec[i:i + v.numel()].reshape(v.shape)
            i += v.numel()
        return out

    def norm(self) -> float:
        return float(torch.sqrt(sum((v.double() ** 2).sum() for v in self.values())))

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(v).all()) for v in self.values())

    def save(self, path: str | Path, manifest: dict | None = None) -> None:
        """Write ``<path>.npz`` plus ``<path>.json`` (order, shapes, extra manifest)."""
        path = Path(path)
        arrays = {f"p{i:04d}": v.detach().cpu().numpy() for i, v in enumerate(self.values())}
        np.savez(path.with_suffix(".npz"), **arrays)
        meta = {"names": list(self), "shapes": [list(v.shape) for v in self.values()],
                **(manifest or {})}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, path: str | Path) -> tuple["ParameterSet", dict]:
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        with np.load(path.with_suffix(".npz")) as z:
            out = cls((name, torch.from_numpy(z[f"p{i:04d}"].copy()))
                      for i, name in enumerate(meta["names"]))
        return out, meta


@dataclass
class ForwardTrace:
    logits: torch.Tensor
    probs: torch.Tensor
    features: torch.Tensor


# --------------------------------------------------------------------------- #
# modules


def _act(name: str) -> nn.Module:
    return nn.ReLU() if name == "relu" else nn.Sigmoid()


class _Classifier(nn.Module):
    def features(self, x):  # pragma: no cover - abstract
        raise NotImplementedError

    def pre_fc(self, x):
        """Input to the first fully connected layer ``fc1``."""
        raise ArchitectureError(f"{type(self).__name__} has no leading conv/fc split")

    def forward(self, x, return_features: bool = False, pre_fc: bool = False):
        if pre_fc:
            return self.pre_fc(x)
        a = self.features(x)
        logits = self.head(a)
        return (logits, a) if return_features else logits


class MLP(_Classifier):
    def __init__(self, in_dim: int, hidden: int, num_classes: int, act: str):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.act = _act(act)
        self.head = nn.Linear(hidden, num_classes)

    def pre_fc(self, x):
        return x.flatten(1)

    def features(self, x):
        return self.act(self.fc1(x.flatten(1)))


class SmallCNN(_Classifier):
    def __init__(self, shape, num_classes: int, act: str):
        super().__init__()
        c, h, w = shape
        self.conv1 = nn.Conv2d(c, 32, 3, padding=1)
        self.conv2 = nn.Conv2d(32, 64, 3, padding=1)
        self.fc1 = nn.Linear(64 * (h // 4) * (w // 4), 512)
        self.act = _act(act)
        self.head = nn.Linear(512, num_classes)

    def pre_fc(self, x):
        x = F.max_pool2d(self.act(self.conv1(x)), 2)
        return F.max_pool2d(self.act(self.conv2(x)), 2).flatten(1)

    def features(self, x):
        return self.act(self.fc1(self.pre_fc(x)))


_VGG16 = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M")


class VGG16(_Classifier):
    def __init__(self, shape, num_classes: int, act: str):
        super().__init__()
        c, h, w = shape
        layers, ch = [], c
        for v in _VGG16:
            if v == "M":
                layers.append(nn.MaxPool2d(2))
                h, w = h // 2, w // 2
            else:
                layers += [nn.Conv2d(ch, v, 3, padding=1), _act(act)]
                ch = v
        self.body = nn.Sequential(*layers)
        self.fc1 = nn.Linear(512 * h * w, 512)
        self.fc2 = nn.Linear(512, 512)
        self.act = _act(act)
        self.head = nn.Linear(512, num_classes)

    def pre_fc(self, x):
        return self.body(x).flatten(1)

    def features(self, x):
        return self.act(self.fc2(self.act(self.fc1(self.pre_fc(x)))))


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int, act: str):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1)
        self.act = _act(act)
        self.shortcut = (nn.Conv2d(cin, cout, 1, stride) if stride != 1 or cin != cout
                         else nn.Identity())

    def forward(self, x):
        return self.act(self.conv2(self.act(self.conv1(x))) + self.shortcut(x))


class ResNet18(_Classifier):
    def __init__(self, shape, num_classes: int, act: str):
        super().__init__()
        self.stem = nn.Conv2d(shape[0], 64, 3, 1, 1)
        self.act = _act(act)
        blocks, cin = [], 64
        for cout, stride in ((64, 1), (128, 2), (256, 2), (512, 2)):
            blocks += [BasicBlock(cin, cout, stride, act), BasicBlock(cout, cout, 1, act)]
            cin = cout
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Linear(512, num_classes)

    def features(self, x):
        x = self.blocks(self.act(self.stem(x)))
        return F.adaptive_avg_pool2d(x, 1).flatten(1)


class ImprintNet(_Classifier):
    """Imprint block (FC + ReLU), dimension-restoring FC, then a backbone."""

    def __init__(self, shape, bins: int, backbone: _Classifier):
        super().__init__()
        d = int(np.prod(shape))
        self.shape = tuple(shape)
        self.imprint = nn.Linear(d, bins - 1)
        self.restore = nn.Linear(bins - 1, d)
        head, backbone.head = backbone.head, nn.Identity()
        self.backbone = backbone
        self.head = head

    def features(self, x):
        y = self.restore(F.relu(self.imprint(x.flatten(1))))
        return self.backbone.features(y.view(-1, *self.shape))


class DCGANGenerator(nn.Module):
    """Latent (optionally with a one-hot class) to an image in ``tanh`` range."""

    def __init__(self, latent_dim: int, shape, num_classes: int = 0, width: int = 64):
        super().__init__()
        c, h, w = shape
        self.shape, self.num_classes = tuple(shape), num_classes
        self.h0, self.w0 = math.ceil(h / 4), math.ceil(w / 4)
        self.fc = nn.Linear(latent_dim + num_classes, 2 * width * self.h0 * self.w0)
        self.up1 = nn.ConvTranspose2d(2 * width, width, 4, 2, 1)
        self.up2 = nn.ConvTranspose2d(width, c, 4, 2, 1)
        self.width = width

    def forward(self, z, labels=None):
        if self.num_classes:
            z = torch.cat([z, F.one_hot(labels, self.num_classes).to(z)], 1)
        x = F.leaky_relu(self.fc(z), 0.2).view(-1, 2 * self.width, self.h0, self.w0)
        x = F.leaky_relu(self.up1(x), 0.2)
        x = torch.tanh(self.up2(x))
        return x[:, :, :self.shape[1], :self.shape[2]]


class GRNNGenerator(nn.Module):
    """Generator emitting an image and a soft label through a GLU head."""

    def __init__(self, latent_dim: int, shape, num_classes: int, width: int = 64):
        super().__init__()
        self.image = DCGANGenerator(latent_dim, shape, 0, width)
        self.label_fc = nn.Linear(latent_dim, 2 * num_classes)

    def forward(self, z):
        x = self.image(z)
        y = F.softmax(F.glu(self.label_fc(z), dim=1), dim=1)
        return x, y


def _classifier(arch: str, spec: ArchitectureSpec, num_classes: int) -> _Classifier:
    c, h, w = spec.input_shape
    if arch == "mlp256":
        return MLP(spec.input_dim, spec.hidden, num_classes, spec.activation)
    if arch == "cnn_small":
        if h < 4 or w < 4:
            raise ArchitectureError(f"cnn_small needs inputs of at least 4x4, got {h}x{w}")
        return SmallCNN(spec.input_shape, num_classes, spec.activation)
    if arch == "vgg16":
        if h % 32 or w % 32:
            raise ArchitectureError(f"vgg16 needs sides divisible by 32, got {h}x{w}")
        return VGG16(spec.input_shape, num_classes, spec.activation)
    if arch == "resnet18":
        if h < 8 or w < 8:
            raise ArchitectureError(f"resnet18 needs inputs of at least 8x8, got {h}x{w}")
        return ResNet18(spec.input_shape, num_classes, spec.activation)
    raise ArchitectureError(f"{arch} is not a classifier backbone")


@functools.lru_cache(maxsize=64)
def build_module(spec: ArchitectureSpec) -> nn.Module:
    """Stateless module skeleton for ``spec``; parameters come from a ParameterSet."""
    if spec.arch == "imprint":
        net = ImprintNet(spec.input_shape, spec.imprint_bins,
                         _classifier(spec.backbone, spec, spec.num_classes))
    elif spec.arch == "dmgan_discriminator":
        net = _classifier(spec.backbone, spec, spec.num_classes + 1)
    elif spec.arch == "dcgan_generator":
        net = DCGANGenerator(spec.latent_dim, spec.input_shape,
                             spec.num_classes if spec.conditional else 0)
    elif spec.arch == "grnn_generator":
        net = GRNNGenerator(spec.latent_dim, spec.input_shape, spec.num_classes)
    else:
        net = _classifier(spec.arch, spec, spec.num_classes)
    return net.requires_grad_(False)


# --------------------------------------------------------------------------- #
# parameters


def _init_tensor(name: str, shape, fan_in: int, scheme: str, gen: torch.Generator) -> torch.Tensor:
    if scheme == "dlg":
        return torch.rand(shape, generator=gen) - 0.5
    if scheme == "normal" and name.endswith("weight"):
        return torch.randn(shape, generator=gen) * math.sqrt(2.0 / fan_in)
    if scheme == "normal":
        return torch.zeros(shape)
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(shape, generator=gen) * 2 - 1) * bound


def build_model(spec: ArchitectureSpec, init_seed: int = 0) -> ParameterSet:
    """Deterministic initial parameters for ``spec``."""
    module = build_module(spec)
    gen = torch.Generator().manual_seed(int(init_seed))
    params, fan = ParameterSet(), {}
    for name, p in module.named_parameters():
        prefix = name.rsplit(".", 1)[0]
        if name.endswith("weight"):
            fan[prefix] = int(np.prod(p.shape)) // p.shape[0] if p.dim() > 1 else 1
        fan_in = fan.get(prefix, p.shape[0])
        params[name] = _init_tensor(name, tuple(p.shape), fan_in, spec.init, gen)
    if spec.arch == "resnet18" or spec.backbone == "resnet18":
        # residual branches start as identity maps so the unnormalized net trains
        for name in params:
            if ".conv2." in name and "blocks." in name:
                params[name] = torch.zeros_like(params[name])
    if spec.arch == "imprint":
        from .analytic import build_imprint

        block = build_imprint(spec.imprint_bins, spec.input_dim,
                              (spec.imprint_mean, spec.imprint_std),
                              measurement=spec.imprint_measurement, seed=init_seed)
        params["imprint.weight"] = block.weight.clone()
        params["imprint.bias"] = block.bias.clone()
        if spec.imprint_output_init == "ones":
            # identical columns make dL/d(imprint output) equal across bins
            w = torch.full(params["restore.weight"].shape, spec.imprint_output_scale / (spec.imprint_bins - 1))
        else:
            w = torch.randn(params["restore.weight"].shape, generator=gen) * spec.imprint_output_scale
        params["restore.weight"] = w
        params["restore.bias"] = torch.zeros_like(params["restore.bias"])
    return params


# --------------------------------------------------------------------------- #
# evaluation and differentiation


def _check_batch(spec: ArchitectureSpec, x: torch.Tensor) -> None:
    if x.dim() != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise ValueError(f"batch shape {tuple(x.shape)} does not match input {spec.input_shape}")


def logits(params: ParameterSet, spec: ArchitectureSpec, x: torch.Tensor) -> torch.Tensor:
    _check_batch(spec, x)
    return functional_call(build_module(spec), dict(params), (x,))


def forward(params: ParameterSet, spec: ArchitectureSpec, x: torch.Tensor) -> ForwardTrace:
    """Logits, softmax outputs and last hidden activations for a batch."""
    if spec.is_generator:
        raise ArchitectureError("forward() is for classifiers; call generate() for generators")
    _check_batch(spec, x)
    out, feats = functional_call(build_module(spec), dict(params), (x,), {"return_features": True})
    return ForwardTrace(out, F.softmax(out, dim=1), feats)


def generate(params: ParameterSet, spec: ArchitectureSpec, z: torch.Tensor, labels=None):
    if not spec.is_generator:
        raise ArchitectureError(f"{spec.arch} is not a generator")
    args = (z, labels) if spec.arch == "dcgan_generator" else (z,)
    return functional_call(build_module(spec), dict(params), args)


def pre_fc_features(params: ParameterSet, spec: ArchitectureSpec, x: torch.Tensor) -> torch.Tensor:
    """Activations entering the first fully connected layer ``fc1``."""
    _check_batch(spec, x)
    return functional_call(build_module(spec), dict(params), (x,), {"pre_fc": True})


def cross_entropy(out: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy; ``labels`` are class ids or per-row probabilities."""
    return F.cross_entropy(out, labels)


def loss_and_param_grads(params: ParameterSet, spec: ArchitectureSpec, x: torch.Tensor,
                         labels: torch.Tensor, create_graph: bool = False,
                         names: Iterable[str] | None = None):
    """Batch-mean cross-entropy and its gradient with respect to ``params``.

    With ``create_graph`` the returned gradients stay differentiable with
    respect to ``x``, ``labels`` and ``params``. ``names`` restricts the
    gradient to a subset of parameters.
    """
    names = list(params) if names is None else list(names)
    leaves = {k: (v if v.requires_grad else v.detach().requires_grad_(True)) for k, v in params.items()}
    full = {**leaves}
    loss = cross_entropy(logits(ParameterSet(full), spec, x), labels)
    grads = torch.autograd.grad(loss, [leaves[k] for k in names], create_graph=create_graph)
    return loss, ParameterSet(zip(names, grads))


def grad_matching_gradient(objective: Callable[[ParameterSet], torch.Tensor],
                           params: ParameterSet, spec: ArchitectureSpec,
                           dummy_inputs: torch.Tensor, dummy_labels: torch.Tensor):
    """Value and input-gradient of ``objective(param_grads(dummy batch))``.

    Differentiates through the parameter-gradient computation. Returns
    ``(value, d/d inputs, d/d labels)``; the label gradient is ``None`` for
    integer labels.
    """
    x = dummy_inputs.detach().requires_grad_(True)
    soft = dummy_labels.is_floating_point()
    y = dummy_labels.detach().requires_grad_(True) if soft else dummy_labels
    _, g = loss_and_param_grads(params.detach(), spec, x, F.softmax(y, -1) if soft else y,
                                create_graph=True)
    value = objective(g)
    if value.dim() != 0:
        raise ValueError("objective must return a scalar")
    wrt = [x, y] if soft else [x]
    grads = torch.autograd.grad(value, wrt, allow_unused=True)
    dx = grads[0] if grads[0] is not None else torch.zeros_like(x)
    dy = None
    if soft:
        dy = grads[1] if grads[1] is not None else torch.zeros_like(y)
    return value.detach(), dx, dy


def accuracy(params: ParameterSet, spec: ArchitectureSpec, x: torch.Tensor, y: torch.Tensor,
             chunk: int = 500) -> float:
    if len(y) == 0:
        raise ValueError("empty evaluation pool")
    correct = 0
    with torch.no_grad():
        for i in range(0, len(y), chunk):
            correct += int((logits(params, spec, x[i:i + chunk]).argmax(1) == y[i:i + chunk]).sum())
    return correct / len(y)
