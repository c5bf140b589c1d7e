"""Thin contract over a differentiable classifier.

Everything downstream (attacks, training, analysis) talks to a ModelHandle and
never to a bare nn.Module, so the forward path, per-example losses and the
three gradient targets (input / spatial parameters / model parameters) live in
one place. Input normalization happens inside the handle: callers always work
in raw [0, 1] pixel space.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .errors import InputError, NumericalError, UsageError
from .io import atomic_write_text, read_json


def seed_all(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


# ---------------------------------------------------------------------------
# Architectures
# ---------------------------------------------------------------------------


class SimpleCnn(nn.Module):
    """Four conv layers + three fully connected, for 28x28 single-channel input.

    The dropout of the original recipe is omitted so that forward passes are
    deterministic in both train and eval mode.
    """

    def __init__(self, num_classes: int = 10):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(1, 32, 3),
            nn.ReLU(),
            nn.Conv2d(32, 32, 3),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3),
            nn.ReLU(),
            nn.Conv2d(64, 64, 3),
            nn.ReLU(),
            nn.MaxPool2d(2),
        )
        self.classifier = nn.Sequential(
            nn.Linear(64 * 4 * 4, 200),
            nn.ReLU(),
            nn.Linear(200, 200),
            nn.ReLU(),
            nn.Linear(200, num_classes),
        )

    def forward(self, x):
        h = self.features(x)
        return self.classifier(h.flatten(1))


class PreActBlock(nn.Module):
    """Pre-activation residual block with group normalization."""

    def __init__(self, in_planes: int, planes: int, stride: int = 1, groups: int = 32):
        super().__init__()
        self.gn1 = nn.GroupNorm(min(groups, in_planes), in_planes)
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride=stride, padding=1, bias=False)
        self.gn2 = nn.GroupNorm(min(groups, planes), planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=1, padding=1, bias=False)
        self.shortcut = None
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Conv2d(in_planes, planes, 1, stride=stride, bias=False)

    def forward(self, x):
        out = torch.relu(self.gn1(x))
        sc = self.shortcut(out) if self.shortcut is not None else x
        out = self.conv1(out)
        out = self.conv2(torch.relu(self.gn2(out)))
        return out + sc


class PreActResNet18(nn.Module):
    def __init__(self, num_classes: int = 10, groups: int = 32):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 64, 3, stride=1, padding=1, bias=False)
        layers = []
        in_planes = 64
        for planes, stride in [(64, 1), (64, 1), (128, 2), (128, 1),
                               (256, 2), (256, 1), (512, 2), (512, 1)]:
            layers.append(PreActBlock(in_planes, planes, stride, groups))
            in_planes = planes
        self.layers = nn.Sequential(*layers)
        self.gn = nn.GroupNorm(min(groups, 512), 512)
        self.linear = nn.Linear(512, num_classes)

    def forward(self, x):
        out = self.layers(self.conv1(x))
        out = torch.relu(self.gn(out))
        out = torch.nn.functional.adaptive_avg_pool2d(out, 1).flatten(1)
        return self.linear(out)


ARCHITECTURES: dict[str, Callable[[int], nn.Module]] = {
    "simple-cnn": SimpleCnn,
    "preact-resnet18": PreActResNet18,
}


def register_architecture(name: str, builder: Callable[[int], nn.Module]) -> None:
    """Make a builder available for ModelHandle construction and checkpoint load."""
    ARCHITECTURES[name] = builder


# ---------------------------------------------------------------------------
# Handle and batch types
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """Images in [0, 1], shape (B, C, H, W); integer labels in [0, K)."""

    images: torch.Tensor
    labels: torch.Tensor

    def validate(self, num_classes: int) -> "Batch":
        if not torch.isfinite(self.images).all():
            raise InputError("batch images contain NaN/Inf")
        if self.labels.numel() and (
            int(self.labels.min()) < 0 or int(self.labels.max()) >= num_classes
        ):
            raise InputError(
                f"labels outside [0, {num_classes}): "
                f"min={int(self.labels.min())} max={int(self.labels.max())}"
            )
        return self

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class ModelHandle:
    """A classifier plus the metadata needed to use it anywhere in the toolkit."""

    arch: str
    num_classes: int
    net: nn.Module
    normalization: tuple[tuple[float, ...], tuple[float, ...]] = ((0.0,), (1.0,))
    optimizer: Optional[torch.optim.Optimizer] = None
    optim_config: dict = field(default_factory=dict)

    @classmethod
    def create(
        cls,
        arch: str,
        num_classes: int = 10,
        normalization=None,
        momentum: float = 0.0,
        weight_decay: float = 0.0,
        seed: Optional[int] = None,
    ) -> "ModelHandle":
        if arch not in ARCHITECTURES:
            raise UsageError(f"unknown architecture {arch!r}; known: {sorted(ARCHITECTURES)}")
        if seed is not None:
            seed_all(seed)
        net = ARCHITECTURES[arch](num_classes)
        if normalization is None:
            normalization = ((0.0,), (1.0,)) if arch == "simple-cnn" else (
                (0.4914, 0.4822, 0.4465),
                (0.2470, 0.2435, 0.2616),
            )
        handle = cls(arch=arch, num_classes=num_classes, net=net, normalization=normalization)
        handle.optim_config = {"momentum": momentum, "weight_decay": weight_decay}
        return handle

    def _ensure_optimizer(self, lr: float) -> torch.optim.Optimizer:
        if self.optimizer is None:
            self.optimizer = torch.optim.SGD(
                self.net.parameters(),
                lr=lr,
                momentum=self.optim_config.get("momentum", 0.0),
                weight_decay=self.optim_config.get("weight_decay", 0.0),
            )
        return self.optimizer

    def normalize(self, images: torch.Tensor) -> torch.Tensor:
        mean, std = self.normalization
        m = torch.as_tensor(mean, dtype=images.dtype, device=images.device).view(1, -1, 1, 1)
        s = torch.as_tensor(std, dtype=images.dtype, device=images.device).view(1, -1, 1, 1)
        return (images - m) / s


def forward(model: ModelHandle, images: torch.Tensor) -> torch.Tensor:
    """Logits of shape (B, K). Eval mode: no stochastic layers active."""
    if images.dim() != 4:
        raise InputError(f"expected (B, C, H, W) images, got shape {tuple(images.shape)}")
    model.net.eval()
    logits = model.net(model.normalize(images))
    if logits.dim() != 2 or logits.shape[1] != model.num_classes:
        raise InputError(
            f"model produced shape {tuple(logits.shape)}, expected (B, {model.num_classes})"
        )
    return logits


def loss_ce(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-example cross entropy: logsumexp(logits) - logits[y]."""
    _check_labels(logits, labels)
    true = logits.gather(1, labels.view(-1, 1)).squeeze(1)
    return torch.logsumexp(logits, dim=1) - true


def loss_smoothmax(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-example smooth-max loss: logsumexp over classes i != y, minus logits[y]."""
    if logits.shape[1] < 2:
        raise InputError("smooth-max loss needs at least 2 classes")
    _check_labels(logits, labels)
    true = logits.gather(1, labels.view(-1, 1)).squeeze(1)
    masked = logits.scatter(1, labels.view(-1, 1), float("-inf"))
    return torch.logsumexp(masked, dim=1) - true


_LOSSES = {"ce": loss_ce, "smoothmax": loss_smoothmax}


def _check_labels(logits: torch.Tensor, labels: torch.Tensor) -> None:
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= logits.shape[1]):
        raise InputError(f"label out of range for K={logits.shape[1]}")


def per_example_loss(
    model: ModelHandle, images: torch.Tensor, labels: torch.Tensor, loss_kind: str = "ce"
) -> torch.Tensor:
    return _LOSSES[loss_kind](forward(model, images), labels)


def grad_wrt(
    model: ModelHandle,
    loss_kind: str,
    batch: Batch,
    wrt: str,
    spatial=None,
):
    """Gradient of the summed per-example loss.

    wrt="input"         -> tensor shaped like batch.images
    wrt="model-params"  -> list of tensors shaped like net.parameters()
    wrt="spatial-params"-> (flow_grad, affine_grad) through the warp chain;
                           requires a SpatialParams-like `spatial` argument.
    """
    if loss_kind not in _LOSSES:
        raise UsageError(f"unknown loss kind {loss_kind!r}")
    if wrt == "input":
        x = batch.images.detach().requires_grad_(True)
        loss = per_example_loss(model, x, batch.labels, loss_kind).sum()
        return torch.autograd.grad(loss, x)[0]
    if wrt == "model-params":
        params = [p for p in model.net.parameters() if p.requires_grad]
        loss = per_example_loss(model, batch.images, batch.labels, loss_kind).sum()
        return list(torch.autograd.grad(loss, params))
    if wrt == "spatial-params":
        if spatial is None:
            raise UsageError("spatial-params gradient requires a spatial argument")
        from . import grids  # deferred to avoid an import cycle

        flow = spatial.flow.detach().requires_grad_(True)
        affine = spatial.affine.detach().requires_grad_(True)
        b, _, h, w = batch.images.shape
        base = grids.base_grid(b, h, w, dtype=batch.images.dtype, device=batch.images.device)
        grid = grids.integrated_grid_from(flow, affine, base)
        warped = grids.bilinear_sample(batch.images, grid)
        loss = per_example_loss(model, warped, batch.labels, loss_kind).sum()
        return torch.autograd.grad(loss, [flow, affine])
    raise UsageError(f"unknown gradient target {wrt!r}")


def train_step(model: ModelHandle, loss: torch.Tensor, lr: float) -> ModelHandle:
    """One optimizer step on the scalar loss. Refuses to step on non-finite loss."""
    if loss.dim() != 0:
        raise UsageError("train_step expects a scalar loss")
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite training loss: {loss.item()!r}")
    opt = model._ensure_optimizer(lr)
    for group in opt.param_groups:
        group["lr"] = lr
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    return model


# ---------------------------------------------------------------------------
# Checkpoints: parameter blob + JSON sidecar
# ---------------------------------------------------------------------------


def save_checkpoint(model: ModelHandle, path: str, config_hash: str = "") -> str:
    """Write `path` (torch blob) and `path + ".json"` (sidecar). Returns `path`."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    blob = {
        "params": model.net.state_dict(),
        "optim": model.optimizer.state_dict() if model.optimizer is not None else None,
        "optim_config": model.optim_config,
    }
    tmp = path + ".tmp"
    torch.save(blob, tmp)
    os.replace(tmp, path)
    sidecar = {
        "architecture_id": model.arch,
        "num_classes": model.num_classes,
        "normalization": [list(model.normalization[0]), list(model.normalization[1])],
        "training_config_hash": config_hash,
    }
    atomic_write_text(path + ".json", json.dumps(sidecar, indent=2) + "\n")
    return path


def load_checkpoint(path: str) -> ModelHandle:
    sidecar = read_json(path + ".json")
    arch = sidecar["architecture_id"]
    if arch not in ARCHITECTURES:
        raise InputError(f"checkpoint references unknown architecture {arch!r}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    handle = ModelHandle.create(
        arch,
        num_classes=sidecar["num_classes"],
        normalization=(tuple(sidecar["normalization"][0]), tuple(sidecar["normalization"][1])),
    )
    handle.net.load_state_dict(blob["params"])
    handle.optim_config = blob.get("optim_config", {})
    if blob.get("optim") is not None:
        handle._ensure_optimizer(lr=0.0)
        handle.optimizer.load_state_dict(blob["optim"])
    return handle


def config_hash(obj) -> str:
    """Stable short hash of any JSON-serializable configuration object."""
    canon = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]
