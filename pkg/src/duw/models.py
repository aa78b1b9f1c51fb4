"""Model abstraction: a feature extractor with swappable classifier/decoder heads.

A ``ModelBundle`` is a value object holding three parameter groups:

* ``theta_f`` — feature extractor weights (plus ``stats_f`` batch-norm buffers),
* ``theta_h`` — classifier head mapping latents to class logits,
* ``theta_d`` — optional decoder head mapping latents to key logits.

Operations never mutate a bundle they receive; training paths load a bundle
into a reusable module skeleton, step in place, and extract a new bundle.
"""

import dataclasses
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .errors import fail
from .params import check_finite, clone
from .seeding import torch_gen

CLASSIFIER = "classifier"
DECODER = "decoder"


@dataclass(frozen=True)
class ModelMeta:
    arch: str
    input_shape: Tuple[int, int, int]
    num_classes: int
    latent_dim: int
    key_dim: Optional[int] = None
    width: int = 16


@dataclass
class ModelBundle:
    meta: ModelMeta
    theta_f: "OrderedDict[str, torch.Tensor]"
    theta_h: "OrderedDict[str, torch.Tensor]"
    stats_f: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)
    theta_d: "Optional[OrderedDict[str, torch.Tensor]]" = None
    active_head: str = CLASSIFIER


class FeatureClassifier(nn.Module):
    """Skeleton shared by all architectures: ``features`` then a named head."""

    def features(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def head_logits(self, z: torch.Tensor, head: str) -> torch.Tensor:
        return getattr(self, head)(z)


class SmallCNN(FeatureClassifier):
    """Two conv blocks with batch norm, then a linear projection to the latent."""

    def __init__(self, meta: ModelMeta):
        super().__init__()
        c, h, w = meta.input_shape
        wd = meta.width
        self.conv1 = nn.Conv2d(c, wd, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(wd)
        self.conv2 = nn.Conv2d(wd, 2 * wd, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(2 * wd)
        self.fc = nn.Linear(2 * wd * (h // 4) * (w // 4), meta.latent_dim)
        self.classifier = nn.Linear(meta.latent_dim, meta.num_classes)
        if meta.key_dim:
            self.decoder = nn.Linear(meta.latent_dim, meta.key_dim)

    def features(self, x):
        x = F.max_pool2d(F.relu(self.bn1(self.conv1(x))), 2)
        x = F.max_pool2d(F.relu(self.bn2(self.conv2(x))), 2)
        return self.fc(x.flatten(1))


class ToyMLP(FeatureClassifier):
    """Tiny smooth network (tanh, no norm layers) for numerical gradient checks."""

    def __init__(self, meta: ModelMeta):
        super().__init__()
        c, h, w = meta.input_shape
        self.lin1 = nn.Linear(c * h * w, 3)
        self.lin2 = nn.Linear(3, meta.latent_dim)
        self.classifier = nn.Linear(meta.latent_dim, meta.num_classes)
        if meta.key_dim:
            self.decoder = nn.Linear(meta.latent_dim, meta.key_dim)

    def features(self, x):
        return self.lin2(torch.tanh(self.lin1(x.flatten(1))))


class ToyCNN(FeatureClassifier):
    """Two small valid convolutions; under 50 parameters for brute-force oracles."""

    def __init__(self, meta: ModelMeta):
        super().__init__()
        c, h, w = meta.input_shape
        self.conv1 = nn.Conv2d(c, 2, 2)
        self.conv2 = nn.Conv2d(2, 1, 2)
        self.fc = nn.Linear((h - 2) * (w - 2), meta.latent_dim)
        self.classifier = nn.Linear(meta.latent_dim, meta.num_classes)
        if meta.key_dim:
            self.decoder = nn.Linear(meta.latent_dim, meta.key_dim)

    def features(self, x):
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        return self.fc(x.flatten(1))


class LinearModel(FeatureClassifier):
    """Parameter-free flatten feature extractor with a linear head."""

    def __init__(self, meta: ModelMeta):
        super().__init__()
        c, h, w = meta.input_shape
        assert meta.latent_dim == c * h * w, "linear arch latent is the flattened input"
        self.classifier = nn.Linear(meta.latent_dim, meta.num_classes)
        if meta.key_dim:
            self.decoder = nn.Linear(meta.latent_dim, meta.key_dim)

    def features(self, x):
        return x.flatten(1)


_ARCHS = {
    "small_cnn": SmallCNN,
    "toy_mlp": ToyMLP,
    "toy_cnn": ToyCNN,
    "linear": LinearModel,
}

_skeletons: Dict[Tuple[ModelMeta, torch.dtype], FeatureClassifier] = {}


def build_skeleton(meta: ModelMeta, dtype: torch.dtype = torch.float32) -> FeatureClassifier:
    key = (meta, dtype)
    if key not in _skeletons:
        if meta.arch not in _ARCHS:
            raise ValueError(f"unknown architecture {meta.arch!r}")
        _skeletons[key] = _ARCHS[meta.arch](meta).to(dtype)
    return _skeletons[key]


def _group_of(name: str) -> str:
    if name.startswith("classifier."):
        return "h"
    if name.startswith("decoder."):
        return "d"
    return "f"


def init_bundle(meta: ModelMeta, seed: int, dtype: torch.dtype = torch.float32) -> ModelBundle:
    """Fresh parameters, fully determined by (meta, seed).

    Conv/linear weights and biases are uniform in +-1/sqrt(fan_in); batch-norm
    scale/shift start at 1/0 and running stats at 0/1.
    """
    gen = torch_gen(seed, "init", meta.arch)
    module = _ARCHS[meta.arch](meta).to(dtype)
    theta = {"f": OrderedDict(), "h": OrderedDict(), "d": OrderedDict()}
    for name, p in module.named_parameters():
        if "bn" in name:
            value = torch.ones_like(p) if name.endswith("weight") else torch.zeros_like(p)
        else:
            fan_in = p.shape[1] * (p[0, 0].numel() if p.dim() > 1 else 1) if p.dim() > 1 else None
            if fan_in is None:  # bias: reuse the matching weight's fan-in bound
                w = dict(module.named_parameters())[name.rsplit(".", 1)[0] + ".weight"]
                fan_in = w.shape[1] * (w[0, 0].numel() if w.dim() > 1 else 1)
            bound = 1.0 / float(fan_in) ** 0.5
            value = (torch.rand(p.shape, generator=gen, dtype=torch.float32) * 2 - 1) * bound
        theta[_group_of(name)][name] = value.to(dtype)
    stats = OrderedDict()
    for name, b in module.named_buffers():
        if name.endswith("num_batches_tracked"):
            continue
        stats[name] = (torch.zeros_like(b, dtype=dtype) if name.endswith("running_mean")
                       else torch.ones_like(b, dtype=dtype))
    return ModelBundle(
        meta=meta,
        theta_f=theta["f"],
        theta_h=theta["h"],
        stats_f=stats,
        theta_d=theta["d"] or None,
    )


def _validate_images(bundle: ModelBundle, images: torch.Tensor) -> None:
    if images.dim() != 4 or tuple(images.shape[1:]) != tuple(bundle.meta.input_shape):
        raise fail(
            "input-shape",
            f"expected (n, {', '.join(map(str, bundle.meta.input_shape))}), got {tuple(images.shape)}",
        )
    if images.shape[0] < 1:
        raise fail("input-shape", "empty batch")


def _resolve_head(bundle: ModelBundle, head: Optional[str]) -> str:
    head = head or bundle.active_head
    if head not in (CLASSIFIER, DECODER):
        raise fail("head-unavailable", f"unknown head {head!r}")
    if head == DECODER and bundle.theta_d is None:
        raise fail("decoder-not-attached", "bundle carries no decoder parameters")
    return head


class Runner:
    """Loads a bundle into a skeleton for forward passes and in-place updates.

    The source bundle is never written to; ``extract`` clones the current
    module state back out as a new bundle.
    """

    def __init__(self, bundle: ModelBundle, dtype: Optional[torch.dtype] = None):
        self.bundle = bundle
        self.dtype = dtype or next(iter(bundle.theta_h.values())).dtype
        meta = bundle.meta
        if bundle.theta_d is None and meta.key_dim is not None:
            meta = dataclasses.replace(meta, key_dim=None)
        self.meta = meta
        self.module = build_skeleton(meta, self.dtype)
        merged = dict(bundle.theta_f, **bundle.theta_h)
        if bundle.theta_d is not None:
            merged.update(bundle.theta_d)
        with torch.no_grad():
            for name, p in self.module.named_parameters():
                p.copy_(merged[name])
            for name, b in self.module.named_buffers():
                if name.endswith("num_batches_tracked"):
                    b.zero_()
                else:
                    b.copy_(bundle.stats_f[name])

    def logits(self, images: torch.Tensor, head: str, train_mode: bool = False) -> torch.Tensor:
        self.module.train(train_mode)
        return self.module.head_logits(self.module.features(images), head)

    def group_params(self, groups: Iterable[str]) -> "OrderedDict[str, torch.Tensor]":
        want = set(groups)
        return OrderedDict(
            (n, p) for n, p in self.module.named_parameters() if _group_of(n) in want
        )

    def ce_grads(self, images, targets, head: str, groups=("f", "h"), train_mode=True):
        """Cross-entropy loss and its gradients w.r.t. the selected groups."""
        logits = self.logits(images, head, train_mode=train_mode)
        loss = F.cross_entropy(logits, targets)
        named = self.group_params(groups)
        grads = torch.autograd.grad(loss, list(named.values()))
        return loss, OrderedDict(zip(named.keys(), grads))

    def apply_update(self, grads, lr: float, mask=None) -> None:
        named = dict(self.module.named_parameters())
        with torch.no_grad():
            for name, g in grads.items():
                named[name].sub_(lr * g)
                if mask is not None and name in mask:
                    named[name].mul_(mask[name])

    def extract(self) -> ModelBundle:
        groups = {"f": OrderedDict(), "h": OrderedDict(), "d": OrderedDict()}
        for name, p in self.module.named_parameters():
            groups[_group_of(name)][name] = p.detach().clone()
        stats = OrderedDict(
            (n, b.detach().clone())
            for n, b in self.module.named_buffers()
            if not n.endswith("num_batches_tracked")
        )
        return ModelBundle(
            meta=self.bundle.meta if groups["d"] else self.meta,
            theta_f=groups["f"],
            theta_h=groups["h"],
            stats_f=stats,
            theta_d=groups["d"] or None,
            active_head=self.bundle.active_head,
        )


def forward(bundle: ModelBundle, images: torch.Tensor, head: Optional[str] = None) -> torch.Tensor:
    """Deterministic inference-mode logits under the requested head."""
    head = _resolve_head(bundle, head)
    _validate_images(bundle, images)
    runner = Runner(bundle)
    with torch.no_grad():
        out = runner.logits(images.to(runner.dtype), head, train_mode=False)
    check_finite({"logits": out}, "forward output")
    return out


def swap_head(bundle: ModelBundle, to: str) -> ModelBundle:
    """Redirect forward dispatch; parameters are untouched and shared."""
    if to not in (CLASSIFIER, DECODER):
        raise fail("head-unavailable", f"unknown head {to!r}")
    if to == DECODER and bundle.theta_d is None:
        raise fail("head-unavailable", "no decoder parameters to swap to")
    return dataclasses.replace(bundle, active_head=to)


def attach_decoder(bundle: ModelBundle, decoder_params, key_dim: int) -> ModelBundle:
    """Bundle with decoder parameters present (shared tensors, no copies)."""
    wr = decoder_params["decoder.weight"]
    if wr.shape[1] != bundle.meta.latent_dim:
        raise fail(
            "architecture-mismatch",
            f"decoder expects latent dim {wr.shape[1]}, model has {bundle.meta.latent_dim}",
        )
    meta = dataclasses.replace(bundle.meta, key_dim=key_dim)
    return dataclasses.replace(bundle, meta=meta, theta_d=OrderedDict(decoder_params))


def detach_decoder(bundle: ModelBundle) -> ModelBundle:
    meta = dataclasses.replace(bundle.meta, key_dim=None)
    return dataclasses.replace(bundle, meta=meta, theta_d=None, active_head=CLASSIFIER)


def copy_bundle(bundle: ModelBundle) -> ModelBundle:
    return ModelBundle(
        meta=bundle.meta,
        theta_f=clone(bundle.theta_f),
        theta_h=clone(bundle.theta_h),
        stats_f=clone(bundle.stats_f),
        theta_d=clone(bundle.theta_d) if bundle.theta_d is not None else None,
        active_head=bundle.active_head,
    )
