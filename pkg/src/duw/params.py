"""Parameter-collection utilities.

A parameter collection is an ordered ``{name: float tensor}`` mapping.
Collections are treated as immutable values: every operation returns fresh
tensors and never writes through a tensor it received.
"""

import hashlib
from collections import OrderedDict
from typing import Dict, List

import torch

from .errors import fail

Params = "OrderedDict[str, torch.Tensor]"


def clone(params) -> Dict[str, torch.Tensor]:
    return OrderedDict((k, v.detach().clone()) for k, v in params.items())


def check_finite(params, group: str = "parameters") -> None:
    for name, t in params.items():
        if not torch.isfinite(t).all():
            raise fail("numerical-divergence", f"non-finite values in {group}[{name}]")


def check_same_shapes(a, b) -> None:
    if list(a.keys()) != list(b.keys()) or any(a[k].shape != b[k].shape for k in a):
        raise fail("incompatible-parameters", "parameter collections differ in names or shapes")


def sgd_step(params, grads, lr: float) -> Dict[str, torch.Tensor]:
    """One plain gradient-descent update: p <- p - lr * g."""
    if lr < 0:
        raise ValueError("lr must be nonnegative")
    check_same_shapes(params, grads)
    check_finite(grads, "gradient")
    return OrderedDict((k, (params[k] - lr * grads[k]).detach()) for k in params)


def param_distance(theta_a, theta_b) -> float:
    """Euclidean norm of the difference over all tensors, unsquared."""
    check_same_shapes(theta_a, theta_b)
    total = 0.0
    for k in theta_a:
        d = (theta_a[k].double() - theta_b[k].double())
        total += float((d * d).sum())
    return total ** 0.5


def mean_params(collections: List) -> Dict[str, torch.Tensor]:
    """Elementwise arithmetic mean; accumulates in float64 for stability."""
    if not collections:
        raise fail("incompatible-parameters", "cannot aggregate an empty list")
    first = collections[0]
    for other in collections[1:]:
        check_same_shapes(first, other)
    out = OrderedDict()
    for k in first:
        acc = torch.zeros_like(first[k], dtype=torch.float64)
        for c in collections:
            acc += c[k].double()
        out[k] = (acc / len(collections)).to(first[k].dtype)
    return out


def checksum(params) -> str:
    """SHA-256 over names and little-endian raw bytes; bit-level identity check."""
    h = hashlib.sha256()
    for k in sorted(params.keys()):
        h.update(k.encode("utf-8"))
        t = params[k].detach().contiguous()
        h.update(t.numpy().astype(t.numpy().dtype.newbyteorder("<"), copy=False).tobytes())
    return h.hexdigest()


def flat_vector(params) -> torch.Tensor:
    return torch.cat([params[k].reshape(-1) for k in params]) if params else torch.empty(0)


def num_elements(params) -> int:
    return sum(t.numel() for t in params.values())
