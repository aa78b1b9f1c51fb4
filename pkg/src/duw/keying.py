"""Client keys and the frozen decoder head.

Keys are one-hot bit strings of length d (>= number of clients); the decoder
is a single linear layer whose rows are drawn orthonormal once and never
updated afterwards, so the watermark task of one client cannot interfere
with another's through the head.
"""

from collections import OrderedDict
from dataclasses import dataclass
from typing import List

import numpy as np
import torch

from .errors import fail
from .params import checksum
from .seeding import np_rng


@dataclass(frozen=True)
class ClientKey:
    client_id: int
    bits: tuple

    @property
    def hot_index(self) -> int:
        return self.bits.index(1)

    def as_tensor(self) -> torch.Tensor:
        return torch.tensor(self.bits, dtype=torch.float32)


@dataclass
class DecoderParams:
    weight: torch.Tensor  # (d, latent_dim), rows orthonormal
    bias: torch.Tensor    # (d,), all zeros
    seed: int
    frozen: bool = True

    @property
    def key_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.weight.shape[1]

    def as_params(self) -> "OrderedDict[str, torch.Tensor]":
        return OrderedDict([("decoder.weight", self.weight), ("decoder.bias", self.bias)])

    def fingerprint(self) -> str:
        return checksum(self.as_params())


def make_keys(K: int, d: int) -> List[ClientKey]:
    if K < 1:
        raise ValueError("need at least one client")
    if d < K:
        raise fail("keyspace-too-small", f"key length {d} cannot index {K} clients")
    keys = []
    for k in range(K):
        bits = [0] * d
        bits[k] = 1
        keys.append(ClientKey(client_id=k, bits=tuple(bits)))
    return keys


def default_key_length(K: int) -> int:
    """Next power of two >= K, leaving headroom for late-joining clients."""
    d = 1
    while d < K:
        d *= 2
    return d


def init_decoder(d: int, latent_dim: int, seed: int) -> DecoderParams:
    """Orthonormal rows from a QR factorisation of a seeded Gaussian matrix."""
    if d > latent_dim:
        raise fail("rank-deficient-decoder",
                   f"cannot fit {d} orthogonal rows in a {latent_dim}-dim latent space")
    rng = np_rng(seed, "decoder-init")
    gauss = rng.standard_normal((latent_dim, d))
    q, r = np.linalg.qr(gauss)
    # Fix the sign convention so the factorisation is unique per seed.
    q = q * np.sign(np.diag(r))[None, :]
    weight = torch.from_numpy(np.ascontiguousarray(q.T)).to(torch.float32)
    bias = torch.zeros(d, dtype=torch.float32)
    return DecoderParams(weight=weight, bias=bias, seed=seed, frozen=True)


def gram_offdiag_max(decoder: DecoderParams) -> float:
    w = decoder.weight.double()
    gram = w @ w.T
    off = gram - torch.diag(torch.diag(gram))
    return float(off.abs().max())
