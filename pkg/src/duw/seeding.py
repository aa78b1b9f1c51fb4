"""Deterministic RNG derivation.

Every random decision in a run is drawn from a stream derived from the run
seed plus a structural path (e.g. ("round", 3, "client", 7)), so reordering
or parallelising client work cannot change any drawn value.
"""

import zlib

import numpy as np
import torch


def _as_ints(parts) -> list[int]:
    out = []
    for p in parts:
        if isinstance(p, (int, np.integer)):
            out.append(int(p) & 0xFFFFFFFF)
        else:
            out.append(zlib.crc32(str(p).encode("utf-8")))
    return out


def derive_seed(root: int, *parts) -> int:
    """A 63-bit seed that is a pure function of (root, *parts)."""
    ss = np.random.SeedSequence([int(root)] + _as_ints(parts))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def np_rng(root: int, *parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *parts))


def torch_gen(root: int, *parts) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(root, *parts))
    return g
