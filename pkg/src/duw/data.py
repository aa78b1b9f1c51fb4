"""Datasets, non-iid partitioning, validation splits, and OoD pools.

The built-in corpus is a procedural 10-class glyph set rendered in several
visually distinct domains, so federations, multi-domain splits, and held-out
OoD sources all come from one seeded generator with no downloads.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .errors import fail
from .seeding import np_rng

# 5x7 dot-matrix digits, upscaled at render time.
_FONT = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    3: ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}

GLYPH_DOMAINS = ("plain", "stripes", "bright", "thick", "invert")

# Per-domain appearance: additive pixel noise and the value range the final
# image is mapped into. The held-out "invert" domain is rendered clean and
# away from the [0,1] rails so residual-based trigger encoding never clips.
_DOMAIN_STYLE = {
    "plain": {"noise": 0.12, "lo": 0.0, "hi": 1.0, "invert": False},
    "stripes": {"noise": 0.12, "lo": 0.0, "hi": 1.0, "invert": False},
    "bright": {"noise": 0.12, "lo": 0.0, "hi": 1.0, "invert": False},
    "thick": {"noise": 0.12, "lo": 0.0, "hi": 1.0, "invert": False},
    "invert": {"noise": 0.02, "lo": 0.08, "hi": 0.92, "invert": True},
}


@dataclass
class Batch:
    """Images in [0,1] with integer class labels (or key rows elsewhere)."""

    images: torch.Tensor  # (n, c, h, w) float32
    labels: torch.Tensor  # (n,) int64

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices) -> "Batch":
        idx = torch.as_tensor(np.asarray(indices), dtype=torch.long)
        return Batch(self.images[idx].clone(), self.labels[idx].clone())


@dataclass
class SourceDataset:
    train: Batch
    test: Batch
    num_classes: int
    domain_tag: Optional[str] = None


@dataclass
class ClientDataset:
    client_id: int
    train: Batch
    test: Batch
    classes: Tuple[int, ...]
    domain_tag: Optional[str] = None
    train_indices: Optional[np.ndarray] = None


@dataclass
class OoDPool:
    images: torch.Tensor  # (n, c, h, w) float32, label-free
    source_tag: str
    seed: int

    def __len__(self) -> int:
        return self.images.shape[0]


def _glyph_mask(digit: int) -> np.ndarray:
    rows = _FONT[digit]
    return np.array([[int(ch) for ch in row] for row in rows], dtype=np.float32)


def _render_glyph(digit: int, rng: np.random.Generator, size: int, domain: str) -> np.ndarray:
    scale = 3
    mask = np.kron(_glyph_mask(digit), np.ones((scale, scale), dtype=np.float32))
    if domain == "thick":
        padded = np.pad(mask, 1)
        mask = np.maximum.reduce(
            [padded[1 + dy : 1 + dy + mask.shape[0], 1 + dx : 1 + dx + mask.shape[1]]
             for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
        )
    gh, gw = mask.shape
    canvas = np.zeros((size, size), dtype=np.float32)
    oy = rng.integers(0, size - gh + 1)
    ox = rng.integers(0, size - gw + 1)
    fg = rng.uniform(0.6, 1.0)
    keep = (rng.random(mask.shape) < 0.92).astype(np.float32)
    canvas[oy : oy + gh, ox : ox + gw] = mask * keep * fg
    if domain == "stripes":
        rows = np.arange(size, dtype=np.float32)
        stripes = 0.35 * (1 + np.sin(2 * np.pi * rows / 5.0))[:, None] / 2
        canvas = np.maximum(canvas, np.broadcast_to(stripes, canvas.shape))
    if domain == "bright":
        canvas = 0.55 + 0.4 * canvas
    style = _DOMAIN_STYLE[domain]
    img = canvas + rng.normal(0.0, style["noise"], canvas.shape).astype(np.float32)
    img = np.clip(img, 0.0, 1.0)
    if style["invert"]:
        img = 1.0 - img
    img = style["lo"] + (style["hi"] - style["lo"]) * img
    return img.astype(np.float32)


def make_glyph_batch(n: int, seed: int, domain: str = "plain", size: int = 28,
                     labels: Optional[Sequence[int]] = None) -> Batch:
    if domain not in GLYPH_DOMAINS:
        raise ValueError(f"unknown glyph domain {domain!r}")
    rng = np_rng(seed, "glyphs", domain)
    ys = np.asarray(labels) if labels is not None else rng.integers(0, 10, size=n)
    imgs = np.stack([_render_glyph(int(y), rng, size, domain) for y in ys])[:, None]
    return Batch(torch.from_numpy(imgs), torch.from_numpy(np.asarray(ys, dtype=np.int64)))


def make_glyph_dataset(samples_per_class: int, test_per_class: int, seed: int,
                       domain: str = "plain", size: int = 28) -> SourceDataset:
    train_labels = np.repeat(np.arange(10), samples_per_class)
    test_labels = np.repeat(np.arange(10), test_per_class)
    rng = np_rng(seed, "glyph-shuffle", domain)
    rng.shuffle(train_labels)
    rng.shuffle(test_labels)
    train = make_glyph_batch(len(train_labels), seed * 2 + 1, domain, size, train_labels)
    test = make_glyph_batch(len(test_labels), seed * 2 + 2, domain, size, test_labels)
    return SourceDataset(train=train, test=test, num_classes=10, domain_tag=domain)


def _class_indices(batch: Batch) -> Dict[int, np.ndarray]:
    ys = batch.labels.numpy()
    return {int(c): np.nonzero(ys == c)[0] for c in np.unique(ys)}


def _client_test(source: SourceDataset, classes: Sequence[int]) -> Batch:
    ys = source.test.labels.numpy()
    keep = np.nonzero(np.isin(ys, np.asarray(list(classes))))[0]
    return source.test.subset(keep)


def partition_by_class(source: SourceDataset, K: int, classes_per_client: int,
                       seed: int) -> List[ClientDataset]:
    """Uniform split where each client holds a random subset of the classes."""
    if K < 1 or classes_per_client > source.num_classes:
        raise ValueError("need K >= 1 and classes_per_client <= num_classes")
    if K > len(source.train):
        raise fail("insufficient-data", f"{K} clients for {len(source.train)} samples")
    by_class = _class_indices(source.train)
    present = sorted(by_class)
    if K * classes_per_client < len(present):
        raise fail("insufficient-data", "class subsets cannot cover every class")
    rng = np_rng(seed, "partition-by-class")
    for _ in range(1000):
        assignment = [tuple(sorted(rng.choice(present, classes_per_client, replace=False)))
                      for _ in range(K)]
        if set().union(*map(set, assignment)) == set(present):
            break
    else:
        raise fail("insufficient-data", "could not cover every class; increase K or classes_per_client")
    chunks: Dict[int, List[np.ndarray]] = {k: [] for k in range(K)}
    for c in present:
        holders = [k for k in range(K) if c in assignment[k]]
        idx = by_class[c].copy()
        rng.shuffle(idx)
        for holder, part in zip(holders, np.array_split(idx, len(holders))):
            chunks[holder].append(part)
    clients = []
    for k in range(K):
        idx = np.sort(np.concatenate(chunks[k])) if chunks[k] else np.array([], dtype=int)
        clients.append(ClientDataset(
            client_id=k,
            train=source.train.subset(idx),
            test=_client_test(source, assignment[k]),
            classes=assignment[k],
            domain_tag=source.domain_tag,
            train_indices=idx,
        ))
    return clients


def partition_dirichlet(source: SourceDataset, K: int, alpha: float, seed: int) -> List[ClientDataset]:
    """Per-class proportions drawn from Dirichlet(alpha); resampled until no client is empty."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if K > len(source.train):
        raise fail("insufficient-data", f"{K} clients for {len(source.train)} samples")
    by_class = _class_indices(source.train)
    rng = np_rng(seed, "partition-dirichlet")
    for _ in range(100):
        parts: Dict[int, List[np.ndarray]] = {k: [] for k in range(K)}
        for c, idx in sorted(by_class.items()):
            p = rng.dirichlet(np.full(K, alpha))
            counts = rng.multinomial(len(idx), p)
            shuffled = idx.copy()
            rng.shuffle(shuffled)
            start = 0
            for k, cnt in enumerate(counts):
                if cnt:
                    parts[k].append(shuffled[start : start + cnt])
                start += cnt
        if all(parts[k] for k in range(K)):
            break
    else:
        raise fail("insufficient-data", "Dirichlet split kept producing empty clients")
    clients = []
    for k in range(K):
        idx = np.sort(np.concatenate(parts[k]))
        classes = tuple(sorted(int(c) for c in np.unique(source.train.labels.numpy()[idx])))
        clients.append(ClientDataset(
            client_id=k,
            train=source.train.subset(idx),
            test=_client_test(source, classes),
            classes=classes,
            domain_tag=source.domain_tag,
            train_indices=idx,
        ))
    return clients


def multi_domain_assign(domain_datasets: Dict[str, SourceDataset], clients_per_domain: int,
                        seed: int) -> List[ClientDataset]:
    """Each domain split uniformly into ``clients_per_domain`` clients."""
    if len(domain_datasets) < 2:
        raise ValueError("multi-domain assignment needs at least two domains")
    clients = []
    next_id = 0
    for tag in sorted(domain_datasets):
        source = domain_datasets[tag]
        if len(source.train) < clients_per_domain:
            raise fail("insufficient-data", f"domain {tag!r} has too few samples")
        rng = np_rng(seed, "multi-domain", tag)
        idx = rng.permutation(len(source.train))
        for part in np.array_split(idx, clients_per_domain):
            part = np.sort(part)
            classes = tuple(sorted(int(c) for c in np.unique(source.train.labels.numpy()[part])))
            clients.append(ClientDataset(
                client_id=next_id,
                train=source.train.subset(part),
                test=_client_test(source, classes),
                classes=classes,
                domain_tag=tag,
                train_indices=part,
            ))
            next_id += 1
    return clients


def holdout_validation(batch: Batch, fraction: float, seed: int) -> Tuple[Batch, Batch]:
    """Stratified split into (train, validation); validation gets ~fraction of each class."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    rng = np_rng(seed, "holdout")
    by_class = _class_indices(batch)
    total_val = int(round(fraction * len(batch)))
    floors, remainders = {}, {}
    for c, idx in by_class.items():
        exact = fraction * len(idx)
        floors[c] = int(exact)
        remainders[c] = exact - int(exact)
    leftover = total_val - sum(floors.values())
    for c in sorted(by_class, key=lambda c: (-remainders[c], c))[: max(leftover, 0)]:
        floors[c] += 1
    val_parts, train_parts = [], []
    for c, idx in sorted(by_class.items()):
        shuffled = idx.copy()
        rng.shuffle(shuffled)
        val_parts.append(shuffled[: floors[c]])
        train_parts.append(shuffled[floors[c] :])
    val_idx = np.sort(np.concatenate(val_parts))
    train_idx = np.sort(np.concatenate(train_parts))
    return batch.subset(train_idx), batch.subset(val_idx)


def jigsaw_expand(tile: np.ndarray, hw: Tuple[int, int]) -> np.ndarray:
    """Grow a (c, th, tw) tile to (c, h, w) by repeated reflect padding on the
    high side of each axis; the input tile stays at the top-left corner."""
    out = tile
    for axis, target in ((1, hw[0]), (2, hw[1])):
        while out.shape[axis] < target:
            pad = min(out.shape[axis] - 1, target - out.shape[axis])
            widths = [(0, 0)] * out.ndim
            widths[axis] = (0, pad)
            out = np.pad(out, widths, mode="reflect")
    return out.astype(np.float32)


def make_ood_pool(source: str, size: int, input_shape: Tuple[int, int, int], seed: int,
                  domain_data: Optional[Batch] = None, domain_tag: Optional[str] = None,
                  training_domains: Sequence[str] = ()) -> OoDPool:
    """Label-free images from outside every client's training distribution."""
    if size < 1:
        raise ValueError("size must be >= 1")
    c, h, w = input_shape
    rng = np_rng(seed, "ood", source)
    if source == "random-noise":
        imgs = rng.random((size, c, h, w), dtype=np.float64).astype(np.float32)
        return OoDPool(torch.from_numpy(imgs), "random-noise", seed)
    if source == "jigsaw":
        tiles = rng.random((size, c, 4, 4)).astype(np.float32)
        imgs = np.stack([jigsaw_expand(t, (h, w)) for t in tiles])
        return OoDPool(torch.from_numpy(imgs), "jigsaw", seed)
    if source == "held-out-domain":
        if domain_data is None:
            raise ValueError("held-out-domain pool needs domain_data")
        if domain_tag is not None and domain_tag in set(training_domains):
            raise fail("ood-leakage", f"domain {domain_tag!r} is part of FL training")
        if len(domain_data) < size:
            raise fail("insufficient-data", f"pool of {size} from {len(domain_data)} samples")
        if tuple(domain_data.images.shape[1:]) != (c, h, w):
            raise fail("input-shape", "held-out domain images do not match the training shape")
        idx = rng.choice(len(domain_data), size=size, replace=False)
        return OoDPool(domain_data.images[torch.as_tensor(idx, dtype=torch.long)].clone(),
                       domain_tag or "held-out-domain", seed)
    raise ValueError(f"unknown OoD source {source!r}")
