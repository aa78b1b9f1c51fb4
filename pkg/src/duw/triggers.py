"""Trigger-set generation.

The key-conditioned encoder adds an imperceptible residual (hard-bounded in
max norm) to an OoD image so that the embedded bit string is recoverable by
a throwaway probe network. The probe is only a training-time witness that
encodings of different keys are separable; it is discarded after
pre-training and only the encoder weights are kept.

Also provides the classic patch-trigger baselines (random-noise and 0-1
coding) used to demonstrate watermark collisions.
"""

import hashlib
import json
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import OoDPool
from .errors import fail
from .keying import ClientKey
from .params import checksum
from .seeding import np_rng, torch_gen


@dataclass
class EncoderParams:
    theta_e: "OrderedDict[str, torch.Tensor]"
    epsilon_budget: float
    d: int
    input_shape: Tuple[int, int, int]
    width: int
    seed: int
    probe_bit_accuracy: float

    def fingerprint(self) -> str:
        return checksum(self.theta_e)


@dataclass
class TriggerSet:
    client_id: int
    images: torch.Tensor
    source_tag: str
    seed: int
    target_bits: Optional[Tuple[int, ...]] = None  # decoder-space target
    target_class: Optional[int] = None             # classifier-space target (baselines)

    @property
    def key_index(self) -> int:
        if self.target_bits is None:
            raise fail("key-encoder-mismatch", "trigger set has no key target")
        return self.target_bits.index(1)

    def __len__(self) -> int:
        return self.images.shape[0]


class ResidualEncoder(nn.Module):
    """Image plus a spatial key map -> bounded residual added to the image.

    The key is linearly embedded into a coarse spatial grid and upsampled, so
    each bit owns a structured spatial pattern rather than a constant plane
    (a constant plane would collapse to one scalar per conv channel, which
    cannot keep 16 bits separable).
    """

    def __init__(self, channels: int, key_dim: int, hw: Tuple[int, int],
                 width: int = 16, grid: int = 7):
        super().__init__()
        self.hw = hw
        self.grid = grid
        self.embed = nn.Linear(key_dim, width * grid * grid)
        self.conv1 = nn.Conv2d(channels + width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.conv3 = nn.Conv2d(width, channels, 3, padding=1)

    def forward(self, x: torch.Tensor, bits: torch.Tensor, eps: float) -> torch.Tensor:
        n = x.shape[0]
        key_map = self.embed(bits * 2 - 1).reshape(n, -1, self.grid, self.grid)
        key_map = F.interpolate(key_map, size=self.hw, mode="nearest")
        h = F.relu(self.conv1(torch.cat([x, key_map], dim=1)))
        h = F.relu(self.conv2(h))
        residual = eps * torch.tanh(self.conv3(h))
        return torch.clamp(x + residual, 0.0, 1.0)


class KeyProbe(nn.Module):
    """Recovers the embedded bit string from an encoded image; discarded after use."""

    def __init__(self, channels: int, hw: Tuple[int, int], key_dim: int, width: int = 32):
        super().__init__()
        h, w = hw
        self.conv1 = nn.Conv2d(channels, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, 2 * width, 3, padding=1)
        self.fc = nn.Linear(2 * width * (h // 4) * (w // 4), key_dim)

    def forward(self, x):
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        return self.fc(x.flatten(1))


def _encoder_skeleton(channels: int, key_dim: int, hw: Tuple[int, int],
                      width: int) -> ResidualEncoder:
    return ResidualEncoder(channels, key_dim, hw, width)


def _load_encoder(encoder: EncoderParams) -> ResidualEncoder:
    module = _encoder_skeleton(encoder.input_shape[0], encoder.d,
                               encoder.input_shape[1:], encoder.width)
    with torch.no_grad():
        for name, p in module.named_parameters():
            p.copy_(encoder.theta_e[name])
    module.eval()
    return module


def _random_bits(rng: np.random.Generator, n: int, d: int) -> torch.Tensor:
    return torch.from_numpy(rng.integers(0, 2, size=(n, d)).astype(np.float32))


def _bit_accuracy(probe: KeyProbe, encoded: torch.Tensor, bits: torch.Tensor) -> float:
    with torch.no_grad():
        pred = (probe(encoded) > 0).float()
    return float((pred == bits).float().mean())


def pretrain_encoder(corpus: torch.Tensor, d: int, epsilon_budget: float, seed: int,
                     steps: int = 3500, batch_size: int = 48, lr: float = 2e-3,
                     width: int = 16, target_acc: float = 0.995,
                     eval_every: int = 100) -> EncoderParams:
    """Train the encoder jointly with the probe until held-out bit accuracy
    reaches 99%+; raises ``encoder-underfit`` if the budget runs out first.

    Training anneals the residual budget from 3x down to the real budget over
    the first 800 steps; without the curriculum the joint system regularly
    fails to escape chance-level decoding on some seeds. Evaluation always
    uses the real budget.
    """
    if d < 1 or corpus.dim() != 4:
        raise ValueError("need d >= 1 and a (n, c, h, w) corpus")
    n = corpus.shape[0]
    channels, h, w = corpus.shape[1:]
    n_eval = min(max(8, n // 5), 128)
    eval_images, train_images = corpus[:n_eval], corpus[n_eval:]

    gen = torch_gen(seed, "encoder-init")
    torch.manual_seed(int(gen.initial_seed()) % (2 ** 31))
    encoder = _encoder_skeleton(channels, d, (h, w), width)
    probe = KeyProbe(channels, (h, w), d, width)
    opt = torch.optim.Adam(list(encoder.parameters()) + list(probe.parameters()), lr=lr)
    rng = np_rng(seed, "encoder-batches")

    # Two fresh keys per held-out image for the early-stop estimate; the final
    # contract check below uses the full 16-keys-per-image evaluation.
    quick_bits = _random_bits(np_rng(seed, "encoder-eval"), 2 * eval_images.shape[0], d)
    quick_imgs = eval_images.repeat_interleave(2, dim=0)

    anneal_start, anneal_end = 300, 800
    for step in range(1, steps + 1):
        if step < anneal_start:
            factor = 3.0
        else:
            factor = max(1.0, 3.0 - 2.0 * (step - anneal_start) / (anneal_end - anneal_start))
        idx = torch.from_numpy(rng.choice(train_images.shape[0],
                                          size=min(batch_size, train_images.shape[0]),
                                          replace=False))
        x = train_images[idx]
        bits = _random_bits(rng, x.shape[0], d)
        encoded = encoder(x, bits, epsilon_budget * factor)
        loss = F.binary_cross_entropy_with_logits(probe(encoded), bits)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step >= anneal_end and (step % eval_every == 0 or step == steps):
            encoder.eval(); probe.eval()
            with torch.no_grad():
                acc = _bit_accuracy(probe, encoder(quick_imgs, quick_bits, epsilon_budget),
                                    quick_bits)
            encoder.train(); probe.train()
            if acc >= target_acc:
                break

    encoder.eval(); probe.eval()
    final_bits = _random_bits(np_rng(seed, "encoder-eval-final"), 16 * eval_images.shape[0], d)
    with torch.no_grad():
        enc_eval = encoder(eval_images.repeat_interleave(16, dim=0), final_bits, epsilon_budget)
    best_acc = _bit_accuracy(probe, enc_eval, final_bits)

    if best_acc < 0.99:
        raise fail("encoder-underfit",
                   f"held-out probe bit accuracy {best_acc:.4f} < 0.99 after {steps} steps "
                   f"(epsilon_budget={epsilon_budget})")

    theta_e = OrderedDict((name, p.detach().clone()) for name, p in encoder.named_parameters())
    return EncoderParams(theta_e=theta_e, epsilon_budget=float(epsilon_budget), d=d,
                         input_shape=(channels, h, w), width=width, seed=seed,
                         probe_bit_accuracy=best_acc)


def encode_images(encoder: EncoderParams, images: torch.Tensor, bits: torch.Tensor) -> torch.Tensor:
    """Deterministic encoding of a batch under one or per-image keys."""
    module = _load_encoder(encoder)
    if bits.dim() == 1:
        bits = bits[None, :].expand(images.shape[0], -1)
    if bits.shape[1] != encoder.d:
        raise fail("key-encoder-mismatch",
                   f"encoder embeds {encoder.d}-bit keys, got {bits.shape[1]}")
    with torch.no_grad():
        return module(images, bits.float(), encoder.epsilon_budget)


def encode_trigger_set(pool: OoDPool, key: ClientKey, encoder: EncoderParams,
                       size: int, seed: int) -> TriggerSet:
    """Encode a seeded pool sample with the client key.

    The sampled base images depend only on (pool, size, seed), so trigger
    sets of different clients differ purely by their key-induced residuals.
    """
    if size > len(pool):
        raise fail("insufficient-data", f"trigger set of {size} from pool of {len(pool)}")
    if len(key.bits) != encoder.d:
        raise fail("key-encoder-mismatch",
                   f"key length {len(key.bits)} != encoder key dim {encoder.d}")
    rng = np_rng(seed, "trigger-sample")
    idx = torch.from_numpy(rng.choice(len(pool), size=size, replace=False))
    base = pool.images[idx]
    encoded = encode_images(encoder, base, key.as_tensor())
    return TriggerSet(client_id=key.client_id, images=encoded, source_tag=pool.source_tag,
                      seed=seed, target_bits=key.bits)


def badnet_patch(client_id: int, kind: str, channels: int, seed: int,
                 patch_size: int = 4) -> torch.Tensor:
    rng = np_rng(seed, "badnet-patch", kind, client_id)
    if kind == "zero-one":
        flat = np.ones(patch_size * patch_size, dtype=np.float32)
        zero_pos = rng.choice(patch_size * patch_size, size=5, replace=False)
        flat[zero_pos] = 0.0
        patch = np.broadcast_to(flat.reshape(patch_size, patch_size),
                                (channels, patch_size, patch_size)).copy()
    elif kind == "random-noise":
        patch = rng.random((channels, patch_size, patch_size)).astype(np.float32)
    else:
        raise ValueError(f"unknown badnet trigger kind {kind!r}")
    return torch.from_numpy(patch)


def badnet_trigger_set(pool: OoDPool, client_id: int, kind: str, num_classes: int,
                       seed: int, size: Optional[int] = None,
                       patch_size: int = 4) -> TriggerSet:
    """Client-specific corner patch on pool images; target is client_id mod C."""
    size = size or len(pool)
    if size > len(pool):
        raise fail("insufficient-data", f"trigger set of {size} from pool of {len(pool)}")
    c, h, w = pool.images.shape[1:]
    if patch_size > min(h, w):
        raise ValueError("patch does not fit in the image")
    rng = np_rng(seed, "trigger-sample")
    idx = torch.from_numpy(rng.choice(len(pool), size=size, replace=False))
    images = pool.images[idx].clone()
    patch = badnet_patch(client_id, kind, c, seed, patch_size)
    images[:, :, h - patch_size :, w - patch_size :] = patch
    return TriggerSet(client_id=client_id, images=images, source_tag=pool.source_tag,
                      seed=seed, target_class=client_id % num_classes)


def _images_sha256(images: torch.Tensor) -> str:
    arr = images.detach().contiguous().numpy()
    return hashlib.sha256(arr.astype("<f4", copy=False).tobytes()).hexdigest()


def save_trigger_set(directory, ts: TriggerSet) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arr = ts.images.detach().contiguous().numpy().astype("<f4", copy=False)
    arr.tofile(directory / "images.bin")
    meta = {
        "client_id": ts.client_id,
        "shape": list(ts.images.shape),
        "source_tag": ts.source_tag,
        "seed": ts.seed,
        "target_bits": list(ts.target_bits) if ts.target_bits is not None else None,
        "target_class": ts.target_class,
        "sha256": _images_sha256(ts.images),
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2))
    return directory


def load_trigger_set(directory) -> TriggerSet:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    raw = np.fromfile(directory / "images.bin", dtype="<f4")
    images = torch.from_numpy(raw.astype(np.float32, copy=True)).reshape(meta["shape"])
    ts = TriggerSet(
        client_id=meta["client_id"],
        images=images,
        source_tag=meta["source_tag"],
        seed=meta["seed"],
        target_bits=tuple(meta["target_bits"]) if meta["target_bits"] is not None else None,
        target_class=meta["target_class"],
    )
    if _images_sha256(ts.images) != meta["sha256"]:
        raise fail("cache-invalid", f"trigger archive {directory} failed its checksum")
    return ts


def save_encoder(directory, encoder: EncoderParams) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = []
    for name, t in encoder.theta_e.items():
        rel = f"{name}.bin"
        t.detach().contiguous().numpy().astype("<f4", copy=False).tofile(directory / rel)
        tensors.append({"path": rel, "shape": list(t.shape)})
    manifest = {
        "kind": "trigger-encoder",
        "epsilon_budget": encoder.epsilon_budget,
        "d": encoder.d,
        "input_shape": list(encoder.input_shape),
        "width": encoder.width,
        "seed": encoder.seed,
        "probe_bit_accuracy": encoder.probe_bit_accuracy,
        "tensors": tensors,
        "sha256": encoder.fingerprint(),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_encoder(directory) -> EncoderParams:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise fail("cache-invalid", f"no encoder manifest under {directory}")
    manifest = json.loads(manifest_path.read_text())
    theta = OrderedDict()
    for entry in manifest["tensors"]:
        path = directory / entry["path"]
        if not path.exists():
            raise fail("cache-invalid", f"missing encoder tensor {entry['path']}")
        raw = np.fromfile(path, dtype="<f4")
        theta[entry["path"][: -len(".bin")]] = (
            torch.from_numpy(raw.astype(np.float32, copy=True)).reshape(entry["shape"]))
    encoder = EncoderParams(
        theta_e=theta,
        epsilon_budget=manifest["epsilon_budget"],
        d=manifest["d"],
        input_shape=tuple(manifest["input_shape"]),
        width=manifest["width"],
        seed=manifest["seed"],
        probe_bit_accuracy=manifest["probe_bit_accuracy"],
    )
    if encoder.fingerprint() != manifest["sha256"]:
        raise fail("cache-invalid", f"encoder checkpoint {directory} failed its checksum")
    return encoder
