"""Ownership verification, leaker tracking, and reported metrics.

A suspect model is verified by replacing its classifier with the registry's
frozen decoder and measuring, per client, the fraction of that client's
trigger images decoded to the client's key index (WSR). The client with the
highest WSR is the predicted leaker; more than one client above the
ownership threshold is a collision.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import torch

from .data import Batch, ClientDataset
from .errors import fail
from .keying import DecoderParams
from .models import CLASSIFIER, DECODER, ModelBundle, attach_decoder, forward
from .triggers import TriggerSet

DEFAULT_SIGMA = 0.5


@dataclass
class VerificationReport:
    wsr_vector: List[float]
    client_ids: List[int]
    predicted_leaker: int
    wsr_gap: float
    over_threshold: List[int]
    collision: bool
    ownership_established: bool
    sigma: float
    suspect_label: Optional[str] = None

    def wsr_of(self, client_id: int) -> float:
        return self.wsr_vector[self.client_ids.index(client_id)]


def wsr(suspect: ModelBundle, trigger_set: TriggerSet,
        decoder: Optional[DecoderParams] = None) -> float:
    """Fraction of trigger images mapped to the trigger set's target.

    Key-targeted sets are evaluated under the decoder head; classifier-space
    sets (the patch baselines) under the suspect's own classifier.
    """
    if trigger_set.target_bits is not None:
        if decoder is None:
            raise fail("decoder-not-attached", "key-targeted verification needs the decoder")
        if decoder.latent_dim != suspect.meta.latent_dim:
            raise fail("architecture-mismatch",
                       f"decoder latent dim {decoder.latent_dim} != suspect {suspect.meta.latent_dim}")
        bundle = attach_decoder(suspect, decoder.as_params(), decoder.key_dim)
        logits = forward(bundle, trigger_set.images, head=DECODER)
        target = trigger_set.key_index
    else:
        logits = forward(suspect, trigger_set.images, head=CLASSIFIER)
        target = trigger_set.target_class
    return float((logits.argmax(dim=1) == target).float().mean())


def track(suspect: ModelBundle, trigger_sets: Sequence[TriggerSet],
          decoder: Optional[DecoderParams] = None, sigma: float = DEFAULT_SIGMA,
          suspect_label: Optional[str] = None) -> VerificationReport:
    """Evaluate every client's trigger set; argmax WSR names the leaker."""
    if not trigger_sets:
        raise ValueError("need at least one trigger set")
    ids = [ts.client_id for ts in trigger_sets]
    values = [wsr(suspect, ts, decoder) for ts in trigger_sets]
    best = max(range(len(values)), key=lambda i: (values[i], -ids[i]))
    ranked = sorted(values, reverse=True)
    gap = ranked[0] - ranked[1] if len(ranked) > 1 else ranked[0]
    over = [ids[i] for i, v in enumerate(values) if v > sigma]
    return VerificationReport(
        wsr_vector=values,
        client_ids=ids,
        predicted_leaker=ids[best],
        wsr_gap=gap,
        over_threshold=over,
        collision=len(over) > 1,
        ownership_established=len(over) >= 1,
        sigma=sigma,
        suspect_label=suspect_label,
    )


def tacc(reports: Sequence[VerificationReport], ground_truth: Sequence[int]) -> float:
    if len(reports) != len(ground_truth):
        raise ValueError(f"{len(reports)} reports vs {len(ground_truth)} ground-truth ids")
    if not reports:
        return 0.0
    hits = sum(1 for r, g in zip(reports, ground_truth) if r.predicted_leaker == g)
    return hits / len(reports)


def batch_accuracy(model: ModelBundle, batch: Batch, chunk: int = 512) -> float:
    if len(batch) == 0:
        return 0.0
    correct = 0
    for lo in range(0, len(batch), chunk):
        logits = forward(model, batch.images[lo : lo + chunk], head=CLASSIFIER)
        correct += int((logits.argmax(dim=1) == batch.labels[lo : lo + chunk]).sum())
    return correct / len(batch)


def client_mean_accuracy(model: ModelBundle, clients: Sequence[ClientDataset]) -> float:
    """Mean over clients of accuracy on each client's own-class test set."""
    return sum(batch_accuracy(model, c.test) for c in clients) / len(clients)


@dataclass
class AccuracyReport:
    acc: float
    baseline_acc: float
    delta_acc: float
    per_client: Dict[int, float] = field(default_factory=dict)


def accuracy_metrics(model: ModelBundle, clients: Sequence[ClientDataset],
                     baseline_acc: Optional[float]) -> AccuracyReport:
    """Acc over per-client test sets plus degradation vs the paired clean run."""
    if baseline_acc is None:
        raise fail("no-baseline", "record the paired no-injection run's accuracy first")
    per_client = {c.client_id: batch_accuracy(model, c.test) for c in clients}
    acc = sum(per_client.values()) / len(per_client)
    return AccuracyReport(acc=acc, baseline_acc=baseline_acc,
                          delta_acc=baseline_acc - acc, per_client=per_client)
