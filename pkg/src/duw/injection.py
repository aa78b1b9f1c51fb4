"""Server-side watermark injection.

``inject_duw`` optimises only the feature extractor so that the frozen
decoder maps encoded trigger images to the client's key index, with an L2
pull toward the pre-injection extractor to preserve task accuracy:

    J'(theta_f) = CE(decoder(f(x')), key_index) + (beta / 2) ||theta_f - theta_f_g||^2

The classifier head is plugged back unchanged before the model leaves the
server. ``inject_unified`` is the classifier-space variant used for the
global (client-agnostic) watermark of the hybrid scheme and for the
collision-prone patch-trigger baselines.
"""

from dataclasses import dataclass
from typing import List, Optional

import torch
import torch.nn.functional as F

from .errors import fail
from .keying import DecoderParams
from .models import (
    CLASSIFIER,
    DECODER,
    ModelBundle,
    Runner,
    attach_decoder,
    detach_decoder,
    swap_head,
)
from .params import param_distance
from .triggers import TriggerSet


@dataclass
class InjectionConfig:
    steps: int = 10          # T_w
    lr: float = 0.05         # injection step size (distinct from beta on purpose)
    beta: float = 0.1        # proximal weight anchoring theta_f at theta_f_g
    batch_size: int = 512    # trigger sets at or below this run full-batch
    bn_train_mode: bool = False  # keep running stats frozen while injecting


def duw_loss(runner: Runner, anchor, images, target_idx, beta: float,
             bn_train_mode: bool = False):
    """J' = cross-entropy under the decoder head + (beta/2) * squared distance."""
    logits = runner.logits(images, DECODER, train_mode=bn_train_mode)
    ce = F.cross_entropy(logits, target_idx)
    if beta == 0.0:
        return ce, ce
    sq = 0.0
    for name, p in runner.group_params(("f",)).items():
        diff = p - anchor[name]
        sq = sq + (diff * diff).sum()
    return ce + 0.5 * beta * sq, ce


def inject_duw(theta_g: ModelBundle, trigger_set: TriggerSet, decoder: DecoderParams,
               cfg: InjectionConfig, loss_log: Optional[List[float]] = None) -> ModelBundle:
    """Watermark one broadcast copy; returns theta_k with theta_h bit-identical."""
    if not decoder.frozen:
        raise fail("decoder-not-attached", "decoder must be frozen before injection")
    if trigger_set.target_bits is None:
        raise fail("key-encoder-mismatch", "trigger set carries no key target")
    if len(trigger_set.target_bits) != decoder.key_dim:
        raise fail("key-encoder-mismatch",
                   f"trigger key length {len(trigger_set.target_bits)} != decoder dim {decoder.key_dim}")

    target = trigger_set.key_index
    bundle = swap_head(attach_decoder(theta_g, decoder.as_params(), decoder.key_dim), DECODER)
    runner = Runner(bundle)
    anchor = {k: v.clone() for k, v in runner.group_params(("f",)).items()}
    images = trigger_set.images
    targets = torch.full((images.shape[0],), target, dtype=torch.long)

    n = images.shape[0]
    for step in range(cfg.steps):
        if n <= cfg.batch_size:
            batch, batch_t = images, targets
        else:
            lo = (step * cfg.batch_size) % n
            sel = torch.arange(lo, lo + cfg.batch_size) % n
            batch, batch_t = images[sel], targets[sel]
        loss, _ = duw_loss(runner, anchor, batch, batch_t, cfg.beta, cfg.bn_train_mode)
        if not torch.isfinite(loss):
            raise fail("injection-diverged", f"non-finite loss at injection step {step}")
        if loss_log is not None:
            loss_log.append(float(loss.detach()))
        named = runner.group_params(("f",))
        grads = torch.autograd.grad(loss, list(named.values()))
        runner.apply_update(dict(zip(named.keys(), grads)), cfg.lr)

    out = runner.extract()
    return detach_decoder(swap_head(out, CLASSIFIER))


def inject_classifier_space(theta: ModelBundle, images: torch.Tensor, target_class: int,
                            steps: int, lr: float, update_head: bool = True,
                            batch_size: int = 512) -> ModelBundle:
    """Fine-tune toward a fixed classifier-space label on trigger images.

    Used for the unified (global) watermark and for the patch-trigger
    baselines that skip the decoder entirely.
    """
    if target_class < 0 or target_class >= theta.meta.num_classes:
        raise ValueError(f"target class {target_class} outside label space")
    runner = Runner(theta)
    groups = ("f", "h") if update_head else ("f",)
    targets = torch.full((images.shape[0],), target_class, dtype=torch.long)
    n = images.shape[0]
    for step in range(steps):
        if n <= batch_size:
            batch, batch_t = images, targets
        else:
            lo = (step * batch_size) % n
            sel = torch.arange(lo, lo + batch_size) % n
            batch, batch_t = images[sel], targets[sel]
        loss, grads = runner.ce_grads(batch, batch_t, CLASSIFIER, groups=groups, train_mode=True)
        if not torch.isfinite(loss):
            raise fail("injection-diverged", f"non-finite loss at injection step {step}")
        runner.apply_update(grads, lr)
    return runner.extract()


def inject_unified(theta_g: ModelBundle, unified_trigger: TriggerSet, target_class: int,
                   steps: int, lr: float) -> ModelBundle:
    """Global classifier-space watermark applied before the per-client passes."""
    return inject_classifier_space(theta_g, unified_trigger.images, target_class,
                                   steps=steps, lr=lr, update_head=True)


def feature_shift(theta_a: ModelBundle, theta_b: ModelBundle) -> float:
    return param_distance(theta_a.theta_f, theta_b.theta_f)
