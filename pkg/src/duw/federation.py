"""FedAvg round loop with server-side watermarking hooks.

Each round: sample the active set, copy the global model per client, apply
the configured injection to the copy (the "delivered" model), run local
training on the client's data, and average the results back into the global
model. Per-client RNG streams are derived from (seed, round, client), and
aggregation order is ascending client id, so results are independent of
scheduling.
"""

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .data import Batch, ClientDataset
from .errors import DuwError, fail
from .injection import InjectionConfig, inject_classifier_space, inject_duw, inject_unified
from .keying import DecoderParams
from .models import CLASSIFIER, ModelBundle, Runner, copy_bundle
from .params import check_finite, mean_params
from .seeding import np_rng
from .triggers import TriggerSet
from .verification import batch_accuracy, client_mean_accuracy, track, tacc


@dataclass
class RoundConfig:
    local_steps: int = 15        # T, mini-batch steps per client per round
    local_lr: float = 0.01       # alpha
    batch_size: int = 32
    active_fraction: float = 1.0
    injection_enabled: bool = False
    injection_start_round: int = 0


@dataclass
class InjectionPlan:
    """What the server injects into each broadcast copy."""

    kind: str                                   # "duw" | "classifier"
    trigger_sets: Dict[int, TriggerSet] = field(default_factory=dict)
    decoder: Optional[DecoderParams] = None
    cfg: InjectionConfig = field(default_factory=InjectionConfig)
    unified_trigger: Optional[TriggerSet] = None
    unified_target: int = 0
    unified_steps: int = 10
    unified_lr: float = 0.05
    update_head: bool = True                    # classifier-space baselines only


@dataclass
class FederationState:
    theta_g: ModelBundle
    clients: List[ClientDataset]
    seed: int
    round: int = 0
    delivered: Dict[int, ModelBundle] = field(default_factory=dict)
    local_models: Dict[int, ModelBundle] = field(default_factory=dict)
    history: List[dict] = field(default_factory=list)
    best_val_acc: float = -1.0
    best_global: Optional[ModelBundle] = None
    decoder_fingerprint: Optional[str] = None


def sample_active(K: int, active_fraction: float, round_index: int, seed: int) -> List[int]:
    """ceil(fraction*K) distinct ids, uniform, deterministic per (round, seed)."""
    if not 0 < active_fraction <= 1:
        raise ValueError("active_fraction must be in (0, 1]")
    count = int(np.ceil(active_fraction * K))
    rng = np_rng(seed, "active", round_index)
    return sorted(int(i) for i in rng.choice(K, size=count, replace=False))


def local_train(theta_k: ModelBundle, client: ClientDataset, T: int, lr: float,
                batch_size: int, rng: np.random.Generator) -> ModelBundle:
    """T mini-batch cross-entropy steps on (f, h); the decoder never ships."""
    if T < 0:
        raise ValueError("T must be >= 0")
    if theta_k.theta_d is not None:
        raise fail("decoder-not-attached",
                   "clients must never receive decoder parameters")
    runner = Runner(theta_k)
    n = len(client.train)
    for _ in range(T):
        idx = torch.from_numpy(rng.choice(n, size=min(batch_size, n), replace=False))
        images = client.train.images[idx]
        labels = client.train.labels[idx]
        loss, grads = runner.ce_grads(images, labels, CLASSIFIER, groups=("f", "h"),
                                      train_mode=True)
        if not torch.isfinite(loss):
            raise fail("numerical-divergence",
                       f"client {client.client_id} local training diverged")
        runner.apply_update(grads, lr)
    return runner.extract()


def aggregate(bundles: Sequence[ModelBundle]) -> ModelBundle:
    """Elementwise mean of parameters and batch-norm statistics."""
    if not bundles:
        raise fail("incompatible-parameters", "nothing to aggregate")
    out = dataclasses.replace(
        bundles[0],
        theta_f=mean_params([b.theta_f for b in bundles]),
        theta_h=mean_params([b.theta_h for b in bundles]),
        stats_f=mean_params([b.stats_f for b in bundles]),
        theta_d=None,
    )
    check_finite(out.theta_f, "aggregated theta_f")
    return out


def _inject_for_client(theta_g: ModelBundle, client_id: int, plan: InjectionPlan) -> ModelBundle:
    ts = plan.trigger_sets.get(client_id)
    if ts is None:
        raise fail("key-encoder-mismatch", f"no trigger set for client {client_id}")
    if plan.kind == "duw":
        return inject_duw(theta_g, ts, plan.decoder, plan.cfg)
    if plan.kind == "classifier":
        return inject_classifier_space(theta_g, ts.images, ts.target_class,
                                       steps=plan.cfg.steps, lr=plan.cfg.lr,
                                       update_head=plan.update_head)
    raise ValueError(f"unknown injection kind {plan.kind!r}")


def run_round(state: FederationState, round_cfg: RoundConfig,
              plan: Optional[InjectionPlan] = None,
              validation: Optional[Batch] = None) -> FederationState:
    """One communication round; returns a new state with round+1."""
    round_index = state.round
    K = len(state.clients)
    active = sample_active(K, round_cfg.active_fraction, round_index, state.seed)
    injecting = (round_cfg.injection_enabled and plan is not None
                 and round_index >= round_cfg.injection_start_round)

    t0 = time.time()
    theta_g = state.theta_g
    if injecting and plan.unified_trigger is not None:
        theta_g = inject_unified(theta_g, plan.unified_trigger, plan.unified_target,
                                 plan.unified_steps, plan.unified_lr)

    delivered: Dict[int, ModelBundle] = {}
    locals_: Dict[int, ModelBundle] = {}
    for k in active:
        client = state.clients[k]
        try:
            theta_k = copy_bundle(theta_g)
            if injecting:
                theta_k = _inject_for_client(theta_g, k, plan)
            delivered[k] = theta_k
            rng = np_rng(state.seed, "local", round_index, k)
            locals_[k] = local_train(theta_k, client, round_cfg.local_steps,
                                     round_cfg.local_lr, round_cfg.batch_size, rng)
        except DuwError as err:
            raise fail(err.code, f"round {round_index}, client {k}: {err.message}") from err

    new_global = aggregate([locals_[k] for k in sorted(locals_)])

    if state.decoder_fingerprint is not None and plan is not None and plan.decoder is not None:
        if plan.decoder.fingerprint() != state.decoder_fingerprint:
            raise fail("cache-invalid", "decoder parameters changed mid-run")

    record = {"round": round_index, "wall_clock": time.time() - t0,
              "injected": bool(injecting), "active": list(active)}
    new_state = dataclasses.replace(
        state, theta_g=new_global, round=round_index + 1,
        delivered=delivered, local_models=locals_,
        history=state.history + [record],
    )
    if validation is not None:
        val_acc = batch_accuracy(new_global, validation)
        record["val_acc"] = val_acc
        if val_acc > new_state.best_val_acc:
            new_state = dataclasses.replace(new_state, best_val_acc=val_acc,
                                            best_global=copy_bundle(new_global))
    return new_state


def round_metrics(state: FederationState, plan: Optional[InjectionPlan],
                  sigma: float = 0.5) -> dict:
    """Mean own-trigger WSR and TAcc over this round's post-training local models."""
    record = dict(state.history[-1])
    record["mean_acc"] = client_mean_accuracy(state.theta_g, state.clients)
    if plan is not None and state.local_models:
        sets = [plan.trigger_sets[k] for k in sorted(plan.trigger_sets)]
        reports, own = [], []
        for k in sorted(state.local_models):
            rep = track(state.local_models[k], sets, plan.decoder, sigma=sigma)
            reports.append(rep)
            own.append(rep.wsr_of(k))
        record["mean_wsr"] = sum(own) / len(own)
        record["tacc"] = tacc(reports, sorted(state.local_models))
    return record
