"""Calibration harness (not part of the package): runs the desk-scale
benchmark pipeline end to end and prints the acceptance-relevant numbers."""

import argparse
import time
from pathlib import Path

import numpy as np
import torch

torch.set_num_threads(2)

from duw.data import holdout_validation, make_glyph_batch, make_glyph_dataset, make_ood_pool, partition_by_class, Batch
from duw.federation import FederationState, InjectionPlan, RoundConfig, round_metrics, run_round
from duw.injection import InjectionConfig
from duw.keying import default_key_length, init_decoder, make_keys
from duw.models import ModelMeta, init_bundle
from duw.triggers import encode_trigger_set, load_encoder, pretrain_encoder, save_encoder
from duw.verification import batch_accuracy, client_mean_accuracy, track

CACHE = Path("/tmp/duw-calib")


def get_encoder(d=16, eps=8 / 255, seed=11):
    path = CACHE / f"encoder-d{d}"
    if (path / "manifest.json").exists():
        return load_encoder(path)
    corpus = make_glyph_batch(3000, seed=100, domain="invert").images
    enc = pretrain_encoder(corpus, d=d, epsilon_budget=eps, seed=seed)
    save_encoder(path, enc)
    return enc


def build(seed=0, K=10, d=16, trigger_size=50, samples_per_class=200):
    src = make_glyph_dataset(samples_per_class, 40, seed=seed, domain="plain")
    clients = partition_by_class(src, K=K, classes_per_client=3, seed=seed)
    val_parts = []
    for c in clients:
        c.train, val = holdout_validation(c.train, 0.1, seed=seed * 997 + c.client_id)
        val_parts.append(val)
    validation = Batch(torch.cat([v.images for v in val_parts]),
                       torch.cat([v.labels for v in val_parts]))
    enc = get_encoder(d=d)
    pool = make_ood_pool("held-out-domain", 500, (1, 28, 28), seed=seed + 1,
                         domain_data=make_glyph_batch(800, seed=seed + 2, domain="invert"),
                         domain_tag="invert", training_domains=("plain",))
    keys = make_keys(K, d)
    decoder = init_decoder(d, 64, seed=seed + 3)
    tsets = {k.client_id: encode_trigger_set(pool, k, enc, trigger_size, seed=seed + 4)
             for k in keys}
    meta = ModelMeta("small_cnn", (1, 28, 28), 10, 64, key_dim=None, width=16)
    theta0 = init_bundle(meta, seed=seed + 5)
    return src, clients, validation, decoder, tsets, theta0


def run(seed=0, rounds=30, start=5, tw=10, ilr=0.05, beta=0.1, inject=True,
        T=15, llr=0.01, trigger_size=50, verbose=True):
    src, clients, validation, decoder, tsets, theta0 = build(seed=seed, trigger_size=trigger_size)
    plan = InjectionPlan(kind="duw", trigger_sets=tsets, decoder=decoder,
                         cfg=InjectionConfig(steps=tw, lr=ilr, beta=beta))
    rc = RoundConfig(local_steps=T, local_lr=llr, injection_enabled=inject,
                     injection_start_round=start)
    state = FederationState(theta_g=theta0, clients=clients, seed=seed,
                            decoder_fingerprint=decoder.fingerprint())
    t0 = time.time()
    for r in range(rounds):
        state = run_round(state, rc, plan, validation)
        if verbose and (r % 5 == 0 or r == rounds - 1):
            m = round_metrics(state, plan if inject else None)
            print(f"  r{r:02d} val={m.get('val_acc', 0):.3f} acc={m['mean_acc']:.3f} "
                  f"wsr={m.get('mean_wsr', 0):.3f} tacc={m.get('tacc', 0):.3f} "
                  f"({time.time() - t0:.0f}s)")
    return state, plan, validation


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--tw", type=int, default=10)
    ap.add_argument("--ilr", type=float, default=0.05)
    ap.add_argument("--beta", type=float, default=0.1)
    ap.add_argument("--rounds", type=int, default=30)
    ap.add_argument("--start", type=int, default=5)
    ap.add_argument("--T", type=int, default=15)
    ap.add_argument("--llr", type=float, default=0.01)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--skip-baseline", action="store_true")
    args = ap.parse_args()

    print(f"DUW run: tw={args.tw} ilr={args.ilr} beta={args.beta} T={args.T}")
    state, plan, validation = run(seed=args.seed, rounds=args.rounds, start=args.start,
                                  tw=args.tw, ilr=args.ilr, beta=args.beta,
                                  T=args.T, llr=args.llr)
    sets = [plan.trigger_sets[k] for k in sorted(plan.trigger_sets)]
    own, gaps, preds, colls = [], [], [], 0
    for k in sorted(state.local_models):
        rep = track(state.local_models[k], sets, plan.decoder, sigma=0.5)
        own.append(rep.wsr_of(k))
        gaps.append(rep.wsr_gap)
        preds.append(rep.predicted_leaker == k)
        colls += int(rep.collision)
    print(f"final leaked models: WSR min={min(own):.4f} mean={np.mean(own):.4f} "
          f"gap min={min(gaps):.4f} tacc={np.mean(preds):.3f} collisions={colls}")
    best_acc = client_mean_accuracy(state.best_global, state.clients)
    print(f"best-model Acc (per-client tests) = {best_acc:.4f}, best val={state.best_val_acc:.4f}")

    if not args.skip_baseline:
        print("baseline (no injection):")
        bstate, _, _ = run(seed=args.seed, rounds=args.rounds, start=args.start,
                           inject=False, T=args.T, llr=args.llr, verbose=True)
        bacc = client_mean_accuracy(bstate.best_global, bstate.clients)
        print(f"baseline best Acc = {bacc:.4f}, delta = {bacc - best_acc:.4f}")


if __name__ == "__main__":
    main()
