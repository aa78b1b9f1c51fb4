import numpy as np
import pytest
import torch

from duw.data import (
    Batch,
    holdout_validation,
    make_glyph_batch,
    make_glyph_dataset,
    multi_domain_assign,
    partition_by_class,
    partition_dirichlet,
)
from duw.errors import DuwError


def _source(n_per_class=30, seed=5, domain="plain"):
    return make_glyph_dataset(n_per_class, 10, seed=seed, domain=domain)


def _sample_ids(batch: Batch) -> set:
    # A sample's identity is its full pixel content plus label.
    return {hash((batch.labels[i].item(), batch.images[i].numpy().tobytes()))
            for i in range(len(batch))}


def test_by_class_degenerate_single_client():
    src = _source()
    clients = partition_by_class(src, K=1, classes_per_client=10, seed=0)
    assert len(clients) == 1
    assert len(clients[0].train) == len(src.train)
    assert clients[0].classes == tuple(range(10))


def test_by_class_label_subsets():
    src = _source()
    clients = partition_by_class(src, K=10, classes_per_client=3, seed=1)
    for c in clients:
        labels = set(c.train.labels.tolist())
        assert labels <= set(c.classes)
        assert len(c.classes) == 3
        assert set(c.test.labels.tolist()) <= set(c.classes)


def test_by_class_conserves_samples():
    src = _source()
    clients = partition_by_class(src, K=7, classes_per_client=4, seed=2)
    assert sum(len(c.train) for c in clients) == len(src.train)
    union = set()
    for c in clients:
        ids = set(c.train_indices.tolist())
        assert not (union & ids)
        union |= ids
    assert union == set(range(len(src.train)))


def test_by_class_deterministic_per_seed():
    src = _source()
    a = partition_by_class(src, K=10, classes_per_client=3, seed=3)
    b = partition_by_class(src, K=10, classes_per_client=3, seed=3)
    c = partition_by_class(src, K=10, classes_per_client=3, seed=4)
    assert [x.classes for x in a] == [x.classes for x in b]
    assert all(np.array_equal(x.train_indices, y.train_indices) for x, y in zip(a, b))
    assert [x.classes for x in a] != [x.classes for x in c]


def test_by_class_insufficient_data():
    src = _source(n_per_class=1)
    with pytest.raises(DuwError) as err:
        partition_by_class(src, K=500, classes_per_client=3, seed=0)
    assert err.value.code == "insufficient-data"


def test_dirichlet_single_client_gets_everything():
    src = _source()
    clients = partition_dirichlet(src, K=1, alpha=0.5, seed=0)
    assert len(clients[0].train) == len(src.train)


def test_dirichlet_conserves_and_no_empty():
    src = _source()
    clients = partition_dirichlet(src, K=12, alpha=0.3, seed=1)
    assert sum(len(c.train) for c in clients) == len(src.train)
    assert all(len(c.train) > 0 for c in clients)
    union = np.concatenate([c.train_indices for c in clients])
    assert len(np.unique(union)) == len(src.train)


def test_dirichlet_large_alpha_near_uniform():
    src = _source(n_per_class=200)
    clients = partition_dirichlet(src, K=2, alpha=1e6, seed=2)
    for c in clients:
        counts = np.bincount(c.train.labels.numpy(), minlength=10)
        # Law of large numbers: each class splits near 50/50.
        assert np.all(np.abs(counts - 100) <= 20)


def test_multi_domain_assign_counts_and_tags():
    domains = {d: _source(12, seed=i, domain=d) for i, d in enumerate(["plain", "stripes", "bright", "thick"])}
    clients = multi_domain_assign(domains, clients_per_domain=10, seed=0)
    assert len(clients) == 40
    for c in clients:
        assert c.domain_tag in domains
        assert len(c.train) > 0
    tags = [c.domain_tag for c in clients]
    assert tags == sorted(tags)  # canonical domain order, contiguous ids


def test_multi_domain_single_domain_rejected():
    with pytest.raises(ValueError):
        multi_domain_assign({"plain": _source(5)}, clients_per_domain=1, seed=0)


def test_holdout_sizes_and_disjointness():
    batch = make_glyph_batch(100, seed=3, labels=list(range(10)) * 10)
    train, val = holdout_validation(batch, 0.1, seed=0)
    assert len(val) == 10 and len(train) == 90
    assert not (_sample_ids(train) & _sample_ids(val))
    assert _sample_ids(train) | _sample_ids(val) == _sample_ids(batch)


def test_holdout_stratified_within_one():
    labels = [0] * 37 + [1] * 23 + [2] * 40
    batch = make_glyph_batch(100, seed=4, labels=labels)
    _, val = holdout_validation(batch, 0.2, seed=1)
    counts = np.bincount(val.labels.numpy(), minlength=3)
    for c, n_c in enumerate([37, 23, 40]):
        assert abs(counts[c] - 0.2 * n_c) <= 1


def test_holdout_rejects_bad_fraction():
    batch = make_glyph_batch(10, seed=0)
    with pytest.raises(ValueError):
        holdout_validation(batch, 1.5, seed=0)
