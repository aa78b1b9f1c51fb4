import numpy as np
import pytest
import torch

from duw.data import jigsaw_expand, make_glyph_batch, make_ood_pool
from duw.errors import DuwError


def test_random_noise_pool_range_and_size():
    pool = make_ood_pool("random-noise", 500, (1, 28, 28), seed=0)
    assert pool.images.shape == (500, 1, 28, 28)
    assert float(pool.images.min()) >= 0.0
    assert float(pool.images.max()) <= 1.0
    assert pool.source_tag == "random-noise"


def test_singleton_pool():
    pool = make_ood_pool("random-noise", 1, (1, 8, 8), seed=1)
    assert len(pool) == 1


def test_jigsaw_tile_determines_image():
    pool = make_ood_pool("jigsaw", 20, (1, 28, 28), seed=2)
    for i in range(20):
        img = pool.images[i].numpy()
        tile = img[:, :4, :4]
        rebuilt = jigsaw_expand(tile, (28, 28))
        assert np.array_equal(rebuilt, img)


def test_jigsaw_deterministic():
    a = make_ood_pool("jigsaw", 5, (1, 28, 28), seed=3)
    b = make_ood_pool("jigsaw", 5, (1, 28, 28), seed=3)
    assert torch.equal(a.images, b.images)


def test_held_out_domain_pool():
    domain = make_glyph_batch(600, seed=4, domain="invert")
    pool = make_ood_pool("held-out-domain", 500, (1, 28, 28), seed=5,
                         domain_data=domain, domain_tag="invert",
                         training_domains=("plain", "stripes"))
    assert len(pool) == 500
    assert pool.source_tag == "invert"


def test_held_out_domain_leakage_detected():
    domain = make_glyph_batch(100, seed=6, domain="plain")
    with pytest.raises(DuwError) as err:
        make_ood_pool("held-out-domain", 50, (1, 28, 28), seed=7,
                      domain_data=domain, domain_tag="plain",
                      training_domains=("plain", "stripes"))
    assert err.value.code == "ood-leakage"


def test_held_out_domain_too_small():
    domain = make_glyph_batch(10, seed=8, domain="invert")
    with pytest.raises(DuwError) as err:
        make_ood_pool("held-out-domain", 50, (1, 28, 28), seed=9,
                      domain_data=domain, domain_tag="invert")
    assert err.value.code == "insufficient-data"
