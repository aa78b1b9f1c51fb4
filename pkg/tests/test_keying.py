import numpy as np
import pytest
import torch

from duw.errors import DuwError
from duw.keying import (
    default_key_length,
    gram_offdiag_max,
    init_decoder,
    make_keys,
)


def test_make_keys_one_hot_layout():
    keys = make_keys(3, 4)
    assert [k.bits for k in keys] == [(1, 0, 0, 0), (0, 1, 0, 0), (0, 0, 1, 0)]
    assert [k.hot_index for k in keys] == [0, 1, 2]


def test_make_keys_degenerate():
    assert make_keys(1, 1)[0].bits == (1,)


def test_keys_pairwise_orthogonal():
    keys = make_keys(8, 16)
    for i, a in enumerate(keys):
        for b in keys[i + 1 :]:
            assert sum(x * y for x, y in zip(a.bits, b.bits)) == 0


def test_keyspace_too_small():
    with pytest.raises(DuwError) as err:
        make_keys(5, 4)
    assert err.value.code == "keyspace-too-small"


def test_default_key_length_power_of_two():
    assert default_key_length(1) == 1
    assert default_key_length(10) == 16
    assert default_key_length(16) == 16
    assert default_key_length(17) == 32


def test_decoder_identity_case():
    dec = init_decoder(2, 2, seed=0)
    gram = dec.weight @ dec.weight.T
    assert torch.allclose(gram, torch.eye(2), atol=1e-6)


def test_decoder_gram_offdiagonals_below_tolerance():
    dec = init_decoder(16, 64, seed=9)
    assert gram_offdiag_max(dec) < 1e-5
    norms = dec.weight.norm(dim=1)
    assert torch.allclose(norms, torch.ones(16), atol=1e-6)
    assert torch.equal(dec.bias, torch.zeros(16))


def test_decoder_deterministic_per_seed():
    a = init_decoder(8, 32, seed=4)
    b = init_decoder(8, 32, seed=4)
    c = init_decoder(8, 32, seed=5)
    assert torch.equal(a.weight, b.weight)
    assert not torch.equal(a.weight, c.weight)
    assert a.fingerprint() == b.fingerprint()


def test_decoder_rank_deficient():
    with pytest.raises(DuwError) as err:
        init_decoder(65, 64, seed=1)
    assert err.value.code == "rank-deficient-decoder"


def test_latent_along_row_decodes_to_that_row():
    dec = init_decoder(6, 24, seed=2)
    for k in range(6):
        z = dec.weight[k] * 3.0
        logits = dec.weight @ z + dec.bias
        assert int(torch.argmax(logits)) == k


def test_frozen_flag_set():
    assert init_decoder(4, 8, seed=0).frozen
