import json

import pytest
import torch

from duw.checkpoint import load_bundle, save_bundle
from duw.errors import DuwError
from duw.keying import init_decoder
from duw.models import ModelMeta, attach_decoder, init_bundle
from duw.params import checksum


def _bundle(key_dim=8):
    meta = ModelMeta(arch="small_cnn", input_shape=(1, 28, 28), num_classes=10,
                     latent_dim=32, key_dim=key_dim, width=4)
    return init_bundle(meta, seed=21)


def test_round_trip_is_bit_exact(tmp_path):
    bundle = _bundle()
    save_bundle(tmp_path / "ckpt", bundle, seed_lineage={"init": 21})
    loaded = load_bundle(tmp_path / "ckpt")
    assert loaded.meta == bundle.meta
    for group in ("theta_f", "theta_h", "stats_f", "theta_d"):
        assert checksum(getattr(loaded, group)) == checksum(getattr(bundle, group))
        assert list(getattr(loaded, group).keys()) == list(getattr(bundle, group).keys())


def test_round_trip_without_decoder(tmp_path):
    bundle = _bundle(key_dim=None)
    save_bundle(tmp_path / "ckpt", bundle)
    loaded = load_bundle(tmp_path / "ckpt")
    assert loaded.theta_d is None


def test_decoder_attachment_round_trips(tmp_path):
    bundle = _bundle(key_dim=None)
    dec = init_decoder(8, 32, seed=3)
    save_bundle(tmp_path / "ckpt", attach_decoder(bundle, dec.as_params(), 8))
    loaded = load_bundle(tmp_path / "ckpt")
    assert torch.equal(loaded.theta_d["decoder.weight"], dec.weight)


def test_missing_tensor_file_fails_loud(tmp_path):
    save_bundle(tmp_path / "ckpt", _bundle())
    (tmp_path / "ckpt" / "h" / "classifier.weight.bin").unlink()
    with pytest.raises(DuwError) as err:
        load_bundle(tmp_path / "ckpt")
    assert err.value.code == "cache-invalid"


def test_truncated_tensor_file_fails_loud(tmp_path):
    save_bundle(tmp_path / "ckpt", _bundle())
    target = tmp_path / "ckpt" / "h" / "classifier.bias.bin"
    target.write_bytes(target.read_bytes()[:-4])
    with pytest.raises(DuwError) as err:
        load_bundle(tmp_path / "ckpt")
    assert err.value.code == "cache-invalid"


def test_manifest_records_layout(tmp_path):
    save_bundle(tmp_path / "ckpt", _bundle(), seed_lineage={"init": 21})
    manifest = json.loads((tmp_path / "ckpt" / "manifest.json").read_text())
    assert manifest["byte_order"] == "little"
    assert manifest["seed_lineage"] == {"init": 21}
    assert all(entry["dtype"] == "float32" for entry in manifest["tensors"])
