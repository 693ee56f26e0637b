import json

import numpy as np
import pytest

from src.exceptions import DataError
from src.models.checkpoint import MAGIC, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint


def test_save_and_load_restores_snapshot_exactly(tiny_model, tmp_path):
    snapshot = tiny_model.snapshot()
    path = save_checkpoint(snapshot, tmp_path / "fold-0.nta", {"fold": 0, "epoch": 3})
    loaded, metadata = load_checkpoint(path)
    assert metadata == {"fold": 0, "epoch": 3}
    assert list(loaded.params) == list(snapshot.params)
    for name, node in snapshot.params.items():
        np.testing.assert_array_equal(loaded.params[name].value, node.value)
    assert loaded.vision_config == snapshot.vision_config
    assert loaded.text_config == snapshot.text_config


def test_reloaded_model_gives_identical_similarities(tiny_model, prompts, tmp_path):
    snapshot = tiny_model.snapshot()
    loaded, _ = load_checkpoint(save_checkpoint(snapshot, tmp_path / "m.nta"))
    images = np.random.default_rng(0).uniform(size=(3, 32, 32))
    np.testing.assert_array_equal(
        loaded.logits(images, prompts.prompts).value, snapshot.logits(images, prompts.prompts).value
    )


def test_archive_starts_with_magic_line(tiny_model):
    assert encode_checkpoint(tiny_model).startswith(MAGIC + b"\n")


def test_bad_magic_is_rejected(tiny_model):
    payload = encode_checkpoint(tiny_model)
    with pytest.raises(DataError):
        decode_checkpoint(b"NOT-AN-ARCHIVE" + payload[len(MAGIC):])


def test_truncated_and_padded_archives_are_rejected(tiny_model):
    payload = encode_checkpoint(tiny_model)
    with pytest.raises(DataError):
        decode_checkpoint(payload[:-4])
    with pytest.raises(DataError):
        decode_checkpoint(payload + b"\x00\x00\x00\x00")


def _with_preamble(payload: bytes, edit) -> bytes:
    magic_end = payload.find(b"\n")
    preamble_end = payload.find(b"\n", magic_end + 1)
    preamble = json.loads(payload[magic_end + 1:preamble_end])
    edited = edit(preamble)
    return payload[:magic_end + 1] + json.dumps(edited).encode("utf-8") + payload[preamble_end:]


@pytest.mark.parametrize("key", ["vision", "text", "tensors"])
def test_missing_preamble_section_is_a_data_error(tiny_model, key):
    payload = _with_preamble(encode_checkpoint(tiny_model), lambda p: {k: v for k, v in p.items() if k != key})
    with pytest.raises(DataError, match=f"missing {key}"):
        decode_checkpoint(payload)


@pytest.mark.parametrize(
    "edit",
    [
        lambda p: {**p, "vision": {**p["vision"], "embed_dim": -1}},
        lambda p: {**p, "text": "not a config"},
        lambda p: {**p, "tensors": [{"name": "x"}]},
        lambda p: [p],
    ],
)
def test_malformed_preamble_is_a_data_error(tiny_model, edit):
    with pytest.raises(DataError):
        decode_checkpoint(_with_preamble(encode_checkpoint(tiny_model), edit))


def test_preamble_that_is_not_utf8_is_a_data_error(tiny_model):
    payload = encode_checkpoint(tiny_model)
    magic_end = payload.find(b"\n")
    with pytest.raises(DataError):
        decode_checkpoint(payload[:magic_end + 1] + b"\x80" + payload[magic_end + 1:])
