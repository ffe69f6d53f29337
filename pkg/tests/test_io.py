import numpy as np
import pytest

from growflow import io
from growflow.io import (
    CHECKPOINT_MAGIC, DataError, decode_srgb_u8, encode_srgb_u8,
    linear_to_srgb, load_checkpoint, read_mask_png, read_png, srgb_to_linear,
    write_mask_png, write_png,
)


def test_srgb_transfer_round_trip():
    x = np.linspace(0.0, 1.0, 1001)
    assert np.abs(srgb_to_linear(linear_to_srgb(x)) - x).max() < 1e-12


def test_srgb_u8_round_trip_is_stable():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(8, 8, 3))
    u8 = encode_srgb_u8(img)
    # encoding the decoded image reproduces the same bytes
    assert np.array_equal(encode_srgb_u8(decode_srgb_u8(u8)), u8)


def test_png_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.uniform(size=(10, 12, 3))
    p = tmp_path / "img.png"
    write_png(p, img)
    back = read_png(p)
    assert np.array_equal(encode_srgb_u8(back.pixels), encode_srgb_u8(img))


def test_mask_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    mask = rng.uniform(size=(9, 7)) > 0.5
    p = tmp_path / "mask.png"
    write_mask_png(p, mask)
    assert np.array_equal(read_mask_png(p), mask)


def test_checkpoint_magic_is_validated(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOTACKPT" + b"\0" * 24)
    with pytest.raises(DataError):
        load_checkpoint(p)
    assert len(CHECKPOINT_MAGIC) == 16


def test_missing_checkpoint_is_data_error(tmp_path):
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_missing_dataset_is_data_error(tmp_path):
    with pytest.raises(DataError):
        io.load_dataset(tmp_path)
