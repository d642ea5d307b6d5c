import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from unaen.data import (
    MAGIC,
    MarfError,
    build_dataset,
    crop_patches,
    decode_marf,
    encode_marf,
    export_png,
    filter_empty,
    load_dataset,
    normalize,
    patch_coordinates,
    read_marf,
    split_counts,
    write_marf,
)
from unaen.kspace import MotionSpec, PhantomSpec, render_phantom


@settings(max_examples=40, deadline=None)
@given(
    arrays(
        np.float32,
        st.tuples(st.integers(1, 9), st.integers(1, 9)),
        elements=st.floats(-1e6, 1e6, width=32),
    )
)
def test_marf_round_trip_bit_exact(arr):
    out = decode_marf(encode_marf(arr))
    assert out.dtype == np.float32 and out.shape == arr.shape
    assert out.tobytes() == arr.tobytes()


def test_marf_header_layout():
    buf = encode_marf(np.zeros((3, 5), dtype=np.float32))
    assert buf[:4] == MAGIC
    assert struct.unpack_from("<HBB", buf, 4) == (1, 0, 2)
    assert struct.unpack_from("<2I", buf, 8) == (3, 5)
    assert len(buf) == 16 + 15 * 4


def test_marf_file_round_trip(tmp_path):
    arr = np.random.default_rng(0).random((2, 7, 4)).astype(np.float32)
    write_marf(tmp_path / "a.marf", arr)
    assert np.array_equal(read_marf(tmp_path / "a.marf"), arr)
    assert not list(tmp_path.glob(".tmp-*"))


@pytest.mark.parametrize(
    "mutate,msg",
    [
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:4] + struct.pack("<H", 2) + b[6:], "version"),
        (lambda b: b[:6] + b"\x07" + b[7:], "dtype"),
        (lambda b: b[:-1], "payload"),
        (lambda b: b[:6], "truncated"),
        (lambda b: b[:7] + b"\x00" + b[8:], "rank"),
    ],
)
def test_marf_rejects_malformed(mutate, msg):
    buf = encode_marf(np.ones((2, 2), dtype=np.float32))
    with pytest.raises(MarfError, match=msg):
        decode_marf(mutate(buf))


def test_marf_refuses_nonfinite_and_empty():
    with pytest.raises(MarfError):
        encode_marf(np.array([1.0, np.nan]))
    with pytest.raises(MarfError):
        encode_marf(np.zeros((0, 3)))


def test_png_export(tmp_path):
    from PIL import Image

    export_png(tmp_path / "p.png", np.array([[0.0, 0.5], [1.0, 2.0]]))
    px = np.asarray(Image.open(tmp_path / "p.png"))
    assert px.tolist() == [[0, 128], [255, 255]]


def test_normalize():
    np.testing.assert_allclose(normalize(np.array([2.0, 4.0, 6.0])), [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(normalize(np.full((3, 3), 7.0)), 0.0)


def test_filter_empty():
    assert not filter_empty(np.zeros((4, 4)))
    assert filter_empty(np.full((4, 4), 0.5))


def test_grid_patches_drop_partial_edges():
    img = np.arange(300 * 260).reshape(300, 260)
    tiles = crop_patches(img, 128)
    assert len(tiles) == 4
    np.testing.assert_array_equal(tiles[3], img[128:256, 128:256])


def test_random_patches_seeded():
    a = patch_coordinates((100, 90), 32, "random", count=5, seed=3)
    assert a == patch_coordinates((100, 90), 32, "random", count=5, seed=3)
    assert all(0 <= r <= 68 and 0 <= c <= 58 for r, c in a)


def test_patch_too_large():
    with pytest.raises(ValueError, match="smaller"):
        patch_coordinates((64, 64), 128)


def test_split_counts():
    assert split_counts(200, (0.8, 0.1, 0.1)) == (160, 20, 20)
    with pytest.raises(ValueError):
        split_counts(5, (0.8, 0.1, 0.1))
    with pytest.raises(ValueError):
        split_counts(100, (0.5, 0.5, 0.5))


@pytest.fixture(scope="module")
def small_set():
    imgs = [render_phantom(PhantomSpec(size=32), seed=i) for i in range(20)]
    return imgs


def test_build_dataset_disjoint_split(small_set):
    ds = build_dataset(small_set, MotionSpec(ts_eg=3), patch=32, seed=1)
    a = ds.manifest["assignment"]
    groups = [set(v) for v in a.values()]
    assert sum(len(g) for g in groups) == 20 == len(set().union(*groups))
    assert ds.counts() == {"train_free": 8, "train_corrupt": 8, "val": 2, "test": 2}
    assert ds.train_free.dtype == np.float32 and ds.train_free.shape[1:] == (32, 32)
    assert not np.array_equal(ds.val_clean, ds.val_corrupt)


def test_build_dataset_deterministic(small_set):
    a = build_dataset(small_set, MotionSpec(), patch=32, seed=2)
    b = build_dataset(small_set, MotionSpec(), patch=32, seed=2)
    c = build_dataset(small_set, MotionSpec(), patch=32, seed=3)
    assert np.array_equal(a.train_corrupt, b.train_corrupt)
    assert a.manifest["assignment"] != c.manifest["assignment"]


def test_empty_patches_are_dropped():
    imgs = [render_phantom(PhantomSpec(size=32), seed=i) for i in range(10)]
    imgs[0] = np.zeros((32, 32))
    ds = build_dataset(imgs, MotionSpec(), patch=32, seed=0)
    total = sum(ds.counts().values())
    assert total == 9


def test_written_tree_round_trip(tmp_path, small_set):
    ds = build_dataset(small_set, MotionSpec(), tmp_path, patch=32, seed=4)
    assert (tmp_path / "manifest.json").exists()
    assert len(list((tmp_path / "val").glob("*.clean.marf"))) == 2
    back = load_dataset(tmp_path)
    for key in ("train_free", "train_corrupt", "val_clean", "val_corrupt", "test_clean", "test_corrupt"):
        assert np.array_equal(getattr(back, key), getattr(ds, key)), key


def test_load_detects_tampering(tmp_path, small_set):
    build_dataset(small_set, MotionSpec(), tmp_path, patch=32, seed=5)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    victim = tmp_path / manifest["files"][0]["path"]
    arr = read_marf(victim)
    arr[0, 0] += 1.0
    write_marf(victim, arr)
    with pytest.raises(MarfError, match="hash"):
        load_dataset(tmp_path)
