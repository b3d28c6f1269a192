import numpy as np
import pytest
import torch
from PIL import Image
from hypothesis import given, settings, strategies as st

from hvsr import seeding
from hvsr.data import (MIN_IMAGES, from_tensor, ingest_dataset, load_image, make_pair, save_image, split_indices,
                       toy_faces, write_toy_dataset)
from hvsr.degradation import DegradationOperator, downsample, rmse


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 300), frac=st.floats(0.0, 0.9), seed=st.integers(0, 1000))
def test_split_is_a_disjoint_cover(n, frac, seed):
    train, val = split_indices(n, frac, seed)
    assert not set(train) & set(val)
    assert sorted([*train, *val]) == list(range(n))
    a, b = split_indices(n, frac, seed)
    assert np.array_equal(a, train) and np.array_equal(b, val)


def test_split_sizes():
    train, val = split_indices(100, 0.1, 0)
    assert (len(train), len(val)) == (90, 10)
    train, val = split_indices(20, 0.0, 0)
    assert len(val) == 0 and len(train) == 20
    with pytest.raises(ValueError):
        split_indices(10, 1.0, 0)


def test_toy_faces_deterministic_and_in_range():
    a, b = toy_faces(5, seed=1), toy_faces(5, seed=1)
    assert torch.equal(a, b)
    assert a.shape == (5, 3, 32, 32) and a.dtype == torch.float32
    assert float(a.min()) >= 0 and float(a.max()) <= 1
    # 8-bit quantized
    torch.testing.assert_close(a * 255, torch.round(a * 255), rtol=0, atol=1e-4)
    assert not torch.equal(toy_faces(5, seed=2), a)
    # faces differ from each other
    assert float((a[0] - a[1]).abs().mean()) > 0.01


def test_write_toy_dataset(tmp_path):
    paths = write_toy_dataset(tmp_path / "a", 12, seed=4)
    assert len(paths) == 12 and len(list((tmp_path / "a").iterdir())) == 12
    again = write_toy_dataset(tmp_path / "b", 12, seed=4)
    assert [p.read_bytes() for p in paths] == [p.read_bytes() for p in again]
    with pytest.raises(ValueError):
        write_toy_dataset(tmp_path / "c", 0)


def test_png_round_trip_is_lossless(tmp_path):
    x = toy_faces(1, seed=0)[0]
    save_image(x, tmp_path / "x.png")
    assert torch.equal(load_image(tmp_path / "x.png", 3), x)


def test_ingest_crops_resizes_and_skips(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(MIN_IMAGES + 2):
        Image.fromarray(rng.integers(0, 255, (48, 64, 3), dtype=np.uint8)).save(tmp_path / f"im{i:02d}.png")
    (tmp_path / "broken.png").write_bytes(b"not an image")
    (tmp_path / "notes.txt").write_text("ignored")
    ds = ingest_dataset(tmp_path, (3, 16, 16), val_fraction=0.25, seed=1)
    assert ds.images.shape == (MIN_IMAGES + 2, 3, 16, 16)
    assert ds.skipped == 1
    assert len(ds.train_idx) + len(ds.val_idx) == len(ds)
    assert float(ds.images.max()) <= 1.0
    again = ingest_dataset(tmp_path, (3, 16, 16), val_fraction=0.25, seed=1)
    assert np.array_equal(again.val_idx, ds.val_idx)


def test_ingest_needs_enough_images(tmp_path):
    for i in range(MIN_IMAGES - 1):
        save_image(torch.rand(3, 8, 8), tmp_path / f"{i}.png")
    with pytest.raises(ValueError, match="at least"):
        ingest_dataset(tmp_path, (3, 8, 8))
    with pytest.raises(FileNotFoundError):
        ingest_dataset(tmp_path / "missing", (3, 8, 8))


def test_make_pair_exact():
    op = DegradationOperator(scale=4)
    x = toy_faces(2, seed=0)
    x2, y = make_pair(op, x)
    assert x2 is x and rmse(downsample(op, x), y) == 0.0
    assert torch.equal(make_pair(op, x)[1], y)
    _, yc = make_pair(op, torch.full((3, 32, 32), 0.25))
    assert torch.equal(yc, torch.full((3, 8, 8), 0.25))


def test_from_tensor_views():
    ds = from_tensor(torch.rand(20, 1, 4, 4), 0.2, 0)
    assert ds.train.shape[0] == 16 and ds.val.shape[0] == 4


def test_derived_seeds_are_distinct_and_stable():
    seeds = {seeding.derive_seed(0, i, j) for i in range(20) for j in range(20)}
    assert len(seeds) == 400
    assert seeding.derive_seed(3, 1, 2) == seeding.derive_seed(3, 1, 2)
    assert seeding.derive_seed(3, 1, 2) != seeding.derive_seed(4, 1, 2)
    assert all(0 <= s < 2**63 for s in seeds)


def test_standard_normal_per_row():
    rngs = seeding.generators(0, (5,), 3)
    a = seeding.standard_normal((3, 2), rngs)
    b = seeding.standard_normal((1, 2), [seeding.generators(0, (5,), 3)[2]])
    assert torch.equal(a[2:], b)
    with pytest.raises(ValueError):
        seeding.standard_normal((2, 2), rngs)
