import logging

import numpy as np
import pytest
from PIL import Image

from sscpgan.data import (BatchSampler, DataError, DatasetSpec, load_dataset, load_folder_pairs,
                          load_image, next_batch, synth_sample)
from sscpgan.networks import ConfigError


def test_synth_sample_deterministic():
    a, b = synth_sample(4, 17, 48), synth_sample(4, 17, 48)
    np.testing.assert_array_equal(a.fg, b.fg)
    np.testing.assert_array_equal(a.bg, b.bg)
    np.testing.assert_array_equal(a.gt_mask, b.gt_mask)
    assert not np.array_equal(a.fg, synth_sample(4, 18, 48).fg)


def test_synth_coverage_and_ranges():
    for i in range(1000):
        s = synth_sample(11, i, 32)
        frac = s.gt_mask.mean()
        assert 0.10 <= frac <= 0.40, (i, frac)
        assert set(np.unique(s.gt_mask)) <= {0.0, 1.0}
        assert s.fg.shape == s.bg.shape == (3, 32, 32)
        assert 0 <= s.fg.min() and s.fg.max() <= 1 and 0 <= s.bg.min() and s.bg.max() <= 1


def test_synth_colour_separation():
    for i in range(200):
        s = synth_sample(11, i, 48)
        inside = s.gt_mask.astype(bool)
        d = np.linalg.norm(s.fg[:, inside].mean(axis=1) - s.fg[:, ~inside].mean(axis=1))
        assert d >= 0.2, (i, d)


def test_dataset_spec_parsing():
    spec = DatasetSpec.parse("synthetic://11/2000", 48)
    assert (spec.kind, spec.seed, spec.size, spec.resolution) == ("synthetic", 11, 2000, 48)
    assert DatasetSpec.parse("/data/birds").kind == "folders"
    with pytest.raises(ConfigError):
        DatasetSpec.parse("synthetic://x/2")
    with pytest.raises(ConfigError):
        DatasetSpec("synthetic", resolution=50).validate()


def _write(path, arr):
    Image.fromarray(arr).save(path)


def test_folder_loading(tmp_path, caplog):
    rng = np.random.default_rng(0)
    for sub in ("foreground", "background", "masks"):
        (tmp_path / sub).mkdir()
    for i in range(10):
        _write(tmp_path / "foreground" / f"f{i:02d}.png", rng.integers(0, 256, (40, 50, 3), np.uint8))
        _write(tmp_path / "masks" / f"f{i:02d}.png", (rng.random((40, 50)) > 0.5).astype(np.uint8) * 255)
    (tmp_path / "foreground" / "f05_broken.png").write_bytes(b"not an image")
    for i in range(3):
        _write(tmp_path / "background" / f"b{i}.jpg", rng.integers(0, 256, (64, 64, 3), np.uint8))
    with caplog.at_level(logging.WARNING):
        ds = load_folder_pairs(DatasetSpec("folders", str(tmp_path), 32))
    assert len(ds) == 10 and len(ds.bg) == 3
    assert sum("undecodable" in r.message for r in caplog.records) == 1
    assert ds.names == sorted(ds.names) and ds.names[0] == "f00.png"
    assert ds.fg.shape == (10, 3, 32, 32) and ds.masks.shape == (10, 1, 32, 32)
    assert set(np.unique(ds.masks)) <= {0.0, 1.0}


def test_folder_errors(tmp_path):
    with pytest.raises(DataError):
        load_folder_pairs(DatasetSpec("folders", str(tmp_path), 32))
    (tmp_path / "foreground").mkdir()
    (tmp_path / "background").mkdir()
    (tmp_path / "foreground" / "x.png").write_bytes(b"junk")
    with pytest.raises(DataError):
        load_folder_pairs(DatasetSpec("folders", str(tmp_path), 32))


def test_center_crop_then_resize(tmp_path):
    arr = np.zeros((60, 100, 3), np.uint8)
    arr[:, 20:80] = 255      # exactly the central 60 columns are white
    _write(tmp_path / "wide.png", arr)
    out = load_image(tmp_path / "wide.png", 64)
    assert out.shape == (3, 64, 64)
    np.testing.assert_allclose(out, 1.0)
    arr[:, 20] = 0           # the left crop edge now shows up as a dark first column
    _write(tmp_path / "wide.png", arr)
    out = load_image(tmp_path / "wide.png", 64)
    assert out[:, :, 0].max() < 0.5 and out[:, :, -1].min() == 1.0


def test_sampler_epoch_is_permutation():
    s = BatchSampler(50, 7, np.random.default_rng(0))
    fi, bi = s.next_indices(50)
    assert sorted(fi.tolist()) == list(range(50))
    seen = np.concatenate([s.next_indices(16)[0] for _ in range(25)])
    for e in range(8):
        assert sorted(seen[e * 50:(e + 1) * 50].tolist()) == list(range(50))


def test_sampler_state_round_trip():
    a = BatchSampler(30, 5, np.random.default_rng(3))
    a.next_indices(7)
    b = BatchSampler(30, 5, np.random.default_rng(99))
    b.load_state(a.state())
    for _ in range(10):
        x, y = a.next_indices(4), b.next_indices(4)
        np.testing.assert_array_equal(x[0], y[0])
        np.testing.assert_array_equal(x[1], y[1])


def test_background_uniformity():
    m = 20
    s = BatchSampler(100, m, np.random.default_rng(1))
    counts = np.bincount(np.concatenate([s.next_indices(100)[1] for _ in range(100)]), minlength=m)
    n, p = counts.sum(), 1 / m
    assert n == 10_000
    assert np.all(np.abs(counts - n * p) <= 3 * np.sqrt(n * p * (1 - p)))


def test_next_batch_shapes():
    ds = load_dataset(DatasetSpec("synthetic", None, 32, 12, 2))
    fg, bg, masks, idx = next_batch(ds, 5, BatchSampler(len(ds), len(ds.bg), np.random.default_rng(0)))
    assert fg.shape == bg.shape == (5, 3, 32, 32) and masks.shape == (5, 1, 32, 32)
    np.testing.assert_array_equal(fg, ds.fg[idx])
