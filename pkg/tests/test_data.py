import csv
import math
import struct

import numpy as np
import pytest

from illidvae.data import IdxFormatError, generate_toy, load_idx, load_idx_pair, write_idx


def test_toy_hard_regime():
    ds = generate_toy(7.5, 1000, seed=0)
    assert ds.sigma == 7.5 and ds.xs.shape == (2000, 2)
    assert np.bincount(ds.labels).tolist() == [1000, 1000]


def test_toy_class_means_within_clt_band():
    sigma, n = 2.0, 5000
    ds = generate_toy(sigma, n, seed=1)
    for k, true in enumerate([(0.0, 0.0), (10.0, 10.0)]):
        mean = ds.xs[ds.labels == k].mean(axis=0)
        assert np.all(np.abs(mean - true) < 4 * sigma / math.sqrt(n))


def test_toy_deterministic_and_seed_sensitive():
    a, b, c = generate_toy(1.0, 100, 3), generate_toy(1.0, 100, 3), generate_toy(1.0, 100, 4)
    assert np.array_equal(a.xs, b.xs) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.xs, c.xs)


def test_toy_split_disjoint_cover_and_balanced():
    ds = generate_toy(1.0, 1001, 0)
    tr, te = set(ds.train_idx.tolist()), set(ds.test_idx.tolist())
    assert not tr & te and len(tr | te) == len(ds.xs)
    for idx in (ds.train_idx, ds.test_idx):
        counts = np.bincount(ds.labels[idx], minlength=2)
        assert abs(counts[0] - counts[1]) <= 1
    assert len(ds.test_idx) == pytest.approx(0.1 * len(ds.xs), abs=2)


def test_toy_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        generate_toy(0.0)


def test_toy_csv_export(tmp_path):
    ds = generate_toy(1.0, 5, 0)
    with open(ds.to_csv(tmp_path / "toy.csv")) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x1", "x2", "label"] and len(rows) == 11
    assert float(rows[1][0]) == ds.xs[0, 0]


def test_single_white_pixel(tmp_path):
    path = tmp_path / "img.idx"
    path.write_bytes(struct.pack(">IIII", 0x803, 1, 1, 1) + bytes([255]))
    assert load_idx(path).tolist() == [[1.0]]


def test_label_magic_checked(tmp_path):
    path = write_idx(tmp_path / "img.idx", np.zeros((2, 2, 2)), "images")
    with pytest.raises(IdxFormatError, match="magic"):
        load_idx(path, "labels")


def test_truncated_payload_reports_offset(tmp_path):
    path = tmp_path / "short.idx"
    path.write_bytes(struct.pack(">IIII", 0x803, 2, 2, 2) + bytes(5))
    with pytest.raises(IdxFormatError) as info:
        load_idx(path)
    assert info.value.offset == 16 + 5


def test_truncated_header(tmp_path):
    path = tmp_path / "hdr.idx"
    path.write_bytes(struct.pack(">II", 0x803, 2))
    with pytest.raises(IdxFormatError):
        load_idx(path)


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (4, 3, 5), dtype=np.uint8)
    labels = rng.integers(0, 10, 4, dtype=np.uint8)
    ip, lp = write_idx(tmp_path / "i.idx", imgs), write_idx(tmp_path / "l.idx", labels, "labels")
    x, y = load_idx_pair(ip, lp)
    assert np.array_equal(np.round(x * 255).astype(np.uint8), imgs.reshape(4, -1))
    assert np.array_equal(x, imgs.reshape(4, -1) / 255.0)
    assert np.array_equal(y, labels)


def test_pair_length_mismatch(tmp_path):
    ip = write_idx(tmp_path / "i.idx", np.zeros((3, 2, 2)))
    lp = write_idx(tmp_path / "l.idx", np.zeros(2), "labels")
    with pytest.raises(ValueError):
        load_idx_pair(ip, lp)
