import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccfkit.errors import DataError, FormatError
from ccfkit.featurestore import (
    FeatureBank, SyntheticSpec, class_centroids, companion_splits_path, generate_synthetic,
    load_bank, save_bank,
)


def tiny_bank():
    feats = np.array([[0.0, 0.0], [2.0, 2.0], [1.0, -1.0], [5.0, 4.0]])
    return FeatureBank(feats, [0, 0, 1, 2], ("base", "val", "novel"), ("cat", "dog", "émeu"))


@pytest.mark.parametrize("fmt,name", [("binary", "b.fbk"), ("csv", "b.csv")])
def test_round_trip(tmp_path, fmt, name):
    bank = generate_synthetic(SyntheticSpec(n_base_classes=4, n_val_classes=2, n_novel_classes=3,
                                            feature_dim=5, samples_per_class=7, seed=1))
    path = tmp_path / name
    save_bank(bank, path, fmt)
    again = load_bank(path, fmt)
    assert again == bank
    assert again.features.tobytes() == bank.features.tobytes()


def test_round_trip_keeps_names(tmp_path):
    for name in ("n.fbk", "n.csv"):
        save_bank(tiny_bank(), tmp_path / name)
        assert load_bank(tmp_path / name) == tiny_bank()


def test_binary_file_size(tmp_path):
    dim = 3
    bank = FeatureBank(np.ones((2, dim)) * 0.5, [0, 1], ("base", "novel"))
    save_bank(bank, tmp_path / "x.fbk")
    header = 4 + 4 + 4 + 4 + 8 + 2 * (1 + 2)  # fixed header + two nameless class records
    assert (tmp_path / "x.fbk").stat().st_size == header + 2 * (4 + 4 * dim)


def test_binary_layout_is_little_endian(tmp_path):
    save_bank(FeatureBank([[1.0]], [0], ("novel",), ("a",)), tmp_path / "x.fbk")
    raw = (tmp_path / "x.fbk").read_bytes()
    assert raw[:4] == b"FBK1"
    assert raw[4:8] == (1).to_bytes(4, "little")
    assert raw[8:12] == (1).to_bytes(4, "little")  # feature_dim
    assert raw[16:24] == (1).to_bytes(8, "little")  # n_samples
    assert raw[24:28] == b"\x02\x01\x00a"  # novel tag, name length 1, "a"
    assert raw[28:32] == (0).to_bytes(4, "little")
    assert np.frombuffer(raw[32:36], "<f4")[0] == 1.0


def test_wrong_magic(tmp_path):
    save_bank(tiny_bank(), tmp_path / "x.fbk")
    raw = bytearray((tmp_path / "x.fbk").read_bytes())
    raw[:4] = b"NOPE"
    (tmp_path / "y.fbk").write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        load_bank(tmp_path / "y.fbk")


def test_wrong_version_and_truncation(tmp_path):
    save_bank(tiny_bank(), tmp_path / "x.fbk")
    raw = bytearray((tmp_path / "x.fbk").read_bytes())
    (tmp_path / "t.fbk").write_bytes(bytes(raw[:-3]))
    with pytest.raises(FormatError):
        load_bank(tmp_path / "t.fbk")
    raw[4] = 9
    (tmp_path / "v.fbk").write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version"):
        load_bank(tmp_path / "v.fbk")


def test_non_finite_values_rejected(tmp_path):
    with pytest.raises(DataError):
        FeatureBank([[1.0, np.nan]], [0], ("base",))
    (tmp_path / "b.csv").write_text("class_id,f0\n0,inf\n")
    with pytest.raises(DataError):
        load_bank(tmp_path / "b.csv")


def test_csv_minimal(tmp_path):
    (tmp_path / "b.csv").write_text("class_id,f0,f1\n0,1.0,2.0\n")
    bank = load_bank(tmp_path / "b.csv")
    assert bank.n_samples == 1 and bank.feature_dim == 2
    np.testing.assert_array_equal(bank.features, [[1.0, 2.0]])


def test_csv_split_map(tmp_path):
    (tmp_path / "b.csv").write_text("class_id,f0\n0,1\n1,2\n2,3\n")
    companion_splits_path(tmp_path / "b.csv").write_text(json.dumps({"base": [0], "val": [2], "novel": [1]}))
    bank = load_bank(tmp_path / "b.csv")
    assert bank.class_splits == ("base", "novel", "val")


def test_overlapping_splits_rejected(tmp_path):
    (tmp_path / "b.csv").write_text("class_id,f0\n0,1\n1,2\n")
    companion_splits_path(tmp_path / "b.csv").write_text(json.dumps({"base": [0, 1], "novel": [1]}))
    with pytest.raises(DataError, match="both"):
        load_bank(tmp_path / "b.csv")


def test_bad_csv_header(tmp_path):
    (tmp_path / "b.csv").write_text("label,x\n0,1\n")
    with pytest.raises(FormatError):
        load_bank(tmp_path / "b.csv")


def test_empty_class_refused():
    with pytest.raises(DataError, match="no samples"):
        FeatureBank([[1.0], [2.0]], [0, 2], ("base", "base", "novel"))


def test_synthetic_degenerate_is_exact_centroids():
    bank = generate_synthetic(SyntheticSpec(n_base_classes=5, n_val_classes=2, n_novel_classes=4,
                                            feature_dim=6, samples_per_class=10,
                                            within_class_stddev=0.0, seed=2))
    for split in ("base", "val", "novel"):
        classes, cents = class_centroids(bank, split)
        X, ids = bank.split_data(split)
        pos = {int(c): i for i, c in enumerate(classes)}
        np.testing.assert_array_equal(X, cents[[pos[int(c)] for c in ids]])
        # nearest centroid is perfect
        d = ((X[:, None, :] - cents[None]) ** 2).sum(-1)
        assert (classes[d.argmin(1)] == ids).all()


def test_synthetic_sizes_and_determinism():
    spec = SyntheticSpec(n_base_classes=64, feature_dim=64, samples_per_class=100, seed=9)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert a == b
    assert a.split_data("base")[0].shape == (6400, 64)
    assert a.classes_in("val").size == 16 and a.classes_in("novel").size == 20
    assert generate_synthetic(SyntheticSpec(seed=10)) != a


def test_synthetic_rejects_bad_spec():
    with pytest.raises(DataError):
        generate_synthetic(SyntheticSpec(samples_per_class=0))
    with pytest.raises(DataError):
        generate_synthetic(SyntheticSpec(novel_correlation=1.5))


def test_centroids_small_cases():
    bank = FeatureBank([[0.0, 0.0], [2.0, 2.0], [7.0, 1.0]], [0, 0, 1], ("base", "base"))
    classes, cents = class_centroids(bank, "base")
    np.testing.assert_array_equal(classes, [0, 1])
    np.testing.assert_array_equal(cents, [[1.0, 1.0], [7.0, 1.0]])


def test_centroids_match_bruteforce():
    bank = generate_synthetic(SyntheticSpec(n_base_classes=5, n_val_classes=1, n_novel_classes=1,
                                            feature_dim=4, samples_per_class=13, seed=4))
    classes, cents = class_centroids(bank, "base")
    for c, row in zip(classes, cents):
        acc = [0.0] * 4
        n = 0
        for x, cid in zip(bank.features.tolist(), bank.class_ids.tolist()):
            if cid == c:
                acc = [a + v for a, v in zip(acc, x)]
                n += 1
        np.testing.assert_allclose(row, [a / n for a in acc], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_centroid_invariant_to_sample_order(seed):
    bank = generate_synthetic(SyntheticSpec(n_base_classes=3, n_val_classes=1, n_novel_classes=1,
                                            feature_dim=3, samples_per_class=6, seed=seed))
    perm = np.random.default_rng(seed).permutation(bank.n_samples)
    shuffled = FeatureBank(bank.features[perm], bank.class_ids[perm], bank.class_splits)
    np.testing.assert_allclose(class_centroids(bank, "base")[1], class_centroids(shuffled, "base")[1],
                               rtol=0, atol=1e-12)
