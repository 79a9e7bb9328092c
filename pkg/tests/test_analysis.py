import csv
import io

import numpy as np
import pytest

from ccfkit.analysis import (
    centroid_distances, latent_csv, latent_dispersion, rows_to_csv, spearman, temperature_sweep,
)
from ccfkit.ccf import CcfModel, TrainConfig, init_model, train
from ccfkit.errors import ContractError, DataError
from ccfkit.featurestore import FeatureBank


def identity_model(d):
    I = np.eye(d)
    return CcfModel(I.copy(), np.zeros(d), I.copy(), np.zeros(d), I.copy(), np.zeros(d),
                    decoder_activation=False)


def positive_bank(seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.5, 3.0, size=(30, 3))
    ids = np.repeat(np.arange(6), 5)
    return FeatureBank(X, ids, ("base", "base", "base", "novel", "novel", "novel"))


def test_identity_model_leaves_distances_unchanged():
    bank = positive_bank()
    r = centroid_distances(bank, "novel", identity_model(3))
    assert r.mean_d_hat == r.mean_d
    for row in r.per_class:
        assert row["mean_d_hat"] == row["mean_d"]


def test_per_class_average_matches_split_mean():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(23, 3))
    ids = np.array([0] * 3 + [1] * 12 + [2] * 8)
    bank = FeatureBank(X, ids, ("novel",) * 3)
    r = centroid_distances(bank, "novel", init_model(3, 2, hidden_dim=4, seed=0))
    n = np.array([row["n"] for row in r.per_class])
    for key, total in (("mean_d", r.mean_d), ("mean_d_hat", r.mean_d_hat)):
        vals = np.array([row[key] for row in r.per_class])
        assert abs((n * vals).sum() / n.sum() - total) < 1e-10
    rows = r.csv_rows()
    assert rows[-1]["class_id"] == "all" and rows[-1]["n"] == 23


def test_empty_split():
    with pytest.raises(DataError):
        centroid_distances(positive_bank(), "val", identity_model(3))


def test_trained_corrector_pulls_toward_centroids(small_bank):
    res = train(small_bank, TrainConfig(hidden_dim=64, learning_rate=1e-3, batch_size=32,
                                        max_epochs=30, seed=0))
    r = centroid_distances(small_bank, "novel", res.model)
    assert r.mean_d_hat < r.mean_d


def test_dispersion_of_identical_samples_is_zero():
    X = np.repeat(np.array([[1.0, 2.0], [3.0, 1.0]]), 4, axis=0)
    bank = FeatureBank(X, np.repeat([0, 1], 4), ("base", "base"))
    out = latent_dispersion(bank, init_model(2, 2, hidden_dim=3, seed=0))
    assert out["intra_class_variance"] == 0.0
    assert out["between_class_spread"] > 0


def test_dispersion_is_order_invariant():
    bank = positive_bank(2)
    model = init_model(3, 3, hidden_dim=5, seed=1)
    perm = np.random.default_rng(0).permutation(bank.n_samples)
    shuffled = FeatureBank(bank.features[perm], bank.class_ids[perm], bank.class_splits)
    a = latent_dispersion(bank, model)
    b = latent_dispersion(shuffled, model)
    assert a["intra_class_variance"] == pytest.approx(b["intra_class_variance"], rel=1e-12)
    assert a["between_class_spread"] == pytest.approx(b["between_class_spread"], rel=1e-12)


def test_single_sample_class_contributes_zero():
    X = np.array([[1.0, 2.0], [0.0, 0.0], [2.0, 2.0]])
    bank = FeatureBank(X, [0, 1, 1], ("base", "base"))
    out = latent_dispersion(bank, init_model(2, 2, hidden_dim=3, seed=0))
    assert out["per_class_variance"][0] == 0.0


SWEEP_CFG = TrainConfig(hidden_dim=16, learning_rate=1e-3, batch_size=64, max_epochs=2)


def test_sweep_single_temperature(small_bank):
    rep = temperature_sweep(small_bank, SWEEP_CFG, [0.1], [0])
    assert len(rep.rows) == 1
    assert rep.rows[0]["temperature"] == 0.1 and rep.rows[0]["val_accuracy"] is None


def test_sweep_is_reproducible(small_bank):
    a = temperature_sweep(small_bank, SWEEP_CFG, [0.05, 1.0], [0, 1])
    b = temperature_sweep(small_bank, SWEEP_CFG, [0.05, 1.0], [0, 1], threads=4)
    assert a.rows == b.rows
    assert len(a.rows) == 4
    assert sorted(a.recon_by_seed()) == [0, 1]


def test_sweep_rejects_empty_lists(small_bank):
    with pytest.raises(ContractError):
        temperature_sweep(small_bank, SWEEP_CFG, [], [0])
    with pytest.raises(ContractError):
        temperature_sweep(small_bank, SWEEP_CFG, [0.1], [])


def test_sweep_error_names_cell():
    bank = FeatureBank(np.full((4, 2), 1e200), [0, 0, 1, 1], ("base", "base"))
    with pytest.raises(Exception, match="temperature=0.5 seed=3"):
        temperature_sweep(bank, SWEEP_CFG, [0.5], [3])


def test_spearman():
    assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)


def test_latent_csv_layout():
    model = init_model(3, 2, hidden_dim=4, seed=0)
    X = np.arange(6.0).reshape(2, 3)
    rows = list(csv.reader(io.StringIO(latent_csv(model, X, np.array([4, 5])))))
    assert rows[0] == ["class_id", "z0", "z1", "xhat0", "xhat1", "xhat2"]
    assert len(rows) == 3 and rows[2][0] == "5"


def test_rows_to_csv_blank_for_none():
    text = rows_to_csv([{"a": 1, "b": None, "c": 0.5}])
    assert text == "a,b,c\n1,,0.5\n"
