"""Diagnostic reports: centroid distances, temperature sweeps, latent dispersion.

All distances are measured in the space the corrector operates in, i.e.
after the Box-Cox transform.
"""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .ccf import CcfModel, TrainConfig, encode, mean_reconstruction_error, rectify, train
from .errors import CcfError, ContractError, DataError
from .featurestore import FeatureBank, class_centroids, split_name


@dataclass
class DistanceReport:
    split: str
    mean_d: float
    mean_d_hat: float
    per_class: list = field(default_factory=list)  # dicts: class_id, n, mean_d, mean_d_hat

    def to_dict(self) -> dict:
        return asdict(self)

    def csv_rows(self) -> list[dict]:
        rows = [{"split": self.split, "class_id": r["class_id"], "n": r["n"],
                 "mean_d": r["mean_d"], "mean_d_hat": r["mean_d_hat"]} for r in self.per_class]
        n = sum(r["n"] for r in self.per_class)
        rows.append({"split": self.split, "class_id": "all", "n": n,
                     "mean_d": self.mean_d, "mean_d_hat": self.mean_d_hat})
        return rows


def centroid_distances(bank: FeatureBank, split: str, model: CcfModel) -> DistanceReport:
    """Mean distance of original (d) and rectified (d_hat) features to their class mean."""
    split = split_name(split)
    classes, cents = class_centroids(bank, split)
    per_class = []
    tot_d = tot_dh = 0.0
    n_all = 0
    for c, xc in zip(classes, cents):
        X = bank.features[bank.class_ids == c]
        d = np.linalg.norm(X - xc, axis=1)
        dh = np.linalg.norm(rectify(model, X) - xc, axis=1)
        per_class.append({"class_id": int(c), "n": int(X.shape[0]),
                          "mean_d": float(d.mean()), "mean_d_hat": float(dh.mean())})
        tot_d += float(d.sum())
        tot_dh += float(dh.sum())
        n_all += X.shape[0]
    return DistanceReport(split, tot_d / n_all, tot_dh / n_all, per_class)


def latent_dispersion(bank: FeatureBank, model: CcfModel, split: str = "base") -> dict:
    """Intra-class variance of z and spread between class-mean z vectors.

    Intra-class variance is the mean over classes of the mean squared distance
    from each z to its class-mean z; a single-sample class contributes 0.
    Spread is the mean pairwise distance between class means.
    """
    classes = bank.classes_in(split)
    if classes.size == 0:
        raise DataError(f"split {split!r} has no classes")
    variances, means = [], []
    for c in classes:
        Z = encode(model, bank.features[bank.class_ids == c])
        mu = Z.mean(axis=0)
        variances.append(float(((Z - mu) ** 2).sum(axis=1).mean()))
        means.append(mu)
    M = np.array(means)
    if len(M) > 1:
        iu = np.triu_indices(len(M), k=1)
        D = np.linalg.norm(M[:, None, :] - M[None, :, :], axis=2)
        spread = float(D[iu].mean())
    else:
        spread = 0.0
    return {
        "split": split_name(split),
        "intra_class_variance": float(np.mean(variances)),
        "between_class_spread": spread,
        "per_class_variance": {int(c): v for c, v in zip(classes, variances)},
    }


@dataclass
class SweepReport:
    temperatures: list
    seeds: list
    rows: list  # dicts: temperature, seed, recon_error, val_accuracy, best_epoch

    def to_dict(self) -> dict:
        return asdict(self)

    def recon_by_seed(self) -> dict:
        out: dict = {}
        for r in self.rows:
            out.setdefault(r["seed"], []).append((r["temperature"], r["recon_error"]))
        return out


def temperature_sweep(bank: FeatureBank, base_config: TrainConfig, temperatures, seeds,
                      score=None, threads: int = 1) -> SweepReport:
    """Train one model per (temperature, seed), all else held fixed.

    ``score(model, seed)`` returns the validation few-shot accuracy; it is
    also handed to training as the early-stopping callback. Without it the
    accuracy column is left empty.
    """
    temperatures = [float(t) for t in temperatures]
    seeds = [int(s) for s in seeds]
    if not temperatures:
        raise ContractError("need at least one temperature")
    if not seeds:
        raise ContractError("need at least one seed")
    X_base, _ = bank.split_data("base")
    cells = [(T, s) for T in temperatures for s in seeds]

    def run(cell):
        T, s = cell
        cfg = replace(base_config, temperature=T, seed=s)
        cb = (lambda m: score(m, s)) if score is not None else None
        try:
            res = train(bank, cfg, cb)
        except CcfError as exc:
            raise type(exc)(f"temperature={T} seed={s}: {exc}") from exc
        acc = score(res.model, s) if score is not None else None
        return {"temperature": T, "seed": s,
                "recon_error": mean_reconstruction_error(res.model, X_base),
                "val_accuracy": acc, "best_epoch": res.best_epoch}

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(run, cells))
    else:
        rows = [run(c) for c in cells]
    return SweepReport(temperatures, seeds, rows)


def spearman(a, b) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    from scipy.stats import spearmanr

    return float(spearmanr(a, b)[0])


def latent_csv(model: CcfModel, X: np.ndarray, class_ids: np.ndarray) -> str:
    """One row per sample: class id, latent logits z, rectified feature."""
    Z = encode(model, X)
    R = rectify(model, X)
    header = ["class_id"] + [f"z{i}" for i in range(Z.shape[1])] + [f"xhat{j}" for j in range(R.shape[1])]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for c, z, r in zip(class_ids, Z, R):
        w.writerow([int(c)] + [repr(float(v)) for v in z] + [repr(float(v)) for v in r])
    return buf.getvalue()


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if v is None else (repr(v) if isinstance(v, float) else v)) for k, v in r.items()})
    return buf.getvalue()


def to_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
