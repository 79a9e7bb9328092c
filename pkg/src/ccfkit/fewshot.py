"""Episodic N-way K-shot evaluation.

Each episode draws N classes from a split, K support and Q query samples per
class, optionally augments the support set with one rectified feature per
support sample, fits a small classifier and scores the queries.
"""
from __future__ import annotations

import json
import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .ccf import CcfModel, rectify
from .errors import ConfigError, ContractError, DataError
from .featurestore import FeatureBank, split_name
from .numcore import Rng, derive_seed, softmax_t

CLASSIFIER_KINDS = ("logistic_regression", "cosine", "nearest_centroid")


@dataclass(frozen=True)
class Episode:
    way: int
    shot: int
    query_per_class: int
    class_ids: np.ndarray  # global ids, in draw order
    support_x: np.ndarray
    support_y: np.ndarray  # episode-local labels
    query_x: np.ndarray
    query_y: np.ndarray
    support_index: np.ndarray  # rows of the bank
    query_index: np.ndarray


def sample_episode(bank: FeatureBank, split: str, way: int, shot: int, query: int, rng: Rng) -> Episode:
    if way < 1 or shot < 1 or query < 0:
        raise ContractError(f"invalid episode shape way={way} shot={shot} query={query}")
    classes = bank.classes_in(split)
    if classes.size < way:
        raise DataError(f"split {split_name(split)!r} has {classes.size} classes, need {way}")
    chosen = classes[rng.choice(classes.size, way)]
    s_idx, q_idx = [], []
    for c in chosen:
        rows = np.flatnonzero(bank.class_ids == c)
        if rows.size < shot + query:
            raise DataError(f"class {int(c)} has {rows.size} samples, need shot+query={shot + query}")
        pick = rows[rng.choice(rows.size, shot + query)]
        s_idx.append(pick[:shot])
        q_idx.append(pick[shot:])
    s_idx = np.concatenate(s_idx)
    q_idx = np.concatenate(q_idx)
    return Episode(
        way, shot, query, chosen,
        bank.features[s_idx], np.repeat(np.arange(way), shot),
        bank.features[q_idx], np.repeat(np.arange(way), query),
        s_idx, q_idx,
    )


def augment_support(episode: Episode, model: CcfModel) -> tuple[np.ndarray, np.ndarray]:
    """Originals followed by one rectified copy of each, with the same labels."""
    if model.feature_dim != episode.support_x.shape[1]:
        raise ContractError(
            f"model expects dimension {model.feature_dim}, episode has {episode.support_x.shape[1]}"
        )
    rect = rectify(model, episode.support_x)
    return np.vstack([episode.support_x, rect]), np.concatenate([episode.support_y, episode.support_y])


# --- classifiers ----------------------------------------------------------


@dataclass(frozen=True)
class ClassifierSpec:
    kind: str = "logistic_regression"
    l2: float = 1.0
    max_iter: int = 1000
    learning_rate: float = 1.0
    tol: float = 1e-6

    def __post_init__(self):
        if self.kind == "softmax":
            object.__setattr__(self, "kind", "logistic_regression")
        if self.kind not in CLASSIFIER_KINDS:
            raise ConfigError(f"unknown classifier kind {self.kind!r}; choose from {CLASSIFIER_KINDS}")
        if self.kind == "logistic_regression":
            if self.l2 < 0 or self.max_iter < 1 or not self.learning_rate > 0 or self.tol < 0:
                raise ConfigError("logistic regression needs l2 >= 0, max_iter >= 1, learning_rate > 0, tol >= 0")


class Classifier:
    """Fitted episode classifier; ``scores`` returns one column per class."""

    def __init__(self, kind: str, n_classes: int, prototypes=None, W=None, b=None):
        self.kind = kind
        self.n_classes = n_classes
        self.prototypes = prototypes
        self.W = W
        self.b = b

    def scores(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.kind == "logistic_regression":
            return X @ self.W + self.b
        P = self.prototypes
        if self.kind == "cosine":
            xn = np.linalg.norm(X, axis=1, keepdims=True)
            pn = np.linalg.norm(P, axis=1)
            return (X @ P.T) / np.maximum(xn * pn, 1e-300)
        d2 = (X * X).sum(1)[:, None] - 2.0 * X @ P.T + (P * P).sum(1)[None, :]
        return -np.sqrt(np.maximum(d2, 0.0))

    def probabilities(self, X) -> np.ndarray:
        if self.kind != "logistic_regression":
            raise ContractError("probabilities are only defined for logistic regression")
        return softmax_t(self.scores(X), 1.0)


def predict(classifier: Classifier, query) -> np.ndarray | int:
    """Argmax label per query row; ties go to the lowest label."""
    single = np.asarray(query).ndim == 1
    labels = np.argmax(classifier.scores(query), axis=1)
    return int(labels[0]) if single else labels


def _prototypes(X: np.ndarray, y: np.ndarray, n_classes: int) -> np.ndarray:
    return np.vstack([X[y == c].mean(axis=0) for c in range(n_classes)])


def fit_classifier(X, y, spec: ClassifierSpec, n_classes: Optional[int] = None) -> Classifier:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    counts = np.bincount(y, minlength=n_classes)
    if (counts == 0).any():
        raise DataError(f"no support samples for class {int(np.flatnonzero(counts == 0)[0])}")
    if spec.kind in ("cosine", "nearest_centroid"):
        return Classifier(spec.kind, n_classes, prototypes=_prototypes(X, y, n_classes))
    W, b = _fit_logreg(X, y, n_classes, spec)
    return Classifier(spec.kind, n_classes, W=W, b=b)


def _fit_logreg(X, y, n_classes, spec):
    """Multinomial logistic regression by full-batch gradient descent.

    Objective: mean cross-entropy + l2 / (2n) * ||W||^2 (bias unpenalized),
    i.e. the usual C = 1 / l2 parametrisation. The step is
    ``learning_rate / L`` with L an upper bound on the gradient's Lipschitz
    constant. Stops when the objective changes by less than ``tol``
    (relative) or after ``max_iter`` steps.
    """
    n, d = X.shape
    # centering is exact here (the bias is unpenalized) and improves conditioning
    mu = X.mean(axis=0)
    X = X - mu
    Y = np.zeros((n, n_classes))
    Y[np.arange(n), y] = 1.0
    reg = spec.l2 / n
    Xa = np.hstack([X, np.ones((n, 1))])
    lip = 0.5 * np.linalg.eigvalsh(Xa.T @ Xa / n)[-1] + reg
    step = spec.learning_rate / lip
    Wb = np.zeros((d + 1, n_classes))
    prev = math.inf
    it = 0
    for it in range(spec.max_iter):
        S = Xa @ Wb
        S -= S.max(axis=1, keepdims=True)
        E = np.exp(S)
        Z = E.sum(axis=1, keepdims=True)
        P = E / Z
        W = Wb[:-1]
        obj = float(-(S[np.arange(n), y] - np.log(Z[:, 0])).mean() + 0.5 * reg * (W * W).sum())
        if abs(prev - obj) <= spec.tol * max(1.0, abs(obj)):
            break
        prev = obj
        G = Xa.T @ (P - Y) / n
        G[:-1] += reg * W
        Wb -= step * G
    W = Wb[:-1].copy()
    return W, Wb[-1] - mu @ W


# --- evaluation -----------------------------------------------------------


@dataclass
class EvalReport:
    n_episodes: int
    mean_accuracy: float
    ci95_halfwidth: float
    per_episode_accuracies: list = field(default_factory=list)

    @classmethod
    def from_accuracies(cls, accs) -> "EvalReport":
        accs = [float(a) for a in accs]
        n = len(accs)
        if n == 0:
            raise ContractError("no episodes to summarize")
        # statistics works with exact sums, so constant accuracies give sd == 0
        mean = statistics.fmean(accs)
        sd = statistics.stdev(accs) if n > 1 else 0.0
        return cls(n, mean, 1.96 * sd / math.sqrt(n), accs)

    def to_dict(self) -> dict:
        return {
            "n_episodes": self.n_episodes,
            "mean_accuracy": self.mean_accuracy,
            "ci95_halfwidth": self.ci95_halfwidth,
            "per_episode_accuracies": self.per_episode_accuracies,
        }

    def to_json(self, **extra) -> str:
        return json.dumps({**self.to_dict(), **extra}, indent=2, sort_keys=True) + "\n"


def episode_rng(seed: int, index: int) -> Rng:
    return Rng(derive_seed(seed, index))


def run_episode(bank: FeatureBank, split: str, model: Optional[CcfModel], spec: ClassifierSpec,
                way: int, shot: int, query: int, rng: Rng) -> float:
    ep = sample_episode(bank, split, way, shot, query, rng)
    if model is not None:
        X, y = augment_support(ep, model)
    else:
        X, y = ep.support_x, ep.support_y
    clf = fit_classifier(X, y, spec, n_classes=way)
    return float((predict(clf, ep.query_x) == ep.query_y).mean())


def evaluate(bank: FeatureBank, split: str, model: Optional[CcfModel], spec: ClassifierSpec,
             way: int = 5, shot: int = 1, query: int = 15, n_episodes: int = 2000,
             seed: int = 0, threads: int = 1) -> EvalReport:
    """Mean accuracy and 95% CI over independently seeded episodes.

    Episode i always uses the RNG derived from (seed, i), so the report does
    not depend on ``threads``. Passing ``model=None`` gives the baseline.
    """
    if n_episodes < 1:
        raise ContractError("n_episodes must be >= 1")
    if model is not None and model.feature_dim != bank.feature_dim:
        raise ContractError(f"model expects dimension {model.feature_dim}, bank has {bank.feature_dim}")

    def one(i: int) -> float:
        return run_episode(bank, split, model, spec, way, shot, query, episode_rng(seed, i))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            accs = list(pool.map(one, range(n_episodes)))
    else:
        accs = [one(i) for i in range(n_episodes)]
    return EvalReport.from_accuracies(accs)


def validation_callback(bank: FeatureBank, spec: ClassifierSpec, way: int, shot: int, query: int,
                        n_episodes: int, seed: int, threads: int = 1):
    """Early-stopping scorer for :func:`ccfkit.ccf.train`: full pipeline on the val split."""

    def score(model: CcfModel) -> float:
        return evaluate(bank, "val", model, spec, way, shot, query, n_episodes, seed, threads).mean_accuracy

    return score
