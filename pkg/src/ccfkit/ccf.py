"""The category-correlated feature corrector.

An autoencoder whose bottleneck ``z`` has one entry per base class and is
read as logits over those classes. Training minimizes

    mse + ce_weight * ce + beta * frob

where ``mse`` is the batch-mean squared reconstruction error, ``ce`` the
batch-mean negative log-likelihood of softmax(z / T) for the true base
class, and ``frob`` the batch-mean squared norm of ``z``. At evaluation time
``rectify`` maps a (Box-Cox transformed) feature through encoder and decoder
to produce one corrected feature.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, ContractError, DataError, FormatError, TrainingError
from .featurestore import FeatureBank
from .numcore import DEFAULT_SLOPE, AdamState, Rng, adam_step, leaky_relu, leaky_relu_grad, log_softmax_t, softmax_t
from .preprocess import BoxCoxParams

log = logging.getLogger(__name__)

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")
CKPT_MAGIC = b"CCF1"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    temperature: float = 0.1
    beta: float = 0.05
    learning_rate: float = 1e-4
    batch_size: int = 256
    max_epochs: int = 100
    eval_every: int = 1
    patience: int = 10
    val_episodes: int = 200
    seed: int = 0
    hidden_dim: int = 2048
    slope: float = DEFAULT_SLOPE
    ce_weight: float = 1.0
    decoder_activation: bool = True
    encoder_output_activation: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if not self.beta >= 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.ce_weight < 0 or self.slope < 0:
            raise ConfigError("ce_weight and slope must be >= 0")
        for name in ("batch_size", "max_epochs", "eval_every", "val_episodes", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LossBreakdown:
    mse: float
    ce: float  # already multiplied by ce_weight
    frob: float
    total: float


@dataclass
class CcfModel:
    W1: np.ndarray  # (feature_dim, hidden)
    b1: np.ndarray
    W2: np.ndarray  # (hidden, n_base)
    b2: np.ndarray
    W3: np.ndarray  # (n_base, feature_dim)
    b3: np.ndarray
    slope: float = DEFAULT_SLOPE
    decoder_activation: bool = True
    encoder_output_activation: bool = False

    @property
    def feature_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.W2.shape[1]

    def params(self) -> dict:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def copy(self) -> "CcfModel":
        kw = {k: v.copy() for k, v in self.params().items()}
        return CcfModel(**kw, slope=self.slope, decoder_activation=self.decoder_activation,
                        encoder_output_activation=self.encoder_output_activation)

    def check(self) -> None:
        d, h, c = self.feature_dim, self.hidden_dim, self.latent_dim
        want = {"W1": (d, h), "b1": (h,), "W2": (h, c), "b2": (c,), "W3": (c, d), "b3": (d,)}
        for k, shape in want.items():
            if getattr(self, k).shape != shape:
                raise ContractError(f"{k} has shape {getattr(self, k).shape}, expected {shape}")


def init_model(feature_dim: int, n_base: int, hidden_dim: int = 2048, seed: int = 0,
               slope: float = DEFAULT_SLOPE, decoder_activation: bool = True,
               encoder_output_activation: bool = False) -> CcfModel:
    """Glorot-uniform weights, zero biases."""
    rng = Rng(seed)

    def glorot(fan_in, fan_out):
        a = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform_range(-a, a, fan_in * fan_out).reshape(fan_in, fan_out)

    return CcfModel(
        W1=glorot(feature_dim, hidden_dim), b1=np.zeros(hidden_dim),
        W2=glorot(hidden_dim, n_base), b2=np.zeros(n_base),
        W3=glorot(n_base, feature_dim), b3=np.zeros(feature_dim),
        slope=slope, decoder_activation=decoder_activation,
        encoder_output_activation=encoder_output_activation,
    )


def _forward(model: CcfModel, X: np.ndarray) -> dict:
    a1 = X @ model.W1 + model.b1
    h = leaky_relu(a1, model.slope)
    a2 = h @ model.W2 + model.b2
    z = leaky_relu(a2, model.slope) if model.encoder_output_activation else a2
    a3 = z @ model.W3 + model.b3
    xhat = leaky_relu(a3, model.slope) if model.decoder_activation else a3
    return {"a1": a1, "h": h, "a2": a2, "z": z, "a3": a3, "xhat": xhat}


def _as_batch(model: CcfModel, x, dim: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != dim:
        raise ContractError(f"{what}: expected dimension {dim}, got shape {x.shape}")
    return X, single


def encode(model: CcfModel, x) -> np.ndarray:
    """Latent base-class logits for one feature or a batch of rows."""
    X, single = _as_batch(model, x, model.feature_dim, "encode")
    z = _forward(model, X)["z"]
    return z[0] if single else z


def decode(model: CcfModel, z) -> np.ndarray:
    Z, single = _as_batch(model, z, model.latent_dim, "decode")
    a3 = Z @ model.W3 + model.b3
    out = leaky_relu(a3, model.slope) if model.decoder_activation else a3
    return out[0] if single else out


def rectify(model: CcfModel, x) -> np.ndarray:
    """decode(encode(x)): exactly one rectified feature per input row."""
    X, single = _as_batch(model, x, model.feature_dim, "rectify")
    out = _forward(model, X)["xhat"]
    return out[0] if single else out


def _check_labels(model: CcfModel, X: np.ndarray, labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        # one-hot rows
        if labels.shape != (X.shape[0], model.latent_dim):
            raise ContractError(f"one-hot labels must have shape {(X.shape[0], model.latent_dim)}")
        labels = labels.argmax(axis=1)
    labels = labels.astype(np.int64)
    if labels.shape != (X.shape[0],):
        raise ContractError("need one label per sample")
    if labels.size and (labels.min() < 0 or labels.max() >= model.latent_dim):
        raise DataError(f"labels must index base classes 0..{model.latent_dim - 1}")
    return labels


def loss(model: CcfModel, X, labels, config: TrainConfig) -> LossBreakdown:
    """Loss terms for a batch; ``labels`` are base-class positions or one-hot rows."""
    X, _ = _as_batch(model, X, model.feature_dim, "loss")
    labels = _check_labels(model, X, labels)
    fw = _forward(model, X)
    return _breakdown(X, labels, fw, config)


def _breakdown(X, labels, fw, config) -> LossBreakdown:
    B = X.shape[0]
    z = fw["z"]
    mse = float(((X - fw["xhat"]) ** 2).sum() / B)
    logp = log_softmax_t(z, config.temperature)
    ce = config.ce_weight * float(-logp[np.arange(B), labels].sum() / B)
    frob = float((z * z).sum() / B)
    return LossBreakdown(mse, ce, frob, mse + ce + config.beta * frob)


def gradients(model: CcfModel, X, labels, config: TrainConfig, return_loss: bool = False):
    """Analytic gradients of the total loss with respect to every parameter."""
    X, _ = _as_batch(model, X, model.feature_dim, "gradients")
    labels = _check_labels(model, X, labels)
    B = X.shape[0]
    fw = _forward(model, X)
    z, s = fw["z"], model.slope

    d_xhat = -2.0 * (X - fw["xhat"]) / B
    d_a3 = d_xhat * leaky_relu_grad(fw["a3"], s) if model.decoder_activation else d_xhat
    gW3 = z.T @ d_a3
    gb3 = d_a3.sum(axis=0)

    p = softmax_t(z, config.temperature)
    p[np.arange(B), labels] -= 1.0
    d_z = d_a3 @ model.W3.T + (config.ce_weight / (config.temperature * B)) * p + (2.0 * config.beta / B) * z
    d_a2 = d_z * leaky_relu_grad(fw["a2"], s) if model.encoder_output_activation else d_z
    gW2 = fw["h"].T @ d_a2
    gb2 = d_a2.sum(axis=0)

    d_a1 = (d_a2 @ model.W2.T) * leaky_relu_grad(fw["a1"], s)
    gW1 = X.T @ d_a1
    gb1 = d_a1.sum(axis=0)

    grads = {"W1": gW1, "b1": gb1, "W2": gW2, "b2": gb2, "W3": gW3, "b3": gb3}
    if return_loss:
        return grads, _breakdown(X, labels, fw, config)
    return grads


# --- training -------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    mse: float
    ce: float
    frob: float
    total: float
    val_accuracy: Optional[float] = None


@dataclass
class TrainResult:
    model: CcfModel
    best_epoch: int
    best_val_accuracy: Optional[float]
    stopped_early: bool
    history: list = field(default_factory=list)

    def log_dict(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "best_val_accuracy": self.best_val_accuracy,
            "stopped_early": self.stopped_early,
            "epochs": [asdict(r) for r in self.history],
        }


def base_training_data(bank: FeatureBank) -> tuple[np.ndarray, np.ndarray]:
    """Base features and their positions along the latent axis."""
    X, ids = bank.split_data("base")
    if X.shape[0] == 0:
        raise DataError("base split is empty")
    index = bank.base_label_index()
    return X, np.array([index[int(c)] for c in ids], dtype=np.int64)


def train(bank: FeatureBank, config: TrainConfig,
          fewshot_eval: Optional[Callable[[CcfModel], float]] = None) -> TrainResult:
    """Mini-batch Adam on base features with early stopping on validation accuracy.

    ``fewshot_eval`` scores a model snapshot on the validation split. Training
    stops once ``patience`` consecutive evaluations fail to beat the best
    accuracy, and the best snapshot is returned. Without a callback the model
    after ``max_epochs`` is returned.
    """
    X, y = base_training_data(bank)
    if fewshot_eval is not None and bank.classes_in("val").size == 0:
        raise DataError("validation split is empty")
    n_base = bank.classes_in("base").size
    model = init_model(bank.feature_dim, n_base, config.hidden_dim, seed=config.seed,
                       slope=config.slope, decoder_activation=config.decoder_activation,
                       encoder_output_activation=config.encoder_output_activation)
    params = model.params()
    state = AdamState(lr=config.learning_rate)
    rng = Rng(config.seed ^ 0x5EED)
    n = X.shape[0]

    best_model, best_acc, best_epoch = None, None, 0
    stale = 0
    stopped_early = False
    history = []
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        sums = np.zeros(4)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            # overflow shows up as a non-finite loss, reported just below
            with np.errstate(over="ignore", invalid="ignore"):
                grads, lb = gradients(model, X[idx], y[idx], config, return_loss=True)
            if not math.isfinite(lb.total):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            adam_step(params, grads, state)
            sums += idx.size * np.array([lb.mse, lb.ce, lb.frob, lb.total])
        if not all(np.isfinite(p).all() for p in params.values()):
            raise TrainingError(f"non-finite weights at epoch {epoch}")
        rec = EpochRecord(epoch, *(float(v) for v in sums / n))
        history.append(rec)

        if fewshot_eval is not None and epoch % config.eval_every == 0:
            acc = float(fewshot_eval(model))
            rec.val_accuracy = acc
            log.info("epoch %d loss %.5f val acc %.4f", epoch, rec.total, acc)
            if best_acc is None or acc > best_acc:
                best_model, best_acc, best_epoch, stale = model.copy(), acc, epoch, 0
            else:
                stale += 1
            if stale >= config.patience:
                stopped_early = epoch < config.max_epochs
                break
        else:
            log.debug("epoch %d loss %.5f", epoch, rec.total)

    if best_model is None:
        best_model, best_epoch = model.copy(), history[-1].epoch
    return TrainResult(best_model, best_epoch, best_acc, stopped_early, history)


def mean_reconstruction_error(model: CcfModel, X: np.ndarray) -> float:
    """Mean squared l2 distance between features and their reconstructions."""
    return float(((X - rectify(model, X)) ** 2).sum(axis=1).mean())


# --- checkpoints ----------------------------------------------------------

_CKPT_HEADER = struct.Struct("<4sIIII")


def save_checkpoint(model: CcfModel, path, config: Optional[TrainConfig] = None,
                    boxcox: Optional[BoxCoxParams] = None, extra: Optional[dict] = None) -> None:
    model.check()
    meta = {
        "model": {
            "slope": model.slope,
            "decoder_activation": model.decoder_activation,
            "encoder_output_activation": model.encoder_output_activation,
        },
        "train_config": config.to_dict() if config else None,
        "boxcox": boxcox.to_dict() if boxcox else None,
    }
    if extra:
        meta.update(extra)
    parts = [_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, model.feature_dim, model.hidden_dim, model.latent_dim)]
    for k in PARAM_NAMES:
        parts.append(np.ascontiguousarray(getattr(model, k), dtype="<f8").tobytes())
    trailer = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<Q", len(trailer)) + trailer)
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[CcfModel, dict]:
    """Return the model and the JSON metadata trailer."""
    data = Path(path).read_bytes()
    if len(data) < _CKPT_HEADER.size:
        raise FormatError(f"{path}: too short for a checkpoint")
    magic, version, d, h, c = _CKPT_HEADER.unpack_from(data, 0)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    shapes = {"W1": (d, h), "b1": (h,), "W2": (h, c), "b2": (c,), "W3": (c, d), "b3": (d,)}
    off = _CKPT_HEADER.size
    arrays = {}
    for k in PARAM_NAMES:
        count = int(np.prod(shapes[k]))
        if off + 8 * count > len(data):
            raise FormatError(f"{path}: truncated at {k}")
        arrays[k] = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shapes[k])
        off += 8 * count
    if off + 8 > len(data):
        raise FormatError(f"{path}: missing metadata trailer")
    (n,) = struct.unpack_from("<Q", data, off)
    try:
        meta = json.loads(data[off + 8 : off + 8 + n].decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"{path}: bad metadata trailer: {exc}") from None
    m = meta.get("model", {})
    model = CcfModel(**arrays, slope=m.get("slope", DEFAULT_SLOPE),
                     decoder_activation=m.get("decoder_activation", True),
                     encoder_output_activation=m.get("encoder_output_activation", False))
    return model, meta
