"""Labeled feature banks: validation, binary/CSV persistence, synthetic generation.

A bank holds precomputed feature vectors (one row per sample), a dense class
id per sample, and a split tag per class. Features are float64 in memory and
float32 on disk in the binary format.
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, FormatError
from .numcore import Rng

SPLITS = ("base", "val", "novel")
_SPLIT_TAG = {name: i for i, name in enumerate(SPLITS)}
_SPLIT_ALIASES = {"base": "base", "val": "val", "validation": "val", "novel": "novel"}

MAGIC = b"FBK1"
VERSION = 1
_HEADER = struct.Struct("<4sIIIQ")


def split_name(split: str) -> str:
    try:
        return _SPLIT_ALIASES[split]
    except KeyError:
        raise ContractError(f"unknown split {split!r}; expected one of {SPLITS}") from None


@dataclass(frozen=True, eq=False)
class FeatureBank:
    features: np.ndarray  # (n_samples, feature_dim)
    class_ids: np.ndarray  # (n_samples,)
    class_splits: tuple  # split name per class id
    class_names: tuple = ()

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64)
        ids = np.array(self.class_ids, dtype=np.int64)
        if feats.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {feats.shape}")
        if ids.shape != (feats.shape[0],):
            raise DataError("need exactly one class id per sample")
        if not np.isfinite(feats).all():
            bad = int(np.argwhere(~np.isfinite(feats))[0][0])
            raise DataError(f"non-finite feature value in sample {bad}")
        splits = tuple(split_name(s) for s in self.class_splits)
        n_classes = len(splits)
        if ids.size and (ids.min() < 0 or ids.max() >= n_classes):
            raise DataError(f"class ids must lie in 0..{n_classes - 1}")
        counts = np.bincount(ids, minlength=n_classes)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            raise DataError(f"class {int(empty[0])} has no samples")
        names = tuple(self.class_names)
        if names and len(names) != n_classes:
            raise DataError("class_names must name every class")
        feats.setflags(write=False)
        ids.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "class_ids", ids)
        object.__setattr__(self, "class_splits", splits)
        object.__setattr__(self, "class_names", names)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_splits)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    def classes_in(self, split: str) -> np.ndarray:
        split = split_name(split)
        return np.array([c for c, s in enumerate(self.class_splits) if s == split], dtype=np.int64)

    def split_mask(self, split: str) -> np.ndarray:
        return np.isin(self.class_ids, self.classes_in(split))

    def split_data(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        """Features and global class ids of every sample in ``split``."""
        mask = self.split_mask(split)
        return self.features[mask], self.class_ids[mask]

    def base_label_index(self) -> dict:
        """Map global base class id -> position in the base-class (latent) axis."""
        return {int(c): i for i, c in enumerate(self.classes_in("base"))}

    def with_features(self, features: np.ndarray) -> "FeatureBank":
        return FeatureBank(features, self.class_ids, self.class_splits, self.class_names)

    def __eq__(self, other):
        if not isinstance(other, FeatureBank):
            return NotImplemented
        return (
            self.class_splits == other.class_splits
            and self.class_names == other.class_names
            and np.array_equal(self.class_ids, other.class_ids)
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
        )


# --- persistence ----------------------------------------------------------


def save_bank(bank: FeatureBank, path, fmt: str | None = None, splits_path=None) -> None:
    path = Path(path)
    fmt = fmt or _guess_format(path)
    if not isinstance(bank, FeatureBank):
        raise ContractError("save_bank expects a FeatureBank")
    if np.bincount(bank.class_ids, minlength=bank.n_classes).min() == 0:
        raise DataError("refusing to save a bank with an empty class")
    try:
        if fmt == "binary":
            path.write_bytes(_encode_binary(bank))
        elif fmt == "csv":
            _write_csv(bank, path, Path(splits_path) if splits_path else companion_splits_path(path))
        else:
            raise ContractError(f"unknown bank format {fmt!r}")
    except OSError as exc:
        raise OSError(f"could not write bank to {path}: {exc}") from exc


def load_bank(path, fmt: str | None = None, splits_path=None) -> FeatureBank:
    path = Path(path)
    fmt = fmt or _guess_format(path)
    if fmt == "binary":
        return _decode_binary(path.read_bytes(), str(path))
    if fmt == "csv":
        return _read_csv(path, Path(splits_path) if splits_path else companion_splits_path(path))
    raise ContractError(f"unknown bank format {fmt!r}")


def _guess_format(path: Path) -> str:
    return "csv" if path.suffix.lower() == ".csv" else "binary"


def companion_splits_path(csv_path) -> Path:
    """``bank.csv`` -> ``bank.splits.json``."""
    csv_path = Path(csv_path)
    return csv_path.with_name(csv_path.stem + ".splits.json")


def _encode_binary(bank: FeatureBank) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, bank.feature_dim, bank.n_classes, bank.n_samples)]
    names = bank.class_names or ("",) * bank.n_classes
    for split, name in zip(bank.class_splits, names):
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise DataError(f"class name too long ({len(raw)} bytes)")
        parts.append(struct.pack("<BH", _SPLIT_TAG[split], len(raw)) + raw)
    rec = np.dtype([("cid", "<u4"), ("x", "<f4", (bank.feature_dim,))])
    rows = np.empty(bank.n_samples, dtype=rec)
    rows["cid"] = bank.class_ids
    rows["x"] = bank.features
    parts.append(rows.tobytes())
    return b"".join(parts)


def _decode_binary(data: bytes, where: str = "<bytes>") -> FeatureBank:
    if len(data) < _HEADER.size:
        raise FormatError(f"{where}: file too short for a bank header")
    magic, version, dim, n_classes, n_samples = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"{where}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{where}: unsupported bank version {version}")
    off = _HEADER.size
    splits, names = [], []
    for c in range(n_classes):
        if off + 3 > len(data):
            raise FormatError(f"{where}: truncated class table at class {c}")
        tag, name_len = struct.unpack_from("<BH", data, off)
        off += 3
        if tag >= len(SPLITS):
            raise FormatError(f"{where}: class {c} has invalid split tag {tag}")
        splits.append(SPLITS[tag])
        names.append(data[off : off + name_len].decode("utf-8"))
        off += name_len
    rec = np.dtype([("cid", "<u4"), ("x", "<f4", (dim,))])
    if len(data) - off != n_samples * rec.itemsize:
        raise FormatError(
            f"{where}: expected {n_samples * rec.itemsize} bytes of samples, found {len(data) - off}"
        )
    rows = np.frombuffer(data, dtype=rec, count=n_samples, offset=off)
    feats = rows["x"].astype(np.float64).reshape(n_samples, dim)
    ids = rows["cid"].astype(np.int64)
    return FeatureBank(feats, ids, tuple(splits), tuple(names) if any(names) else ())


def _write_csv(bank: FeatureBank, path: Path, splits_path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class_id"] + [f"f{j}" for j in range(bank.feature_dim)])
        for cid, row in zip(bank.class_ids, bank.features):
            w.writerow([int(cid)] + [repr(float(v)) for v in row])
    split_map = {s: [int(c) for c in bank.classes_in(s)] for s in SPLITS}
    if bank.class_names:
        split_map["names"] = list(bank.class_names)
    splits_path.write_text(json.dumps(split_map, indent=1) + "\n")


def _read_csv(path: Path, splits_path: Path) -> FeatureBank:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty CSV") from None
        dim = len(header) - 1
        if header[0] != "class_id" or header[1:] != [f"f{j}" for j in range(dim)]:
            raise FormatError(f"{path}: header must be class_id,f0,...,f{{d-1}}")
        ids, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != dim + 1:
                raise FormatError(f"{path}:{lineno}: expected {dim + 1} fields, got {len(rec)}")
            try:
                ids.append(int(rec[0]))
                rows.append([float(v) for v in rec[1:]])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    n_classes = max(ids) + 1 if ids else 0
    names: tuple = ()
    if splits_path.exists():
        split_map = json.loads(splits_path.read_text())
        splits = _splits_from_map(split_map, n_classes, str(splits_path))
        names = tuple(split_map.get("names", ()))
    else:
        # no companion map: every class is a base class
        splits = ("base",) * n_classes
    feats = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
    return FeatureBank(feats, np.array(ids, dtype=np.int64), splits, names)


def _splits_from_map(split_map: dict, n_classes: int, where: str) -> tuple:
    assigned: dict[int, str] = {}
    for key, ids in split_map.items():
        if key == "names":
            continue
        split = _SPLIT_ALIASES.get(key)
        if split is None:
            raise FormatError(f"{where}: unknown split key {key!r}")
        for c in ids:
            if c in assigned:
                raise DataError(f"{where}: class {c} assigned to both {assigned[c]} and {split}")
            assigned[int(c)] = split
    n_classes = max([n_classes] + [c + 1 for c in assigned])
    missing = [c for c in range(n_classes) if c not in assigned]
    if missing:
        raise DataError(f"{where}: classes {missing[:5]} have no split")
    return tuple(assigned[c] for c in range(n_classes))


# --- centroids ------------------------------------------------------------


def class_centroids(bank: FeatureBank, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-class mean features for ``split``.

    Returns ``(class_ids, centroids)`` where row i of ``centroids`` is the
    mean of class ``class_ids[i]``.
    """
    classes = bank.classes_in(split)
    if classes.size == 0:
        raise DataError(f"split {split!r} has no classes")
    cents = np.empty((classes.size, bank.feature_dim))
    for i, c in enumerate(classes):
        rows = bank.features[bank.class_ids == c]
        if rows.shape[0] == 0:
            raise DataError(f"class {int(c)} has no samples")
        cents[i] = rows.mean(axis=0)
    return classes, cents


# --- synthetic banks ------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    n_base_classes: int = 64
    n_val_classes: int = 16
    n_novel_classes: int = 20
    feature_dim: int = 64
    samples_per_class: int = 100
    centroid_scale: float = 1.0
    within_class_stddev: float = 1.0
    novel_correlation: float = 0.8
    centroid_rank: int | None = 16
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_base_classes", "n_val_classes", "n_novel_classes", "feature_dim", "samples_per_class"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be positive, got {getattr(self, name)}")
        if self.within_class_stddev < 0:
            raise DataError("within_class_stddev must be >= 0")
        if not 0.0 <= self.novel_correlation <= 1.0:
            raise DataError("novel_correlation must lie in [0, 1]")
        if self.centroid_scale <= 0:
            raise DataError("centroid_scale must be positive")
        if self.centroid_rank is not None and self.centroid_rank < 1:
            raise DataError("centroid_rank must be positive")


def generate_synthetic(spec: SyntheticSpec) -> FeatureBank:
    """Gaussian class clusters with novel centroids correlated to base centroids.

    Class ids are laid out base, then val, then novel. Centroids live in a
    random ``centroid_rank``-dimensional subspace (full space when None) while
    the within-class noise is isotropic in all dimensions. Validation and
    novel centroids mix 2-3 base centroids with a fresh random direction,
    weighted by ``novel_correlation``. Feature values are rounded to float32
    so a bank round-trips exactly through the binary format.
    """
    spec.validate()
    rng = Rng(spec.seed)
    d = spec.feature_dim
    rank = d if spec.centroid_rank is None else min(spec.centroid_rank, d)
    basis = rng.normal(rank * d).reshape(rank, d) / np.sqrt(rank)

    def fresh(k: int) -> np.ndarray:
        return spec.centroid_scale * (rng.normal(k * rank).reshape(k, rank) @ basis)

    base = fresh(spec.n_base_classes)
    others = []
    for _ in range(spec.n_val_classes + spec.n_novel_classes):
        k = 2 + int(rng.integers(2, 1)[0])
        parents = rng.choice(spec.n_base_classes, min(k, spec.n_base_classes))
        w = rng.uniform(parents.size) + 1e-3
        mix = (w / w.sum()) @ base[parents]
        others.append(spec.novel_correlation * mix + (1.0 - spec.novel_correlation) * fresh(1)[0])
    cents = np.vstack([base] + others) if others else base

    n_classes = cents.shape[0]
    ids = np.repeat(np.arange(n_classes), spec.samples_per_class)
    noise = rng.normal(ids.size * d).reshape(ids.size, d)
    feats = cents[ids] + spec.within_class_stddev * noise
    feats = feats.astype(np.float32).astype(np.float64)
    splits = (
        ("base",) * spec.n_base_classes
        + ("val",) * spec.n_val_classes
        + ("novel",) * spec.n_novel_classes
    )
    return FeatureBank(feats, ids, splits)
