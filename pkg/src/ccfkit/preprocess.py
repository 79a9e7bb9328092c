"""Box-Cox power transform applied to features before the corrector sees them.

One scalar (lambda, shift) pair is used for every feature dimension. It is
established on base-class features and reused unchanged for validation and
novel features.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DomainError
from .featurestore import FeatureBank

SHIFT_EPS = 1e-6
DEFAULT_GRID = tuple(np.round(np.arange(-2.0, 2.0001, 0.1), 10))


@dataclass(frozen=True)
class BoxCoxParams:
    lmbda: float = 0.5
    shift: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.lmbda):
            raise ContractError(f"lambda must be finite, got {self.lmbda}")
        if not (self.shift >= 0 and math.isfinite(self.shift)):
            raise ContractError(f"shift must be finite and >= 0, got {self.shift}")

    def to_dict(self) -> dict:
        return {"lambda": self.lmbda, "shift": self.shift}

    @classmethod
    def from_dict(cls, d: dict) -> "BoxCoxParams":
        return cls(float(d["lambda"]), float(d["shift"]))


def boxcox(x, params: BoxCoxParams) -> np.ndarray:
    """(v**lambda - 1) / lambda with v = x + shift; ln(v) when lambda == 0."""
    v = np.asarray(x, dtype=np.float64) + params.shift
    bad = ~(v > 0)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        pos = idx[0] if len(idx) == 1 else idx
        raise DomainError(f"shifted value {v[idx]!r} at index {pos} is not positive")
    lam = params.lmbda
    if lam == 0.0:
        return np.log(v)
    # expm1 keeps full precision when lambda*ln(v) is tiny
    return np.expm1(lam * np.log(v)) / lam


def shift_for(values) -> float:
    """Smallest shift making every value at least SHIFT_EPS."""
    return max(0.0, SHIFT_EPS - float(np.min(values)))


def boxcox_loglik(values: np.ndarray, lmbda: float) -> float:
    """Profile log-likelihood of the Box-Cox model for a positive sample."""
    y = boxcox(values, BoxCoxParams(lmbda, 0.0))
    n = y.size
    var = y.var()
    if np.ptp(y) == 0 or var <= 0:
        # degenerate sample: every lambda fits equally well
        return 0.0
    return -0.5 * n * math.log(var) + (lmbda - 1.0) * float(np.log(values).sum())


def fit_lambda(bank: FeatureBank, candidate_grid) -> BoxCoxParams:
    """Pick the grid lambda maximizing the pooled base-split log-likelihood.

    All base feature values are treated as one scalar population. Ties go to
    the smallest |lambda| (then the smaller value).
    """
    grid = [float(g) for g in candidate_grid]
    if not grid:
        raise ContractError("candidate grid is empty")
    base, _ = bank.split_data("base")
    if base.size == 0:
        raise ContractError("base split is empty")
    shift = shift_for(base)
    values = base.ravel() + shift
    best = None
    for lam in sorted(grid, key=lambda g: (abs(g), g)):
        ll = boxcox_loglik(values, lam)
        if best is None or ll > best[0]:
            best = (ll, lam)
    return BoxCoxParams(best[1], shift)


def transform_bank(bank: FeatureBank, params: BoxCoxParams) -> FeatureBank:
    return bank.with_features(boxcox(bank.features, params))


def establish_params(bank: FeatureBank, lmbda: float = 0.5, shift="auto", fit: bool = False,
                     grid=DEFAULT_GRID) -> BoxCoxParams:
    """Transform parameters for a whole bank.

    With ``fit`` the lambda comes from :func:`fit_lambda` on base features.
    An ``"auto"`` shift is the smallest one making every value in the bank
    (all splits) positive, so validation and novel features stay in the
    transform's domain.
    """
    if fit:
        lmbda = fit_lambda(bank, grid).lmbda
    if shift == "auto":
        shift = shift_for(bank.features)
    return BoxCoxParams(float(lmbda), float(shift))
