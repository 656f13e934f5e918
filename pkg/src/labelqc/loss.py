"""Compositional training objective: per-sample MSE plus an optimal-pair hinge ranking term."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .pairing import PairingResult

DEFAULT_LAMBDA = 1.0
DEFAULT_XI = 0.05


class KinkError(ValueError):
    """Finite differences straddle a hinge; the gradient is not defined there."""


@dataclass(frozen=True)
class LossConfig:
    lam: float = DEFAULT_LAMBDA
    xi: float = DEFAULT_XI

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("lambda must be non-negative")
        if not self.xi > 0:
            raise ValueError("xi must be positive")


def _vec(x) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=np.float64))


def mse_loss(predicted, actual) -> float:
    p, a = _vec(predicted), _vec(actual)
    if p.shape != a.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {a.shape}")
    if p.size == 0:
        raise ValueError("empty input")
    return float(np.mean((p - a) ** 2))


def rank_loss_pair(hi_hat, hj_hat, hi, hj, xi=DEFAULT_XI) -> float:
    vals = (hi_hat, hj_hat, hi, hj, xi)
    if not all(np.isfinite(v) for v in vals):
        raise ValueError("non-finite input to ranking loss")
    return max(0.0, (hi_hat - hj_hat) * (hj - hi) + xi)


def _pair_index(pairing: PairingResult, n: int):
    if not pairing.pairs:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    idx = np.asarray(pairing.pairs, dtype=int)
    if idx.min() < 0 or idx.max() >= n:
        raise ValueError("pairing refers to indices outside the batch")
    return idx[:, 0], idx[:, 1]


@dataclass
class BatchTargets:
    predicted: np.ndarray
    actual: np.ndarray
    pairing: PairingResult

    def __post_init__(self):
        self.predicted = _vec(self.predicted)
        self.actual = _vec(self.actual)
        if self.predicted.shape != self.actual.shape:
            raise ValueError("predicted and actual lengths differ")
        _pair_index(self.pairing, self.predicted.size)


def compositional_loss(batch: BatchTargets, cfg: LossConfig = LossConfig()):
    """Return ``(total, {"mse": ..., "rank": ...})``.

    The ranking term is the mean hinge over pairs; a leftover sample from an
    odd batch contributes to the MSE term only.
    """
    mse = mse_loss(batch.predicted, batch.actual)
    if cfg.lam == 0:
        return mse, {"mse": mse, "rank": 0.0}
    i, j = _pair_index(batch.pairing, batch.predicted.size)
    if i.size == 0:
        rank = 0.0
    else:
        p, a = batch.predicted, batch.actual
        rank = float(np.mean(np.maximum(0.0, (p[i] - p[j]) * (a[j] - a[i]) + cfg.xi)))
    return mse + cfg.lam * rank, {"mse": mse, "rank": rank}


class CompositionalLoss:
    """The loss as a function of the predictions, with its analytic gradient.

    Actual values and pairing are held fixed, which is the setting of a
    single training step.
    """

    def __init__(self, actual, pairing: PairingResult, cfg: LossConfig = LossConfig()):
        self.actual = _vec(actual)
        self.pairing = pairing
        self.cfg = cfg
        self._i, self._j = _pair_index(pairing, self.actual.size)

    def __call__(self, predicted) -> float:
        return compositional_loss(BatchTargets(predicted, self.actual, self.pairing), self.cfg)[0]

    def hinge_arguments(self, predicted) -> np.ndarray:
        p, a = _vec(predicted), self.actual
        return (p[self._i] - p[self._j]) * (a[self._j] - a[self._i]) + self.cfg.xi

    def gradient(self, predicted) -> np.ndarray:
        p, a = _vec(predicted), self.actual
        n = p.size
        grad = 2.0 * (p - a) / n
        if self.cfg.lam and self._i.size:
            active = self.hinge_arguments(p) > 0
            d = (a[self._j] - a[self._i]) * active * (self.cfg.lam / self._i.size)
            np.add.at(grad, self._i, d)
            np.add.at(grad, self._j, -d)
        return grad


class MSELoss:
    def __init__(self, actual):
        self.actual = _vec(actual)

    def __call__(self, predicted) -> float:
        return mse_loss(predicted, self.actual)

    def gradient(self, predicted) -> np.ndarray:
        p = _vec(predicted)
        return 2.0 * (p - self.actual) / p.size


def grad_check(loss, point, epsilon: float = 1e-4) -> float:
    """Max relative error between ``loss.gradient`` and central differences.

    Losses exposing ``hinge_arguments`` are checked for kinks first: if any
    hinge argument lies within ``10 * epsilon`` of zero, :class:`KinkError`
    is raised instead of returning a meaningless comparison.
    """
    x = _vec(point).copy()
    hinge = getattr(loss, "hinge_arguments", None)
    if hinge is not None:
        args = np.abs(hinge(x))
        if args.size and args.min() <= 10 * epsilon:
            raise KinkError(f"point lies within {args.min():.2e} of a hinge kink")
    analytic = loss.gradient(x)
    numeric = np.empty_like(x)
    for k in range(x.size):
        up, dn = x.copy(), x.copy()
        up[k] += epsilon
        dn[k] -= epsilon
        numeric[k] = (loss(up) - loss(dn)) / (2 * epsilon)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / scale))


def torch_compositional_loss(predicted, actual, pairing: PairingResult, cfg: LossConfig = LossConfig()):
    """Differentiable twin of :func:`compositional_loss` for training."""
    import torch

    mse = torch.mean((predicted - actual) ** 2)
    if cfg.lam == 0 or not pairing.pairs:
        return mse, mse, torch.zeros((), dtype=predicted.dtype)
    idx = torch.as_tensor(pairing.pairs, dtype=torch.long)
    i, j = idx[:, 0], idx[:, 1]
    rank = torch.clamp((predicted[i] - predicted[j]) * (actual[j] - actual[i]) + cfg.xi, min=0.0).mean()
    return mse + cfg.lam * rank, mse, rank


def loss_log_line(step: int, mse: float, rank: float, cfg: LossConfig, **extra) -> str:
    row = {"step": step, "mse_term": mse, "rank_term": rank, "lambda": cfg.lam, "xi": cfg.xi}
    row.update(extra)
    return json.dumps(row, sort_keys=True)
