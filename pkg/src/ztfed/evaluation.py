"""Attack injection, imputation metrics, membership inference, byte accounting.

Imputation accuracy is scored at missing positions only; the arctangent
percentage error keeps individual terms bounded even when the ground
truth is zero. Membership inference follows the loss-threshold attack:
predict "member" when the per-sample reconstruction error falls below a
threshold, sweeping the threshold for the strongest attacker by default.
"""

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import model as mas2s
from .params import ModelParams, flatten, unflatten

__all__ = [
    "AttackConfig",
    "MiaConfig",
    "sign_flip",
    "imputation_metrics",
    "sensitivity",
    "sample_losses",
    "mia_evaluate",
    "utility",
    "communication_overhead",
    "build_mia_batches",
    "mean_imputation_baseline",
]


@dataclass
class AttackConfig:
    anomaly_rate: float = 0.0  # share of clients behaving maliciously
    flip_fraction: float = 0.2  # share of each attacker's coordinates negated

    def __post_init__(self):
        if not (0 <= self.anomaly_rate <= 1 and 0 <= self.flip_fraction <= 1):
            raise ValueError("rates must be in [0, 1]")


@dataclass
class MiaConfig:
    member_count: int = 500
    nonmember_count: int = 500
    strategy: str = "swept"  # or "fixed"
    fixed_threshold: float = 0.0

    def __post_init__(self):
        if self.member_count < 1 or self.nonmember_count < 1:
            raise ValueError("sample counts must be >= 1")
        if self.strategy not in ("swept", "fixed"):
            raise ValueError("strategy must be 'swept' or 'fixed'")


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5))


def sign_flip(params: ModelParams, flip_fraction: float, rng: np.random.Generator) -> ModelParams:
    """Negate a uniformly chosen round(fraction * count) coordinates."""
    if not (0 <= flip_fraction <= 1):
        raise ValueError("flip_fraction must be in [0, 1]")
    vec = flatten(params).copy()
    n_flip = _round_half_away(flip_fraction * vec.size)
    if n_flip:
        idx = rng.choice(vec.size, size=n_flip, replace=False)
        vec[idx] = -vec[idx]
    return unflatten(vec, params.specs)


def imputation_metrics(
    predicted: np.ndarray, truth: np.ndarray, mask: np.ndarray
) -> tuple[float, float, float]:
    """(MAE, RMSE, MAAPE) over the masked (missing) positions only.

    MAAPE terms are arctan(|(y - yhat)/y|); an exactly-zero truth value
    contributes pi/2 unless the prediction is also exact.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    mask = np.asarray(mask)
    sel = mask == 1
    if not sel.any():
        raise ValueError("mask selects no positions")
    err = predicted[sel] - truth[sel]
    y = truth[sel]
    mae = float(np.abs(err).mean())
    rmse = float(np.sqrt((err**2).mean()))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.abs(err / y)
    ratio = np.where(y == 0, np.where(err == 0, 0.0, np.inf), ratio)
    maape = float(np.arctan(ratio).mean())
    return mae, rmse, maape


def sensitivity(xs: Sequence[float], rmses: Sequence[float]) -> float:
    """Sum |centered x * centered rmse| over sum of squared centered x."""
    xs = np.asarray(xs, dtype=np.float64)
    rmses = np.asarray(rmses, dtype=np.float64)
    if xs.size != rmses.size or xs.size < 2:
        raise ValueError("need matching sequences of length >= 2")
    xc = xs - xs.mean()
    denom = (xc**2).sum()
    if denom == 0:
        raise ValueError("inputs are all equal; sensitivity undefined")
    return float(np.abs(xc * (rmses - rmses.mean())).sum() / denom)


def sample_losses(
    params: dict[str, np.ndarray], cfg: mas2s.Mas2sConfig, batch: mas2s.SeqBatch
) -> np.ndarray:
    """Per-sample mean absolute prediction error of the raw model output."""
    y_hat, _ = mas2s.forward(batch.inputs, params, cfg)
    return np.abs(y_hat - batch.targets).mean(axis=1)


def mia_evaluate(
    params: dict[str, np.ndarray],
    model_cfg: mas2s.Mas2sConfig,
    members: mas2s.SeqBatch,
    nonmembers: mas2s.SeqBatch,
    cfg: MiaConfig,
) -> tuple[float, float]:
    """Loss-threshold membership inference; returns (success rate %, threshold).

    Members are predicted where loss < threshold. With the swept strategy
    the threshold maximizing accuracy over all candidate cut points
    (midpoints of the sorted loss union plus both extremes) is used.
    """
    member_losses = sample_losses(params, model_cfg, members)[: cfg.member_count]
    nonmember_losses = sample_losses(params, model_cfg, nonmembers)[: cfg.nonmember_count]
    losses = np.concatenate([member_losses, nonmember_losses])
    labels = np.concatenate([np.ones(member_losses.size), np.zeros(nonmember_losses.size)])

    def accuracy(threshold: float) -> float:
        predicted = (losses < threshold).astype(float)
        return float((predicted == labels).mean())

    if cfg.strategy == "fixed":
        tau = cfg.fixed_threshold
        return accuracy(tau) * 100.0, tau

    uniq = np.unique(losses)
    candidates = [uniq[0] - 1.0, uniq[-1] + 1.0]
    candidates.extend((uniq[:-1] + uniq[1:]) / 2.0)
    best_tau = max(candidates, key=lambda t: (accuracy(t), -t))
    return accuracy(best_tau) * 100.0, float(best_tau)


def utility(maape_dp: float, maape_nodp: float) -> float:
    """(1 - MAAPE with privacy) / (1 - MAAPE without) as a percentage."""
    return (1.0 - maape_dp) / (1.0 - maape_nodp) * 100.0


def communication_overhead(records: Sequence) -> float:
    """Total bytes moved in all rounds (uploads + per-client downloads), in MB."""
    total = 0
    for rec in records:
        total += sum(rec.upload_bytes.values())
        total += rec.client_count * rec.download_bytes
    return total / 2**20


def _interleave(batches: list[mas2s.SeqBatch], count: int) -> mas2s.SeqBatch:
    """Round-robin across clients so no single farm dominates the sample."""
    order = []
    depth = max(len(b) for b in batches)
    for i in range(depth):
        for ci, b in enumerate(batches):
            if i < len(b):
                order.append((ci, i))
    order = order[: min(count, len(order))]
    xs = np.stack([batches[ci].inputs[i] for ci, i in order])
    ys = np.stack([batches[ci].targets[i] for ci, i in order])
    return mas2s.SeqBatch(inputs=xs, targets=ys)


def build_mia_batches(
    client_data: Sequence, cfg: MiaConfig
) -> tuple[mas2s.SeqBatch, mas2s.SeqBatch]:
    """Members drawn from participants' training sets, nonmembers from held-out
    tests; both interleaved evenly across clients."""
    members = _interleave([c.train for c in client_data], cfg.member_count)
    nonmembers = _interleave([c.test for c in client_data], cfg.nonmember_count)
    return members, nonmembers


def mean_imputation_baseline(series: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Fill missing positions with the mean of each series' observed values."""
    series = np.atleast_2d(np.asarray(series, dtype=np.float64))
    mask = np.atleast_2d(np.asarray(mask))
    out = series.copy()
    for i in range(series.shape[0]):
        observed = series[i][mask[i] == 0]
        fill = observed.mean() if observed.size else 0.0
        out[i][mask[i] == 1] = fill
    return out if out.shape[0] > 1 else out[0]
