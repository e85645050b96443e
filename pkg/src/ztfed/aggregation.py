"""Trust-aware robust aggregation plus the classical baselines.

The trust pipeline: pairwise cosine similarity, power sharpening with a
negative clamp, a top-k neighbor graph, damped propagation to a fixed
point, MAD-based outlier exclusion, and a coordinatewise median over the
surviving clients. FedAvg, trimmed mean, MultiKrum and plain median are
provided for comparison runs.
"""

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .params import ModelParams, flatten, unflatten

__all__ = [
    "DtaaConfig",
    "TrustReport",
    "similarity_matrix",
    "sharpen",
    "build_graph",
    "initial_trust",
    "propagate_trust",
    "mad_filter",
    "median_aggregate",
    "dtaa",
    "fedavg",
    "trimmed_mean",
    "multikrum",
]

MAD_FLOOR = 1e-12
# Exact-tie consensus starves the highest-index clients of incoming graph
# edges (deterministic tie-breaking), depressing their propagated trust by
# up to ~6% of the median while the MAD itself collapses to zero. A floor
# relative to the median keeps the filter from excluding honest clients in
# that degenerate case; real attacker deficits are an order larger.
MAD_RELATIVE_FLOOR = 0.05


@dataclass
class DtaaConfig:
    neighbors: int = 3  # trusted neighbors kept per client
    sharpening: float = 2.0
    damping: float = 0.15
    tolerance: float = 1e-4
    mad_coefficient: float = 3.0
    max_iterations: int = 1000

    def __post_init__(self):
        if self.neighbors < 1:
            raise ValueError("neighbors must be >= 1")
        if self.sharpening <= 0:
            raise ValueError("sharpening must be > 0")
        if not (0 < self.damping < 1):
            raise ValueError("damping must be in (0, 1)")
        if self.tolerance <= 0 or self.mad_coefficient <= 0 or self.max_iterations < 1:
            raise ValueError("tolerance, mad_coefficient, max_iterations must be positive")


@dataclass
class TrustReport:
    """Every intermediate of one trust-aggregation round, JSON-exportable."""

    similarity: np.ndarray
    adjacency: np.ndarray
    scores: np.ndarray
    iterations_used: int
    converged: bool
    selected: tuple[int, ...]
    excluded: dict[int, str] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "similarity": self.similarity.tolist(),
                "adjacency": self.adjacency.tolist(),
                "scores": self.scores.tolist(),
                "iterations_used": self.iterations_used,
                "converged": self.converged,
                "selected": list(self.selected),
                "excluded": {str(k): v for k, v in self.excluded.items()},
            },
            sort_keys=True,
        )


def _stack(updates: Sequence[ModelParams]) -> np.ndarray:
    specs = updates[0].specs
    for i, u in enumerate(updates[1:], start=1):
        if u.specs != specs:
            raise ValueError(f"update {i} has a different layer layout")
    return np.stack([flatten(u) for u in updates])


def similarity_matrix(updates: Sequence[ModelParams]) -> np.ndarray:
    """Pairwise cosine similarities; the diagonal is 0 by convention."""
    if len(updates) < 2:
        raise ValueError("need at least two updates")
    mat = _stack(updates)
    norms = np.linalg.norm(mat, axis=1)
    for i, n in enumerate(norms):
        if n == 0:
            raise ValueError(f"client {i} uploaded an all-zero update")
    sims = (mat @ mat.T) / np.outer(norms, norms)
    np.clip(sims, -1.0, 1.0, out=sims)
    np.fill_diagonal(sims, 0.0)
    return sims


def sharpen(similarity: np.ndarray, sharpening: float) -> np.ndarray:
    """Clamp negatives to 0, then raise to the sharpening power (range [0,1])."""
    if sharpening <= 0:
        raise ValueError("sharpening must be > 0")
    return np.maximum(similarity, 0.0) ** sharpening


def build_graph(trust: np.ndarray, neighbors: int) -> np.ndarray:
    """Keep each row's top-k off-diagonal weights (ties to the lower index)."""
    n = trust.shape[0]
    if neighbors >= n:
        raise ValueError("neighbors must be < client count")
    adjacency = np.zeros_like(trust)
    for i in range(n):
        candidates = [j for j in range(n) if j != i]
        # sort by descending weight, then ascending index
        candidates.sort(key=lambda j: (-trust[i, j], j))
        for j in candidates[:neighbors]:
            adjacency[i, j] = trust[i, j]
    return adjacency


def initial_trust(adjacency: np.ndarray) -> np.ndarray:
    total = adjacency.sum()
    if total <= 0:
        raise ValueError("adjacency carries no trust signal")
    return adjacency.sum(axis=1) / total


def propagate_trust(
    adjacency: np.ndarray, t0: np.ndarray, cfg: DtaaConfig
) -> tuple[np.ndarray, int, bool]:
    """Damped fixed-point iteration over the column-normalized graph.

    Columns are normalized to sum 1 (zero columns stay zero) so the
    damped iteration is an L1 contraction. Returns (scores summing to 1,
    iterations used, converged flag).
    """
    col_sums = adjacency.sum(axis=0)
    safe = np.where(col_sums > 0, col_sums, 1.0)
    norm_adj = adjacency / safe
    t = t0.copy()
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_iterations + 1):
        t_next = (1.0 - cfg.damping) * (norm_adj @ t) + cfg.damping * t0
        if np.abs(t_next - t).sum() < cfg.tolerance:
            t = t_next
            converged = True
            break
        t = t_next
    total = t.sum()
    if total > 0:
        t = t / total
    return t, iterations, converged


def mad_filter(scores: np.ndarray, mad_coefficient: float) -> tuple[list[int], float]:
    """Exclude clients whose trust falls below median - k * MAD.

    The MAD is floored at a tiny epsilon so a degenerate all-equal score
    vector never excludes anyone; the highest-trust client is always kept.
    """
    if scores.size == 0:
        raise ValueError("empty score vector")
    med = float(np.median(scores))
    mad = float(np.median(np.abs(scores - med)))
    threshold = med - mad_coefficient * max(mad, MAD_FLOOR, MAD_RELATIVE_FLOOR * med)
    selected = [i for i, t in enumerate(scores) if t >= threshold]
    if not selected:
        selected = [int(np.argmax(scores))]
    return selected, threshold


def median_aggregate(updates: Sequence[ModelParams], selected: Sequence[int]) -> ModelParams:
    """Layer-wise coordinatewise median over the selected clients."""
    if len(selected) == 0:
        raise ValueError("empty selection")
    chosen = [updates[i] for i in selected]
    specs = chosen[0].specs
    out = []
    for li, spec in enumerate(specs):
        stacked = np.stack([c.layers[li][1] for c in chosen])
        out.append((spec, np.median(stacked, axis=0)))
    return ModelParams(out)


def dtaa(updates: Sequence[ModelParams], cfg: DtaaConfig) -> tuple[ModelParams, TrustReport]:
    """Full trust pipeline; the report carries every intermediate."""
    sims = similarity_matrix(updates)
    trust = sharpen(sims, cfg.sharpening)
    adjacency = build_graph(trust, cfg.neighbors)
    t0 = initial_trust(adjacency)
    scores, iterations, converged = propagate_trust(adjacency, t0, cfg)
    selected, threshold = mad_filter(scores, cfg.mad_coefficient)
    excluded = {
        i: f"trust {scores[i]:.3e} below median-MAD threshold {threshold:.3e}"
        for i in range(len(updates))
        if i not in selected
    }
    global_params = median_aggregate(updates, selected)
    report = TrustReport(
        similarity=sims,
        adjacency=adjacency,
        scores=scores,
        iterations_used=iterations,
        converged=converged,
        selected=tuple(selected),
        excluded=excluded,
    )
    return global_params, report


def fedavg(updates: Sequence[ModelParams]) -> ModelParams:
    """Equal-weight coordinatewise mean."""
    if not updates:
        raise ValueError("no updates")
    mat = _stack(updates)
    return unflatten(mat.mean(axis=0), updates[0].specs)


def trimmed_mean(updates: Sequence[ModelParams], trim_rate: float) -> ModelParams:
    """Drop floor(rate*N) smallest and largest values per coordinate, then average."""
    if not (0 <= trim_rate < 0.5):
        raise ValueError("trim_rate must be in [0, 0.5)")
    mat = _stack(updates)
    k = int(np.floor(trim_rate * mat.shape[0]))
    if 2 * k >= mat.shape[0]:
        raise ValueError("trim_rate removes every client")
    ordered = np.sort(mat, axis=0)
    kept = ordered[k : mat.shape[0] - k]
    return unflatten(kept.mean(axis=0), updates[0].specs)


def plain_median(updates: Sequence[ModelParams]) -> ModelParams:
    return median_aggregate(updates, list(range(len(updates))))


def multikrum(
    updates: Sequence[ModelParams],
    adversary_count: int,
    m_select: Optional[int] = None,
) -> ModelParams:
    """Average the m clients with the lowest Krum scores.

    A client's score is the sum of squared distances to its N-f-2 nearest
    neighbors; requires N >= 2f+3.
    """
    n = len(updates)
    f = adversary_count
    if n < 2 * f + 3:
        raise ValueError(f"MultiKrum needs N >= 2f+3 clients, got N={n}, f={f}")
    if m_select is None:
        m_select = n - f
    if not (1 <= m_select <= n):
        raise ValueError("m_select out of range")
    mat = _stack(updates)
    sq = ((mat[:, None, :] - mat[None, :, :]) ** 2).sum(axis=2)
    neighbor_count = n - f - 2
    scores = np.empty(n)
    for i in range(n):
        others = np.sort(np.delete(sq[i], i))
        scores[i] = others[:neighbor_count].sum()
    chosen = np.argsort(scores, kind="stable")[:m_select]
    return unflatten(mat[chosen].mean(axis=0), updates[0].specs)
