"""Norm clipping and seed-deterministic Gaussian perturbation of parameters.

The noise standard deviation is calibrated from the (epsilon, delta)
budget, the sensitivity bound 2*tau_c/|D|, and the ratio of global epochs
to the synchronization interval. The noise stream is a pure function of
an integer seed so that the same seed later serves as the proof witness.
"""

import hashlib
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .params import ModelParams, l2_norm, params_add, params_scale

__all__ = [
    "DpConfig",
    "select_clip_threshold",
    "clip_params",
    "local_sensitivity",
    "noise_sigma",
    "seeded_gaussian_noise",
    "perturb",
    "rand_scalar",
]


@dataclass
class DpConfig:
    """Privacy budget and the schedule constants entering the noise scale."""

    epsilon: float = 40.0
    delta: float = 1e-4
    clip_percentile: float = 0.95
    global_epochs: int = 100
    sync_interval: int = 10

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if not (0 < self.delta < 1):
            raise ValueError("delta must be in (0, 1)")
        if not (0 < self.clip_percentile <= 1):
            raise ValueError("clip_percentile must be in (0, 1]")
        if self.global_epochs < 1 or self.sync_interval < 1:
            raise ValueError("epoch counts must be positive")
        if self.sync_interval > self.global_epochs:
            raise ValueError("sync_interval must not exceed global_epochs")


def select_clip_threshold(norms: Sequence[float], percentile: float) -> float:
    """Nearest-rank percentile of the given norms (ascending sort)."""
    if len(norms) == 0:
        raise ValueError("no norms to select a threshold from")
    if not (0 < percentile <= 1):
        raise ValueError("percentile must be in (0, 1]")
    ordered = sorted(float(n) for n in norms)
    rank = max(1, math.ceil(percentile * len(ordered)))
    return ordered[rank - 1]


def clip_params(theta: ModelParams, clip_threshold: float) -> ModelParams:
    """Scale theta by 1/max(1, ||theta||/tau_c); direction is preserved."""
    if clip_threshold <= 0:
        raise ValueError("clip threshold must be > 0")
    factor = max(1.0, l2_norm(theta) / clip_threshold)
    # treat rounding-level overshoot as already clipped so clipping is idempotent
    if factor <= 1.0 + 1e-12:
        return theta
    return params_scale(theta, 1.0 / factor)


def local_sensitivity(clip_threshold: float, dataset_size: int) -> float:
    """Worst-case parameter shift from one sample: 2*tau_c / |D|."""
    if dataset_size < 1:
        raise ValueError("dataset_size must be >= 1")
    return 2.0 * clip_threshold / dataset_size


def noise_sigma(cfg: DpConfig, sensitivity: float) -> float:
    """Gaussian scale sqrt(2 ln(1.25/delta)) * sensitivity / epsilon * (T_g/K)."""
    if sensitivity < 0:
        raise ValueError("sensitivity must be >= 0")
    base = math.sqrt(2.0 * math.log(1.25 / cfg.delta)) * sensitivity / cfg.epsilon
    return base * (cfg.global_epochs / cfg.sync_interval)


def _int_bytes(n: int) -> bytes:
    return n.to_bytes(max(1, (n.bit_length() + 7) // 8), "big")


def _uniform_stream(seed: int, count: int) -> np.ndarray:
    """Counter-mode hash stream: block j = SHA-256(seed || j), 4 u64 per block."""
    seed_bytes = _int_bytes(seed)
    blocks = (count + 3) // 4
    buf = bytearray()
    for j in range(blocks):
        buf += hashlib.sha256(seed_bytes + j.to_bytes(8, "big")).digest()
    words = np.frombuffer(bytes(buf), dtype=">u8")[:count]
    # (u + 0.5) / 2^64 stays strictly inside (0, 1) for the log below
    return (words.astype(np.float64) + 0.5) / 2.0**64


def seeded_gaussian_noise(seed: int, shape_of: ModelParams, sigma: float) -> ModelParams:
    """Deterministic N(0, sigma^2) noise with the layout of `shape_of`.

    Uniform draws come from the counter-mode hash stream and are paired
    through the Box-Muller transform, so the same seed always reproduces
    the identical noise arrays.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    count = shape_of.total_size
    if sigma == 0 or count == 0:
        return ModelParams((spec, np.zeros(spec.shape)) for spec, _ in shape_of.layers)
    pairs = (count + 1) // 2
    u = _uniform_stream(seed, 2 * pairs)
    u1, u2 = u[0::2], u[1::2]
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    normals = np.empty(2 * pairs)
    normals[0::2] = radius * np.cos(angle)
    normals[1::2] = radius * np.sin(angle)
    normals = normals[:count] * sigma

    out, pos = [], 0
    for spec, _ in shape_of.layers:
        out.append((spec, normals[pos : pos + spec.size].reshape(spec.shape)))
        pos += spec.size
    return ModelParams(out)


def perturb(
    theta: ModelParams,
    cfg: DpConfig,
    dataset_size: int,
    seed: int,
    clip_threshold: float | None = None,
    sensitivity: float | None = None,
) -> tuple[ModelParams, float, float]:
    """Clip then add calibrated seed-deterministic noise.

    When no cross-client clip threshold is supplied, the percentile rule
    over this client's own norm degenerates to the norm itself. A shared
    sensitivity (max over clients) may be passed in; otherwise the local
    2*tau_c/|D| bound is used. Returns (noised params, tau_c, sigma).
    """
    if clip_threshold is None:
        clip_threshold = select_clip_threshold([l2_norm(theta)], cfg.clip_percentile)
    if clip_threshold <= 0:
        # all-zero parameters: nothing to clip, noise scale collapses too
        clip_threshold = 1e-12
    clipped = clip_params(theta, clip_threshold)
    if sensitivity is None:
        sensitivity = local_sensitivity(clip_threshold, dataset_size)
    sigma = noise_sigma(cfg, sensitivity)
    noised = params_add(clipped, seeded_gaussian_noise(seed, theta, sigma))
    return noised, clip_threshold, sigma


def rand_scalar(rng: np.random.Generator, q: int) -> int:
    """Uniform draw from [1, q-1] with 128 bits of modulo-bias headroom."""
    if q <= 2:
        raise ValueError("q too small")
    nbytes = (q.bit_length() + 7) // 8 + 16
    raw = int.from_bytes(rng.bytes(nbytes), "big")
    return raw % (q - 1) + 1
