"""Synthetic wind-farm data, CSV ingestion, hybrid missing masks, splits.

Masks mix continuous runs with isolated missing points at a controlled
ratio; run placement keeps at least one observed gap between runs so a
run-length audit over the continuous positions is well defined.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "FEATURE_NAMES",
    "WindDataset",
    "MaskConfig",
    "HybridMask",
    "minmax_normalize",
    "denormalize",
    "split_rates",
    "generate_mask",
    "apply_mask",
    "synth_wind",
    "load_csv",
    "export_csv",
    "split_dataset",
]

FEATURE_NAMES = ("power", "speed", "direction", "temperature", "pressure", "density")


def round_half_away(x: float) -> int:
    """round() with .5 going away from zero, so budgets never under-count."""
    return int(np.floor(x + 0.5)) if x >= 0 else -int(np.floor(-x + 0.5))


@dataclass
class WindDataset:
    """Normalized (samples, T, 6) windows plus per-feature ranges for denorm."""

    features: np.ndarray
    feature_mins: np.ndarray
    feature_maxs: np.ndarray
    farm_id: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 3 or self.features.shape[2] != len(FEATURE_NAMES):
            raise ValueError("features must be (samples, T, 6)")
        if self.features.size and not (
            self.features.min() >= -1e-9 and self.features.max() <= 1 + 1e-9
        ):
            raise ValueError("features must be normalized to [0, 1]")

    @property
    def samples(self) -> int:
        return self.features.shape[0]

    @property
    def sequence_length(self) -> int:
        return self.features.shape[1]


@dataclass
class MaskConfig:
    total_rate: float = 0.2
    discrete_ratio: float = 0.25  # share of the budget that is isolated points
    run_length_min: int = 4
    run_length_max: int = 16
    placeholder: float = -1.0  # outside [0,1] so true zeros stay distinguishable

    def __post_init__(self):
        if not (0 <= self.total_rate <= 1):
            raise ValueError("total_rate must be in [0, 1]")
        if not (0 <= self.discrete_ratio <= 1):
            raise ValueError("discrete_ratio must be in [0, 1]")
        if not (1 <= self.run_length_min <= self.run_length_max):
            raise ValueError("bad run length bounds")


@dataclass
class HybridMask:
    mask: np.ndarray  # length T, 1 = missing
    continuous_positions: tuple[int, ...]
    discrete_positions: tuple[int, ...]


def minmax_normalize(column: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Map to [0, 1]; a constant column maps to 0.5 with its range recorded."""
    column = np.asarray(column, dtype=np.float64)
    lo, hi = float(column.min()), float(column.max())
    if hi > lo:
        return (column - lo) / (hi - lo), lo, hi
    return np.full_like(column, 0.5), lo, hi


def denormalize(column: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi > lo:
        return np.asarray(column) * (hi - lo) + lo
    return np.full_like(np.asarray(column, dtype=np.float64), lo)


def split_rates(total_rate: float, discrete_ratio: float) -> tuple[float, float]:
    """(discrete rate, continuous rate) = (r*mr, (1-r)*mr)."""
    if not (0 <= total_rate <= 1 and 0 <= discrete_ratio <= 1):
        raise ValueError("rates must be in [0, 1]")
    return discrete_ratio * total_rate, (1 - discrete_ratio) * total_rate


def _sample_run_lengths(budget: int, cfg: MaskConfig, rng: np.random.Generator) -> list[int]:
    """Lengths in [min, max] summing exactly to budget; last run may truncate
    only when the whole budget is below one minimum run."""
    lo, hi = cfg.run_length_min, cfg.run_length_max
    lengths = []
    remaining = budget
    while remaining > 0:
        if remaining < 2 * lo:
            lengths.append(remaining)  # single final run, truncated to budget
            break
        length = int(rng.integers(lo, min(hi, remaining - lo) + 1))
        lengths.append(length)
        remaining -= length
    return lengths


def generate_mask(t_len: int, cfg: MaskConfig, seed: int) -> HybridMask:
    """Hybrid mask with exactly round(total_rate*T) missing positions.

    Continuous runs are placed with at least one observed gap between
    them (uniform placement via a random composition of the slack); the
    remaining budget is drawn uniformly from still-unmasked positions.
    """
    rng = np.random.default_rng(seed)
    n_total = round_half_away(cfg.total_rate * t_len)
    if n_total > t_len:
        raise ValueError("missing budget exceeds sequence length")
    _, rate_cont = split_rates(cfg.total_rate, cfg.discrete_ratio)
    n_cont = min(round_half_away(rate_cont * t_len), n_total)
    n_disc = n_total - n_cont

    cont_positions: list[int] = []
    if n_cont > 0:
        placed = False
        for _ in range(1000):
            lengths = _sample_run_lengths(n_cont, cfg, rng)
            slack = t_len - n_cont - (len(lengths) - 1)
            if slack < 0:
                continue  # too many short runs to separate; resample
            # spread the slack over the len+1 gaps around the runs
            cuts = np.sort(rng.integers(0, slack + 1, size=len(lengths)))
            gaps = np.diff(np.concatenate([[0], cuts, [slack]]))
            pos = 0
            cont_positions = []
            for gap, length in zip(gaps[:-1], lengths):
                pos += int(gap)
                cont_positions.extend(range(pos, pos + length))
                pos += length + 1  # separator keeps runs apart
            placed = True
            break
        if not placed:
            raise ValueError(
                f"cannot place continuous runs: budget {n_cont} of {t_len} "
                f"with lengths in [{cfg.run_length_min}, {cfg.run_length_max}]"
            )

    mask = np.zeros(t_len, dtype=np.int8)
    mask[cont_positions] = 1
    free = np.flatnonzero(mask == 0)
    disc_positions = np.sort(rng.choice(free, size=n_disc, replace=False)) if n_disc else np.array([], dtype=int)
    mask[disc_positions] = 1
    return HybridMask(
        mask=mask,
        continuous_positions=tuple(int(p) for p in cont_positions),
        discrete_positions=tuple(int(p) for p in disc_positions),
    )


def apply_mask(series: np.ndarray, mask: np.ndarray, placeholder: float) -> np.ndarray:
    """series * (1 - mask) + placeholder * mask; observed entries untouched."""
    series = np.asarray(series, dtype=np.float64)
    mask = np.asarray(mask)
    if series.shape != mask.shape:
        raise ValueError("series and mask shapes differ")
    return series * (1 - mask) + placeholder * mask


# --- synthetic wind farms ----------------------------------------------------

_CUT_IN, _RATED, _CUT_OUT = 3.0, 12.0, 25.0


def _power_curve(speed: np.ndarray) -> np.ndarray:
    """Cubic ramp between cut-in and rated, flat to cut-out, zero outside."""
    ramp = np.clip((speed - _CUT_IN) / (_RATED - _CUT_IN), 0.0, 1.0) ** 3
    return np.where((speed >= _CUT_IN) & (speed <= _CUT_OUT), ramp, 0.0)


def _ar1(n: int, rho: float, scale: float, rng: np.random.Generator) -> np.ndarray:
    noise = rng.normal(scale=scale, size=n)
    out = np.empty(n)
    out[0] = noise[0]
    for k in range(1, n):
        out[k] = rho * out[k - 1] + noise[k]
    return out


def synth_wind(
    farms: int,
    samples_per_farm: int,
    t_len: int = 96,
    seed: int = 0,
    steps_per_day: int = 96,
) -> list[WindDataset]:
    """Seeded synthetic stand-in for real wind-farm exports.

    Wind speed is a diurnal sinusoid plus a smooth first-order
    autoregressive perturbation; power follows a clipped cubic power
    curve; the remaining features are correlated transforms with noise.
    Farms differ by phase and scale offsets.
    """
    if farms < 1 or samples_per_farm < 1 or t_len < 1:
        raise ValueError("counts must be positive")
    datasets = []
    for farm_id in range(farms):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(farm_id,)))
        n = samples_per_farm * t_len
        k = np.arange(n)
        phase = rng.uniform(0, 2 * np.pi)
        base = rng.uniform(8.0, 10.5)
        amp = rng.uniform(1.5, 2.5)
        speed = base + amp * np.sin(2 * np.pi * k / steps_per_day + phase) + _ar1(n, 0.95, 0.45, rng)
        speed = np.clip(speed, 0.0, 30.0)
        # white turbine-side measurement noise: power is not fully recoverable
        # from speed or from neighboring steps
        power = np.clip(_power_curve(speed) + rng.normal(scale=0.05, size=n), 0.0, 1.1)

        direction = (180 + 60 * np.sin(2 * np.pi * k / (steps_per_day * 3) + phase) + _ar1(n, 0.98, 2.0, rng)) % 360
        temperature = 12 + 6 * np.sin(2 * np.pi * k / steps_per_day + phase - np.pi / 3) + _ar1(n, 0.97, 0.3, rng)
        pressure = 1013 + rng.uniform(-6, 6) + _ar1(n, 0.995, 0.25, rng)
        density = pressure * 100 / (287.05 * (temperature + 273.15)) + _ar1(n, 0.9, 0.002, rng)

        raw = np.stack([power, speed, direction, temperature, pressure, density], axis=1)
        normalized = np.empty_like(raw)
        mins = np.empty(len(FEATURE_NAMES))
        maxs = np.empty(len(FEATURE_NAMES))
        for j in range(len(FEATURE_NAMES)):
            normalized[:, j], mins[j], maxs[j] = minmax_normalize(raw[:, j])
        windows = normalized.reshape(samples_per_farm, t_len, len(FEATURE_NAMES))
        datasets.append(WindDataset(features=windows, feature_mins=mins, feature_maxs=maxs, farm_id=farm_id))
    return datasets


# --- CSV ingestion ------------------------------------------------------------


def load_csv(path: str | Path, t_len: int = 96, farm_id: int | None = None) -> WindDataset:
    """Read raw feature rows, normalize, and cut stride-T windows.

    Rows with unparseable values are dropped (reported with their line
    numbers); a missing header column or too little data is an error.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [c.strip().lower() for c in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        missing = [name for name in FEATURE_NAMES if name not in header]
        if missing:
            raise ValueError(f"{path}: missing column(s) {', '.join(missing)}")
        cols = [header.index(name) for name in FEATURE_NAMES]
        rows, bad_lines = [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append([float(row[c]) for c in cols])
            except (ValueError, IndexError):
                bad_lines.append(lineno)
    if bad_lines:
        logger.warning("%s: rejected %d unparseable row(s) at lines %s", path, len(bad_lines), bad_lines)
    if len(rows) < t_len:
        raise ValueError(f"{path}: {len(rows)} usable rows, need at least {t_len}")
    raw = np.asarray(rows, dtype=np.float64)
    usable = (len(raw) // t_len) * t_len
    raw = raw[:usable]
    normalized = np.empty_like(raw)
    mins = np.empty(len(FEATURE_NAMES))
    maxs = np.empty(len(FEATURE_NAMES))
    for j in range(len(FEATURE_NAMES)):
        normalized[:, j], mins[j], maxs[j] = minmax_normalize(raw[:, j])
    if farm_id is None:
        digits = "".join(ch for ch in path.stem if ch.isdigit())
        farm_id = int(digits) if digits else 0
    return WindDataset(
        features=normalized.reshape(-1, t_len, len(FEATURE_NAMES)),
        feature_mins=mins,
        feature_maxs=maxs,
        farm_id=farm_id,
    )


def export_csv(ds: WindDataset, path: str | Path) -> None:
    """Write denormalized rows under the canonical header."""
    flat = ds.features.reshape(-1, len(FEATURE_NAMES))
    raw = np.empty_like(flat)
    for j in range(len(FEATURE_NAMES)):
        raw[:, j] = denormalize(flat[:, j], ds.feature_mins[j], ds.feature_maxs[j])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FEATURE_NAMES)
        writer.writerows(raw.tolist())


def split_dataset(
    ds: WindDataset, fractions: tuple[float, float, float] = (0.8, 0.1, 0.1), seed: int = 0
) -> tuple[WindDataset, WindDataset, WindDataset]:
    """Seeded shuffle into disjoint train/val/test covering every sample."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    n = ds.samples
    order = np.random.default_rng(seed).permutation(n)
    n_train = round_half_away(fractions[0] * n)
    n_val = round_half_away(fractions[1] * n)
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    parts = (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])
    return tuple(
        WindDataset(
            features=ds.features[idx],
            feature_mins=ds.feature_mins,
            feature_maxs=ds.feature_maxs,
            farm_id=ds.farm_id,
        )
        for idx in parts
    )
