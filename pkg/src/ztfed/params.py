"""Canonical model-parameter containers, arithmetic, and bit-exact hashing.

Every other part of the system exchanges parameters through these types;
the canonical serialization defined by :func:`digest` is the wire identity
of a parameter set (values hashed as little-endian float32, see README).
"""

import hashlib
import math
import struct
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "LayerSpec",
    "ModelParams",
    "ParamDigest",
    "flatten",
    "unflatten",
    "l2_norm",
    "digest",
]


@dataclass(frozen=True)
class LayerSpec:
    """Name and shape of one named parameter array."""

    name: str
    shape: tuple[int, ...]

    def __post_init__(self):
        if not self.name:
            raise ValueError("layer name must be non-empty")
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        if not self.shape or any(d <= 0 for d in self.shape):
            raise ValueError(f"layer {self.name!r}: shape must be positive, got {self.shape}")

    @property
    def size(self) -> int:
        return math.prod(self.shape)


class ModelParams:
    """Ordered, immutable collection of named float arrays.

    Arrays are stored as read-only float64 in the declared layer order;
    NaN/Inf values are rejected at construction so poisoned updates fail
    before they reach crypto or aggregation.
    """

    __slots__ = ("_layers",)

    def __init__(self, layers: Iterable[tuple[LayerSpec, np.ndarray]]):
        seen = set()
        stored = []
        for spec, arr in layers:
            if spec.name in seen:
                raise ValueError(f"duplicate layer name {spec.name!r}")
            seen.add(spec.name)
            a = np.asarray(arr, dtype=np.float64)
            if a.size != spec.size:
                raise ValueError(
                    f"layer {spec.name!r}: array has {a.size} values, spec shape "
                    f"{spec.shape} needs {spec.size}"
                )
            if not np.all(np.isfinite(a)):
                raise ValueError(f"layer {spec.name!r}: non-finite values rejected")
            a = np.ascontiguousarray(a.reshape(spec.shape))
            a.setflags(write=False)
            stored.append((spec, a))
        self._layers = tuple(stored)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ModelParams":
        """Build from a name->array mapping, preserving mapping order."""
        return cls((LayerSpec(name, np.shape(a)), a) for name, a in arrays.items())

    @property
    def layers(self) ->tuple[tuple[LayerSpec, np.ndarray], ...]:
        return self._layers

    @property
    def specs(self) -> tuple[LayerSpec, ...]:
        return tuple(spec for spec, _ in self._layers)

    def to_dict(self) -> dict[str, np.ndarray]:
        return {spec.name: arr for spec, arr in self._layers}

    @property
    def total_size(self) -> int:
        return sum(spec.size for spec, _ in self._layers)

    def __len__(self) -> int:
        return len(self._layers)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.specs == other.specs and all(
            np.array_equal(a, b) for (_, a), (_, b) in zip(self._layers, other._layers)
        )

    def __repr__(self) -> str:
        inner = ", ".join(f"{s.name}{s.shape}" for s, _ in self._layers)
        return f"ModelParams({inner})"


@dataclass(frozen=True)
class ParamDigest:
    """32-byte hash identifying a parameter set on the wire."""

    value: bytes

    def __post_init__(self):
        if len(self.value) != 32:
            raise ValueError("digest must be 32 bytes")

    @property
    def hex(self) -> str:
        return self.value.hex()


def flatten(p: ModelParams) -> np.ndarray:
    """Concatenate all layer arrays (declared order, C order) into one vector."""
    if len(p) == 0:
        return np.zeros(0)
    return np.concatenate([arr.ravel() for _, arr in p.layers])


def unflatten(vec: np.ndarray, specs: Sequence[LayerSpec]) -> ModelParams:
    """Inverse of :func:`flatten` for a fixed layer layout."""
    vec = np.asarray(vec, dtype=np.float64).ravel()
    total = sum(s.size for s in specs)
    if vec.size != total:
        raise ValueError(f"vector has {vec.size} values, specs need {total}")
    out, pos = [], 0
    for spec in specs:
        out.append((spec, vec[pos : pos + spec.size]))
        pos += spec.size
    return ModelParams(out)


def l2_norm(p: ModelParams) -> float:
    return float(np.sqrt(sum(float(np.sum(arr * arr)) for _, arr in p.layers)))


def canonical_bytes(p: ModelParams) -> bytes:
    """Canonical serialization: per layer in order, UTF-8 name bytes,
    big-endian uint32 value count, then every value as little-endian
    IEEE-754 float32. The float32 cast defines the wire identity even
    though arithmetic is float64."""
    out = bytearray()
    for spec, arr in p.layers:
        out += spec.name.encode("utf-8")
        out += struct.pack(">I", spec.size)
        out += arr.ravel().astype("<f4").tobytes()
    return bytes(out)


def digest(p: ModelParams) -> ParamDigest:
    """SHA-256 over :func:`canonical_bytes`; stable across runs and platforms."""
    return ParamDigest(hashlib.sha256(canonical_bytes(p)).digest())


def params_map(p: ModelParams, fn) -> ModelParams:
    """Apply `fn(array) -> array` layer-wise, keeping specs."""
    return ModelParams((spec, fn(arr)) for spec, arr in p.layers)


def params_add(a: ModelParams, b: ModelParams) -> ModelParams:
    _check_same_layout(a, b)
    return ModelParams((sa, xa + xb) for (sa, xa), (_, xb) in zip(a.layers, b.layers))


def params_sub(a: ModelParams, b: ModelParams) -> ModelParams:
    _check_same_layout(a, b)
    return ModelParams((sa, xa - xb) for (sa, xa), (_, xb) in zip(a.layers, b.layers))


def params_scale(p: ModelParams, c: float) -> ModelParams:
    return ModelParams((spec, arr * c) for spec, arr in p.layers)


def zeros_like(p: ModelParams) -> ModelParams:
    return ModelParams((spec, np.zeros(spec.shape)) for spec, _ in p.layers)


def _check_same_layout(a: ModelParams, b: ModelParams) -> None:
    if a.specs != b.specs:
        raise ValueError("parameter layouts differ")
