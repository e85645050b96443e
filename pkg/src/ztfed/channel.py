"""Compressed, authenticated parameter transport.

Top-magnitude sparsification, b-bit affine quantization, a normative
binary wire format, and AES-128-CBC with an encrypt-then-MAC HMAC tag.
The wire layout is documented field by field in the README; tests pin it
with byte-exact vectors.
"""

import hashlib
import hmac as hmac_mod
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .nizk import NizkProof, decode_proof, encode_proof
from .params import LayerSpec, ModelParams

__all__ = [
    "CompressionConfig",
    "CompressedLayer",
    "CompressedParams",
    "ChannelKey",
    "EncryptedMessage",
    "MacMismatch",
    "PaddingError",
    "DecodeError",
    "sparsify",
    "quantize",
    "dequantize",
    "compress",
    "encrypt_and_mac",
    "decrypt_and_verify",
    "pack_update",
    "unpack_update",
    "serialize_message",
    "deserialize_message",
    "message_size_bytes",
]

MAGIC = b"ZTF1"
_DIRECTION_BYTE = {"upload": 0x55, "download": 0x44}
_BYTE_DIRECTION = {v: k for k, v in _DIRECTION_BYTE.items()}
_ENC_RAW = 0
_ENC_COMPRESSED = 1


class ChannelError(Exception):
    pass


class MacMismatch(ChannelError):
    """Authentication tag did not verify; message is not trusted."""


class PaddingError(ChannelError):
    """Tag verified but padding is invalid; indicates a key-derivation bug."""


class DecodeError(ChannelError):
    """Malformed wire framing."""


@dataclass
class CompressionConfig:
    """Fraction of entries retained per layer and quantization bit width."""

    retain_fraction: float = 0.3
    bits: int = 4

    def __post_init__(self):
        if not (0 < self.retain_fraction <= 1):
            raise ValueError("retain_fraction must be in (0, 1]")
        if not (2 <= self.bits <= 16):
            raise ValueError("bits must be in [2, 16]")


@dataclass(frozen=True)
class CompressedLayer:
    spec: LayerSpec
    kept_indices: np.ndarray  # strictly ascending flat positions
    q_values: np.ndarray  # unsigned ints in [0, 2^bits - 1]
    scale: float
    zero_point: int


@dataclass(frozen=True)
class CompressedParams:
    layers: tuple[CompressedLayer, ...]
    bits: int

    @property
    def specs(self) -> tuple[LayerSpec, ...]:
        return tuple(layer.spec for layer in self.layers)


def sparsify(theta: ModelParams, retain_fraction: float) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per layer, the ceil(retain*n) largest-magnitude entries.

    Ties break toward the lower index; returned indices are ascending.
    """
    if not (0 < retain_fraction <= 1):
        raise ValueError("retain_fraction must be in (0, 1]")
    out = []
    for spec, arr in theta.layers:
        flat = arr.ravel()
        keep = int(np.ceil(retain_fraction * flat.size))
        # stable sort on -|v| keeps the lower index first among ties
        order = np.argsort(-np.abs(flat), kind="stable")[:keep]
        idx = np.sort(order)
        out.append((idx, flat[idx]))
    return out


def quantize(values: np.ndarray, bits: int) -> tuple[np.ndarray, float, int]:
    """Affine quantization onto [0, 2^bits - 1]; returns (q, scale, zero_point)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot quantize an empty value list")
    if not np.all(np.isfinite(values)):
        raise ValueError("non-finite values")
    lo, hi = float(values.min()), float(values.max())
    levels = (1 << bits) - 1
    scale = (hi - lo) / levels if hi > lo else 1.0
    zero_point = int(round(-lo / scale))
    q = np.clip(np.rint(values / scale) + zero_point, 0, levels).astype(np.uint16)
    return q, scale, zero_point


def compress(theta: ModelParams, cfg: CompressionConfig) -> CompressedParams:
    layers = []
    for (spec, _), (idx, vals) in zip(theta.layers, sparsify(theta, cfg.retain_fraction)):
        q, scale, zp = quantize(vals, cfg.bits)
        layers.append(CompressedLayer(spec=spec, kept_indices=idx, q_values=q, scale=scale, zero_point=zp))
    return CompressedParams(layers=tuple(layers), bits=cfg.bits)


def dequantize(c: CompressedParams) -> ModelParams:
    """Dense reconstruction: scale*(q - zero_point) at kept positions, 0 elsewhere."""
    out = []
    for layer in c.layers:
        size = layer.spec.size
        idx = np.asarray(layer.kept_indices, dtype=np.int64)
        if idx.size:
            if idx.min() < 0 or idx.max() >= size or np.any(np.diff(idx) <= 0):
                raise DecodeError(f"layer {layer.spec.name!r}: malformed kept indices")
        dense = np.zeros(size)
        dense[idx] = layer.scale * (layer.q_values.astype(np.float64) - layer.zero_point)
        out.append((layer.spec, dense.reshape(layer.spec.shape)))
    return ModelParams(out)


# --- bit packing -----------------------------------------------------------


def _pack_bits(values: np.ndarray, bits: int) -> bytes:
    """MSB-first bitstream, `bits` per value, zero-padded to a byte."""
    as16 = values.astype(">u2")
    all_bits = np.unpackbits(as16.view(np.uint8)).reshape(-1, 16)[:, 16 - bits :]
    return np.packbits(all_bits.ravel()).tobytes()


def _unpack_bits(data: bytes, count: int, bits: int) -> np.ndarray:
    need = count * bits
    raw = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
    if raw.size < need:
        raise DecodeError("bit payload too short")
    group = raw[:need].reshape(count, bits)
    full = np.zeros((count, 16), dtype=np.uint8)
    full[:, 16 - bits :] = group
    return np.frombuffer(np.packbits(full.ravel()).tobytes(), dtype=">u2").astype(np.uint16)


# --- wire format -----------------------------------------------------------


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DecodeError("truncated buffer")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _encode_layer_header(out: bytearray, spec: LayerSpec) -> None:
    name = spec.name.encode("utf-8")
    out += struct.pack(">H", len(name))
    out += name
    out += struct.pack(">B", len(spec.shape))
    for d in spec.shape:
        out += struct.pack(">I", d)


def _decode_layer_header(r: _Reader) -> LayerSpec:
    (name_len,) = r.unpack(">H")
    name = r.take(name_len).decode("utf-8")
    (ndim,) = r.unpack(">B")
    shape = tuple(r.unpack(">I")[0] for _ in range(ndim))
    return LayerSpec(name, shape)


def pack_update(
    payload: CompressedParams | ModelParams,
    proof: Optional[NizkProof] = None,
    direction: str = "upload",
) -> bytes:
    """Serialize a compressed (or raw, for ablations) parameter message.

    Layout (all integers big-endian): magic "ZTF1", direction byte,
    encoding byte (0 raw / 1 compressed), uint16 layer count, then per
    layer a name/shape header followed by either raw float32 values or
    uint32 kept count, bitwidth byte, kept-position bitmap, bit-packed
    quantized values, float64 scale and int32 zero point; finally a proof
    flag byte and, when present, the serialized proof.
    """
    if direction not in _DIRECTION_BYTE:
        raise ValueError(f"unknown direction {direction!r}")
    out = bytearray()
    out += MAGIC
    out += struct.pack(">B", _DIRECTION_BYTE[direction])
    if isinstance(payload, ModelParams):
        out += struct.pack(">BH", _ENC_RAW, len(payload.layers))
        for spec, arr in payload.layers:
            _encode_layer_header(out, spec)
            out += arr.ravel().astype(">f4").tobytes()
    else:
        out += struct.pack(">BH", _ENC_COMPRESSED, len(payload.layers))
        for layer in payload.layers:
            _encode_layer_header(out, layer.spec)
            size = layer.spec.size
            bitmap = np.zeros(size, dtype=np.uint8)
            bitmap[np.asarray(layer.kept_indices, dtype=np.int64)] = 1
            out += struct.pack(">IB", len(layer.kept_indices), payload.bits)
            out += np.packbits(bitmap).tobytes()
            out += _pack_bits(np.asarray(layer.q_values), payload.bits)
            out += struct.pack(">d", layer.scale)
            out += struct.pack(">i", layer.zero_point)
    if proof is not None:
        out += struct.pack(">B", 1)
        out += encode_proof(proof)
    else:
        out += struct.pack(">B", 0)
    return bytes(out)


def unpack_update(
    data: bytes,
) -> tuple[CompressedParams | ModelParams, Optional[NizkProof], str]:
    """Inverse of :func:`pack_update`; raises DecodeError on bad framing."""
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise DecodeError("bad magic")
    (dir_byte,) = r.unpack(">B")
    if dir_byte not in _BYTE_DIRECTION:
        raise DecodeError("bad direction byte")
    direction = _BYTE_DIRECTION[dir_byte]
    encoding, layer_count = r.unpack(">BH")

    payload: CompressedParams | ModelParams
    if encoding == _ENC_RAW:
        layers = []
        for _ in range(layer_count):
            spec = _decode_layer_header(r)
            vals = np.frombuffer(r.take(4 * spec.size), dtype=">f4").astype(np.float64)
            layers.append((spec, vals.reshape(spec.shape)))
        payload = ModelParams(layers)
    elif encoding == _ENC_COMPRESSED:
        comp_layers = []
        bits = None
        for _ in range(layer_count):
            spec = _decode_layer_header(r)
            kept, layer_bits = r.unpack(">IB")
            if not (2 <= layer_bits <= 16):
                raise DecodeError("bad bitwidth")
            if bits is None:
                bits = layer_bits
            elif bits != layer_bits:
                raise DecodeError("mixed bitwidths across layers")
            bitmap = np.unpackbits(
                np.frombuffer(r.take((spec.size + 7) // 8), dtype=np.uint8)
            )[: spec.size]
            idx = np.flatnonzero(bitmap).astype(np.int64)
            if idx.size != kept:
                raise DecodeError(f"layer {spec.name!r}: bitmap popcount != kept count")
            q = _unpack_bits(r.take((kept * layer_bits + 7) // 8), kept, layer_bits)
            (scale,) = r.unpack(">d")
            (zero_point,) = r.unpack(">i")
            comp_layers.append(
                CompressedLayer(spec=spec, kept_indices=idx, q_values=q, scale=scale, zero_point=zero_point)
            )
        payload = CompressedParams(layers=tuple(comp_layers), bits=bits if bits is not None else 0)
    else:
        raise DecodeError("unknown encoding byte")

    (proof_flag,) = r.unpack(">B")
    proof = None
    if proof_flag == 1:
        try:
            proof = decode_proof(r.data[r.pos :])
        except ValueError as exc:
            raise DecodeError(str(exc)) from exc
        r.pos = len(r.data)
    elif proof_flag != 0:
        raise DecodeError("bad proof flag")
    if r.pos != len(r.data):
        raise DecodeError("trailing bytes")
    return payload, proof, direction


# --- authenticated encryption ----------------------------------------------


@dataclass(frozen=True)
class ChannelKey:
    """32 random bytes; cipher and MAC keys are labeled hash derivations."""

    key: bytes

    def __post_init__(self):
        if len(self.key) != 32:
            raise ValueError("channel key must be 32 bytes")

    @property
    def cipher_key(self) -> bytes:
        return hashlib.sha256(b"ztfed/cipher" + self.key).digest()[:16]

    @property
    def mac_key(self) -> bytes:
        return hashlib.sha256(b"ztfed/mac" + self.key).digest()[:16]


@dataclass(frozen=True)
class EncryptedMessage:
    direction: str
    iv: bytes
    ciphertext: bytes
    mac_tag: bytes


def _pkcs7_pad(data: bytes) -> bytes:
    n = 16 - len(data) % 16
    return data + bytes([n]) * n


def _pkcs7_unpad(data: bytes) -> bytes:
    if not data or len(data) % 16:
        raise PaddingError("bad padded length")
    n = data[-1]
    if not (1 <= n <= 16) or data[-n:] != bytes([n]) * n:
        raise PaddingError("bad padding bytes")
    return data[:-n]


def _tag(key: ChannelKey, direction: str, iv: bytes, ciphertext: bytes) -> bytes:
    msg = bytes([_DIRECTION_BYTE[direction]]) + iv + ciphertext
    return hmac_mod.new(key.mac_key, msg, hashlib.sha256).digest()


def encrypt_and_mac(
    payload: bytes, key: ChannelKey, iv: bytes, direction: str = "upload"
) -> EncryptedMessage:
    """AES-128-CBC over PKCS#7-padded payload; HMAC-SHA-256 over dir||iv||ct."""
    if len(iv) != 16:
        raise ValueError("iv must be 16 bytes")
    if direction not in _DIRECTION_BYTE:
        raise ValueError(f"unknown direction {direction!r}")
    enc = Cipher(algorithms.AES(key.cipher_key), modes.CBC(iv)).encryptor()
    ciphertext = enc.update(_pkcs7_pad(payload)) + enc.finalize()
    return EncryptedMessage(
        direction=direction, iv=iv, ciphertext=ciphertext, mac_tag=_tag(key, direction, iv, ciphertext)
    )


def decrypt_and_verify(msg: EncryptedMessage, key: ChannelKey) -> bytes:
    """MAC first (constant-time compare), only then decrypt and unpad."""
    expected = _tag(key, msg.direction, msg.iv, msg.ciphertext)
    if not hmac_mod.compare_digest(expected, msg.mac_tag):
        raise MacMismatch("authentication tag mismatch")
    dec = Cipher(algorithms.AES(key.cipher_key), modes.CBC(msg.iv)).decryptor()
    return _pkcs7_unpad(dec.update(msg.ciphertext) + dec.finalize())


def serialize_message(msg: EncryptedMessage) -> bytes:
    return (
        bytes([_DIRECTION_BYTE[msg.direction]])
        + msg.iv
        + struct.pack(">I", len(msg.ciphertext))
        + msg.ciphertext
        + msg.mac_tag
    )


def deserialize_message(data: bytes) -> EncryptedMessage:
    r = _Reader(data)
    (dir_byte,) = r.unpack(">B")
    if dir_byte not in _BYTE_DIRECTION:
        raise DecodeError("bad direction byte")
    iv = r.take(16)
    (ct_len,) = r.unpack(">I")
    ciphertext = r.take(ct_len)
    tag = r.take(32)
    if r.pos != len(data):
        raise DecodeError("trailing bytes")
    return EncryptedMessage(direction=_BYTE_DIRECTION[dir_byte], iv=iv, ciphertext=ciphertext, mac_tag=tag)


def message_size_bytes(msg: EncryptedMessage | bytes) -> int:
    """Exact transmitted size of an encrypted message or plaintext payload."""
    if isinstance(msg, EncryptedMessage):
        return len(serialize_message(msg))
    return len(msg)
