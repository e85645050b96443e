"""Schnorr-style non-interactive proof of knowledge of the noise seed.

The prover shows knowledge of the secret seed s behind the public
commitment h_s = g^s mod p, with the hash-derived challenge bound to the
digests of the noised and clean parameter sets, so a proof cannot be
replayed against a different upload.
"""

import hashlib
import struct
from dataclasses import dataclass

from .params import ModelParams, ParamDigest, digest

__all__ = [
    "GroupParams",
    "NizkSecret",
    "NizkProof",
    "GROUP_TEST_TINY",
    "GROUP_512",
    "GROUP_2048",
    "mod_pow",
    "nizk_prove",
    "nizk_verify",
    "encode_proof",
    "decode_proof",
]


def mod_pow(base: int, exponent: int, modulus: int) -> int:
    """Montgomery-ladder square-and-multiply: both operations every bit."""
    if modulus <= 0:
        raise ValueError("modulus must be positive")
    if exponent < 0:
        raise ValueError("negative exponent unsupported")
    r0, r1 = 1, base % modulus
    for i in range(exponent.bit_length() - 1, -1, -1):
        if (exponent >> i) & 1:
            r0 = (r0 * r1) % modulus
            r1 = (r1 * r1) % modulus
        else:
            r1 = (r0 * r1) % modulus
            r0 = (r0 * r0) % modulus
    return r0


@dataclass(frozen=True)
class GroupParams:
    """Prime-order subgroup of the integers mod p with generator g."""

    p: int
    q: int
    g: int

    def __post_init__(self):
        if self.p <= 3 or self.q <= 1:
            raise ValueError("p and q must be primes > 1")
        if (self.p - 1) % self.q != 0:
            raise ValueError("q must divide p-1")
        if not (1 < self.g < self.p):
            raise ValueError("generator out of range")
        if mod_pow(self.g, self.q, self.p) != 1:
            raise ValueError("g does not generate an order-q subgroup")


# Tiny group from the worked verification example; never use outside tests.
GROUP_TEST_TINY = GroupParams(p=23, q=11, g=2)

# 512-bit group with 256-bit prime order subgroup: fast enough for test
# suites while keeping real multi-precision arithmetic in play.
GROUP_512 = GroupParams(
    p=int(
        "a2d5eb02f0199b1871a2babb09c903413e39cc5e482fea1d8535279197d66dea"
        "cee2abe01d8ad4980c742d5483806244609ee381eb5646ab7b2ec61856a35af1",
        16,
    ),
    q=int("a815531833f520ed0e93d7ebcfd8b86f8cbf359a3d7e6627732182069018be15", 16),
    g=int(
        "28cc77b1188b34b3481a665fabdab1df88cbcdc7ce56d216ad2771c1fd1c2dfa"
        "875be171142d907e84fefdf55453a06bb5713ab10b2c5bb0047e7345c263128e",
        16,
    ),
)

# Default production group: 2048-bit modulus, 256-bit prime order subgroup.
GROUP_2048 = GroupParams(
    p=int(
        "ab6af801eee5c0de5d3ba5cf142a26a5bfb987f9d74ea35d2276f54259cf1b0e"
        "3a893c19bdfa1dd68a37c62c0e75b6dc569292f8b7d5c987988bcb4688806854"
        "14942780c96e0ee2bd40a7301397e82cc9db251155768e2ab58446f3874c693f"
        "a287217a7942662fbb112e07da55f1ba30ddb6162602a33a81e9830b4aec3732"
        "91babeff90e7e1807b438af962aad7800399f7f195ad72ce2a3577ab76e5deed"
        "e3c6d157263a2528e75a1c457101a90ba2d4ccf1703c5553e4fe78855e3d85a3"
        "6bd2c7dea12ce96aff79dac3fbeb4bdf548c59bb62296200b46211a3c8aca9d0"
        "12c473bf3740e9183991bfb18df189a7a862cb154c84eb6f2ecb81ab682bc4c9",
        16,
    ),
    q=int("baa7235c88e80ee33719c35052bd59cbad72b4cc9f53a0f99717b0c12ea67dbb", 16),
    g=int(
        "88ed1ab4cf02dfb5d63a3f028780e9683c3ce9ea0278c4169654ed4a95b72d83"
        "2de44426bc74b91ee5675ac428cbcb31d9273218136bf16181a33f9234314ed9"
        "06a7732cf34db637cab1823467a76ef0d1645daa0a2ad698dd6828b2261f5c65"
        "51e65acd5c33d1dca622696d7daa7d7a84be24802951489a6f2caad08c7fad3b"
        "d0cd847b56eee7eda312dad76c65d43e2607900cc099d7d96b1c5f56dfd5e55d"
        "1aa9179e9a823db9b0c8fcdb9756e912db7a049a5e169642d24974ecb0538622"
        "58ff1994494838a7097eae95b200a4fe9c1fa48ff02a415b8b2adf560d632edb"
        "3263b8d635f192c30b0d89e8e6e43031fbc4d2ced4757e778cf8a8f272150d03",
        16,
    ),
)


@dataclass(frozen=True)
class NizkSecret:
    """Noise seed (the witness) plus a per-proof nonce, both in [1, q-1]."""

    seed: int
    nonce: int

    def validate(self, grp: GroupParams) -> None:
        if not (1 <= self.seed <= grp.q - 1):
            raise ValueError("seed out of range [1, q-1]")
        if not (1 <= self.nonce <= grp.q - 1):
            raise ValueError("nonce out of range [1, q-1]")


@dataclass(frozen=True)
class NizkProof:
    """Commitment/challenge/response bundle bound to two parameter digests."""

    t_k: int
    r_s: int
    c_s: int
    h_s: int
    digest_noised: ParamDigest
    digest_clean: ParamDigest


def _int_bytes(n: int) -> bytes:
    """Minimal big-endian encoding; 0 encodes as a single zero byte."""
    return n.to_bytes(max(1, (n.bit_length() + 7) // 8), "big")


def _challenge(t_k: int, digest_noised: ParamDigest, digest_clean: ParamDigest, q: int) -> int:
    h = hashlib.sha256()
    h.update(_int_bytes(t_k))
    h.update(digest_noised.value)
    h.update(digest_clean.value)
    return int.from_bytes(h.digest(), "big") % q


def nizk_prove(
    secret: NizkSecret,
    grp: GroupParams,
    noised: ModelParams,
    clean: ModelParams,
) -> NizkProof:
    """Commit, derive the challenge by hashing, respond."""
    secret.validate(grp)
    h_s = mod_pow(grp.g, secret.seed, grp.p)
    t_k = mod_pow(grp.g, secret.nonce, grp.p)
    d_noised = digest(noised)
    d_clean = digest(clean)
    c_s = _challenge(t_k, d_noised, d_clean, grp.q)
    r_s = (secret.nonce + c_s * secret.seed) % grp.q
    return NizkProof(t_k=t_k, r_s=r_s, c_s=c_s, h_s=h_s, digest_noised=d_noised, digest_clean=d_clean)


def nizk_verify(proof: NizkProof, grp: GroupParams) -> bool:
    """True iff g^r_s = t_k * h_s^c_s (mod p) and the challenge recomputes.

    All malformed inputs return False; verification never raises.
    """
    try:
        if not (0 < proof.t_k < grp.p and 0 < proof.h_s < grp.p):
            return False
        if not (0 <= proof.r_s < grp.q and 0 <= proof.c_s < grp.q):
            return False
        if proof.c_s != _challenge(proof.t_k, proof.digest_noised, proof.digest_clean, grp.q):
            return False
        lhs = mod_pow(grp.g, proof.r_s, grp.p)
        rhs = (proof.t_k * mod_pow(proof.h_s, proof.c_s, grp.p)) % grp.p
        return lhs == rhs
    except (AttributeError, TypeError, ValueError):
        return False


def encode_proof(proof: NizkProof) -> bytes:
    """Length-prefixed big-endian integers t_k, r_s, c_s, h_s, then both digests."""
    out = bytearray()
    for n in (proof.t_k, proof.r_s, proof.c_s, proof.h_s):
        b = _int_bytes(n)
        out += struct.pack(">H", len(b))
        out += b
    out += proof.digest_noised.value
    out += proof.digest_clean.value
    return bytes(out)


def decode_proof(data: bytes) -> NizkProof:
    fields = []
    pos = 0
    try:
        for _ in range(4):
            (n,) = struct.unpack_from(">H", data, pos)
            pos += 2
            if pos + n > len(data):
                raise ValueError("truncated proof field")
            fields.append(int.from_bytes(data[pos : pos + n], "big"))
            pos += n
        if pos + 64 != len(data):
            raise ValueError("bad proof length")
        d_noised = ParamDigest(data[pos : pos + 32])
        d_clean = ParamDigest(data[pos + 32 : pos + 64])
    except struct.error as exc:
        raise ValueError("truncated proof") from exc
    t_k, r_s, c_s, h_s = fields
    return NizkProof(t_k=t_k, r_s=r_s, c_s=c_s, h_s=h_s, digest_noised=d_noised, digest_clean=d_clean)
