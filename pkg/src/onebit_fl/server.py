"""Server-side participant sampling, optimal sign aggregation, and the
consensus wire format."""

from __future__ import annotations

import struct

import numpy as np

from .errors import ConfigError, PayloadError
from .sketch import ConsensusVector, OneBitSketch

CONSENSUS_HEADER = struct.Struct("<Q")
# Two-bit trit codes, four per byte, little-endian within the byte.
_CODE_ZERO, _CODE_POS, _CODE_NEG = 0, 1, 2


def sample_clients(num_clients: int, num_sampled: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform without-replacement draw of participant ids, sorted for a
    stable iteration order."""
    if not 1 <= num_sampled <= num_clients:
        raise ConfigError(f"cannot sample {num_sampled} of {num_clients} clients")
    picked = rng.choice(num_clients, size=num_sampled, replace=False)
    return np.sort(picked.astype(np.int64))


def aggregate(sketches) -> ConsensusVector:
    """Weighted majority vote over one-bit sketches.

    Takes ``(sketch, weight)`` pairs and returns ``sign(sum_k p_k z_k)``
    with ties mapped to 0: the exact minimizer of the weighted
    sign-disagreement objective, invariant to positive rescaling of the
    weights and to the order of the list.
    """
    sketches = list(sketches)
    if not sketches:
        raise ValueError("aggregate needs at least one sketch")
    m = sketches[0][0].m
    tally = np.zeros(m)
    for sketch, weight in sketches:
        if sketch.m != m:
            raise ValueError(f"sketch dimension mismatch: {sketch.m} != {m}")
        if not weight > 0:
            raise ValueError(f"weights must be positive, got {weight}")
        tally += float(weight) * sketch.values()
    return ConsensusVector(np.sign(tally).astype(np.int8))


def force_ties_positive(v: ConsensusVector) -> ConsensusVector:
    """Strict one-bit downlink: tied coordinates become +1."""
    entries = np.array(v.entries)
    entries[entries == 0] = 1
    return ConsensusVector(entries)


def consensus_payload_bits(m: int, strict_onebit: bool) -> int:
    """Ledger bits per consensus recipient: m one-bit entries in strict
    mode, 2m trit bits otherwise."""
    return m if strict_onebit else 2 * m


def encode_consensus(v: ConsensusVector) -> bytes:
    """Wire message: 8-byte little-endian m header, then m two-bit codes
    packed four per byte (00 -> 0, 01 -> +1, 10 -> -1)."""
    codes = np.zeros(v.m, dtype=np.uint8)
    codes[v.entries == 1] = _CODE_POS
    codes[v.entries == -1] = _CODE_NEG
    pad = (-v.m) % 4
    if pad:
        codes = np.concatenate([codes, np.zeros(pad, dtype=np.uint8)])
    quads = codes.reshape(-1, 4)
    packed = quads[:, 0] | (quads[:, 1] << 2) | (quads[:, 2] << 4) | (quads[:, 3] << 6)
    return CONSENSUS_HEADER.pack(v.m) + packed.astype(np.uint8).tobytes()


def decode_consensus(buf: bytes) -> ConsensusVector:
    if len(buf) < CONSENSUS_HEADER.size:
        raise PayloadError(f"consensus message shorter than the {CONSENSUS_HEADER.size}-byte header")
    (m,) = CONSENSUS_HEADER.unpack(buf[: CONSENSUS_HEADER.size])
    body = buf[CONSENSUS_HEADER.size:]
    expected = (m + 3) // 4
    if len(body) != expected:
        raise PayloadError(f"consensus payload for m={m} must be {expected} bytes, got {len(body)}")
    raw = np.frombuffer(body, dtype=np.uint8)
    codes = np.empty(expected * 4, dtype=np.uint8)
    codes[0::4] = raw & 3
    codes[1::4] = (raw >> 2) & 3
    codes[2::4] = (raw >> 4) & 3
    codes[3::4] = (raw >> 6) & 3
    if (codes[:m] == 3).any():
        first = int(np.argmax(codes[:m] == 3))
        raise PayloadError(f"invalid trit code 11 at coordinate {first}")
    if (codes[m:] != 0).any():
        raise PayloadError("non-zero padding trits in consensus payload")
    entries = np.zeros(m, dtype=np.int8)
    entries[codes[:m] == _CODE_POS] = 1
    entries[codes[:m] == _CODE_NEG] = -1
    return ConsensusVector(entries)
