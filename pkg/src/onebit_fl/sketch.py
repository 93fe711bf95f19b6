"""Structured one-bit random sketching.

The projection chains an elementwise random sign flip, an orthonormal
Walsh-Hadamard transform, and a uniform row subsample, applied after
zero-padding the input up to the next power of two. Forward and adjoint
maps are matrix-free, costing O(n log n); no dense matrix is ever formed.
A sketch is the elementwise sign of the projected vector, packed one bit
per coordinate for transmission.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import rng as rngs
from .errors import ConfigError, NumericError, PayloadError

SKETCH_HEADER = struct.Struct("<Q")  # sketch message: 8-byte little-endian m, then payload


def next_power_of_two(n: int) -> int:
    if n < 1:
        raise ConfigError(f"dimension must be positive, got {n}")
    return 1 << (n - 1).bit_length()


@dataclass(frozen=True)
class SketchOperator:
    """Seeded projection shared by the server and every client.

    ``sign_flips`` and ``sample_indices`` are a pure function of
    ``(seed, n, m)``, so both endpoints of the channel regenerate the same
    operator from the broadcast seed without exchanging anything else.
    Instances are immutable (arrays are read-only) and safe to share
    across concurrently updating clients.
    """

    seed: int
    n: int
    n_pad: int
    m: int
    sign_flips: np.ndarray       # (n_pad,) float64 over {-1.0, +1.0}
    sample_indices: np.ndarray   # (m,) int64, distinct, sorted ascending
    scale: float                 # sqrt(n_pad / m)


def create_operator(seed: int, n: int, m: int) -> SketchOperator:
    """Build the projection for model dimension ``n`` and sketch dimension ``m``.

    Sign flips are i.i.d. uniform over {-1, +1}; the m output rows are
    drawn uniformly without replacement, which is what makes the Gram
    matrix of the padded operator an exact scaled identity. Two dedicated
    streams split off the seed: one for the flips, one for the rows.
    """
    n_pad = next_power_of_two(n)
    if not 1 <= m <= n_pad:
        raise ConfigError(f"sketch dimension m={m} must satisfy 1 <= m <= n_pad={n_pad}")
    flips = rngs.stream(seed, rngs.SIGN_FLIPS).integers(0, 2, size=n_pad)
    sign_flips = 2.0 * flips - 1.0
    rows = rngs.stream(seed, rngs.SAMPLE_INDICES).choice(n_pad, size=m, replace=False)
    sample_indices = np.sort(rows).astype(np.int64)
    sign_flips.setflags(write=False)
    sample_indices.setflags(write=False)
    return SketchOperator(
        seed=int(seed),
        n=int(n),
        n_pad=n_pad,
        m=int(m),
        sign_flips=sign_flips,
        sample_indices=sample_indices,
        scale=math.sqrt(n_pad / m),
    )


def fwht_in_place(x: np.ndarray) -> np.ndarray:
    """Orthonormal Walsh-Hadamard transform.

    Iterative in-place butterfly over a contiguous float64 array, so the
    stack depth stays constant for any length. The normalized transform is
    symmetric and involutive: applying it twice gives back the input.
    Raises ValueError unless the length is a power of two.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = x.shape[0] if x.ndim == 1 else 0
    if n == 0 or (n & (n - 1)) != 0:
        raise ValueError(f"FWHT requires a 1-d power-of-two length vector, got shape {x.shape}")
    h = 1
    while h < n:
        pairs = x.reshape(-1, 2, h)
        top = pairs[:, 0, :] + pairs[:, 1, :]
        bottom = pairs[:, 0, :] - pairs[:, 1, :]
        pairs[:, 0, :] = top
        pairs[:, 1, :] = bottom
        h *= 2
    x *= 1.0 / math.sqrt(n)
    return x


def forward(op: SketchOperator, w) -> np.ndarray:
    """Project an n-vector down to m coordinates: subsample(H (D pad(w))) * scale."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (op.n,):
        raise ValueError(f"expected input of shape ({op.n},), got {w.shape}")
    buf = np.zeros(op.n_pad)
    buf[: op.n] = w
    buf *= op.sign_flips
    fwht_in_place(buf)
    return op.scale * buf[op.sample_indices]


def adjoint(op: SketchOperator, v) -> np.ndarray:
    """Exact adjoint of :func:`forward`: truncate(D (H scatter(scale * v)))."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (op.m,):
        raise ValueError(f"expected input of shape ({op.m},), got {v.shape}")
    buf = np.zeros(op.n_pad)
    buf[op.sample_indices] = op.scale * v
    fwht_in_place(buf)
    buf *= op.sign_flips
    return buf[: op.n].copy()


def forward_padded(op: SketchOperator, w_pad) -> np.ndarray:
    """Forward map on the padded n_pad-dimensional domain (no zero pad step).

    On this domain the Gram matrix is exactly (n_pad/m) * I, which the
    spectral diagnostics exercise.
    """
    w_pad = np.asarray(w_pad, dtype=np.float64)
    if w_pad.shape != (op.n_pad,):
        raise ValueError(f"expected input of shape ({op.n_pad},), got {w_pad.shape}")
    buf = w_pad * op.sign_flips
    fwht_in_place(buf)
    return op.scale * buf[op.sample_indices]


def adjoint_padded(op: SketchOperator, v) -> np.ndarray:
    """Adjoint of :func:`forward_padded` (no truncation step)."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (op.m,):
        raise ValueError(f"expected input of shape ({op.m},), got {v.shape}")
    buf = np.zeros(op.n_pad)
    buf[op.sample_indices] = op.scale * v
    fwht_in_place(buf)
    buf *= op.sign_flips
    return buf


@dataclass(frozen=True)
class OneBitSketch:
    """Bit-packed sign vector, the uplink payload.

    Bit i of the payload lives in byte ``i // 8`` at position ``i % 8``
    (little-endian within the byte); 1 encodes +1 and 0 encodes -1.
    Padding bits in the final byte are always zero and are excluded from
    the communication ledger, which counts exactly ``m`` bits.
    """

    m: int
    bits: bytes

    @classmethod
    def from_values(cls, values) -> "OneBitSketch":
        values = np.asarray(values)
        packed = np.packbits(values > 0, bitorder="little")
        return cls(m=int(values.shape[0]), bits=packed.tobytes())

    def values(self) -> np.ndarray:
        """Decode to a {-1, +1} int8 vector of length m."""
        raw = np.frombuffer(self.bits, dtype=np.uint8)
        ones = np.unpackbits(raw, count=self.m, bitorder="little")
        return (2 * ones.astype(np.int8) - 1)

    @property
    def payload_bits(self) -> int:
        """Data bits for cost accounting (padding excluded)."""
        return self.m


def quantize(z) -> OneBitSketch:
    """One-bit quantization: +1 where z > 0, -1 where z < 0, +1 at exact zero.

    The zero tie-break keeps the uplink strictly in {-1, +1}; ties on the
    server side are handled separately by the consensus aggregation.
    """
    z = np.asarray(z, dtype=np.float64)
    if np.isnan(z).any():
        raise NumericError("NaN in sketch input")
    return OneBitSketch.from_values(np.where(z >= 0.0, 1, -1).astype(np.int8))


def serialize_sketch(sketch: OneBitSketch) -> bytes:
    """Payload bytes only; see :func:`encode_sketch_message` for the framed form."""
    return sketch.bits


def deserialize_sketch(data: bytes, m: int) -> OneBitSketch:
    expected = (m + 7) // 8
    if len(data) != expected:
        raise PayloadError(f"sketch payload for m={m} must be {expected} bytes, got {len(data)}")
    return OneBitSketch(m=int(m), bits=bytes(data))


def encode_sketch_message(sketch: OneBitSketch) -> bytes:
    """Wire message: 8-byte little-endian m header followed by the payload."""
    return SKETCH_HEADER.pack(sketch.m) + sketch.bits


def decode_sketch_message(buf: bytes) -> OneBitSketch:
    if len(buf) < SKETCH_HEADER.size:
        raise PayloadError(f"sketch message shorter than the {SKETCH_HEADER.size}-byte header")
    (m,) = SKETCH_HEADER.unpack(buf[: SKETCH_HEADER.size])
    return deserialize_sketch(buf[SKETCH_HEADER.size:], m)


@dataclass(frozen=True)
class ConsensusVector:
    """Server-aggregated sign vector broadcast to clients.

    Entries lie in {-1, 0, +1}; zero marks a tied vote. The all-zero
    vector is the legal round-0 state before any aggregation has happened.
    """

    entries: np.ndarray

    def __post_init__(self):
        e = np.array(self.entries, dtype=np.int8)
        if e.ndim != 1:
            raise ValueError(f"consensus entries must be a vector, got shape {e.shape}")
        if not np.isin(e, (-1, 0, 1)).all():
            raise ValueError("consensus entries must lie in {-1, 0, +1}")
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)

    @classmethod
    def zeros(cls, m: int) -> "ConsensusVector":
        return cls(np.zeros(m, dtype=np.int8))

    @property
    def m(self) -> int:
        return int(self.entries.shape[0])

    def as_float(self) -> np.ndarray:
        return self.entries.astype(np.float64)
