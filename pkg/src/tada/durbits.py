"""Gray-coded analog-bit codec for frame counts and flow-target packing.

Integers are gray-coded most-significant-bit first, mapped to {-1, +1}
analog values, and concatenated after the latent vector to form the
composite regression target ``[s | analog(gray(f_before)) | analog(gray(f_after))]``.
Decoding quantizes with a strict positive-sign rule and inverts the gray
code by prefix XOR.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError

DEFAULT_BITS = 8


def gray_encode(n: int, b: int = DEFAULT_BITS) -> np.ndarray:
    """Gray code of ``n`` as ``b`` bits, most significant first."""
    n = int(n)
    if not 0 <= n < (1 << b):
        raise ValidationError(f"gray_encode: {n} out of range for {b} bits")
    g = n ^ (n >> 1)
    return np.array([(g >> (b - 1 - i)) & 1 for i in range(b)], dtype=np.int64)


def gray_decode(bits) -> int:
    """Invert :func:`gray_encode` via prefix XOR over MSB-first bits."""
    bits = np.asarray(bits, dtype=np.int64)
    n = 0
    acc = 0
    for bit in bits.tolist():
        acc ^= bit
        n = (n << 1) | acc
    return n


def to_analog(bits) -> np.ndarray:
    """Map bits {0, 1} to analog values {-1.0, +1.0}."""
    bits = np.asarray(bits)
    return np.where(bits > 0, 1.0, -1.0)


def quantize(x) -> np.ndarray:
    """Map real values to bits with the strict rule x > 0 -> 1, else 0."""
    return (np.asarray(x) > 0).astype(np.int64)


def encode_duration(f: int, b: int = DEFAULT_BITS) -> np.ndarray:
    return to_analog(gray_encode(f, b))


def decode_duration(x) -> int:
    return gray_decode(quantize(x))


def pack(s, f_before: int, f_after: int, b: int = DEFAULT_BITS) -> np.ndarray:
    """Compose the flow target [s | analog bits of f_before | of f_after]."""
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    return np.concatenate([s, encode_duration(f_before, b), encode_duration(f_after, b)])


def unpack(y, d: int, b: int = DEFAULT_BITS) -> tuple[np.ndarray, int, int]:
    """Split a flow vector back into (s, f_before, f_after)."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size != d + 2 * b:
        raise ValidationError(f"unpack: vector width {y.size} != d + 2b = {d + 2 * b}")
    s = y[:d]
    f_before = decode_duration(y[d : d + b])
    f_after = decode_duration(y[d + b :])
    return s, f_before, f_after


def durations_from_positions(p, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Unassigned-frame counts before and after each aligned position.

    ``f_before[i] = p_i - p_{i-1} - 1`` (with ``p_0 = 0``) and
    ``f_after[i] = p_{i+1} - p_i - 1`` (with ``p_{L+1} = T + 1``), so
    ``f_after[i] == f_before[i+1]`` holds by construction.
    """
    p = np.asarray(p, dtype=np.int64)
    ext = np.concatenate([[0], p, [T + 1]])
    gaps = np.diff(ext) - 1
    return gaps[:-1], gaps[1:]


def positions_from_durations(f_before, f_after) -> tuple[np.ndarray, int]:
    """Rebuild aligned positions and total frame count from gap counts.

    When ``f_after[i] != f_before[i+1]`` the later sample ``f_before[i+1]``
    wins, matching the decode-time reconciliation rule.
    """
    f_before = np.asarray(f_before, dtype=np.int64)
    f_after = np.asarray(f_after, dtype=np.int64)
    if f_before.shape != f_after.shape or f_before.ndim != 1 or f_before.size == 0:
        raise ValidationError("positions_from_durations: need equal-length non-empty gap arrays")
    positions = np.empty(f_before.size, dtype=np.int64)
    positions[0] = f_before[0] + 1
    for i in range(1, f_before.size):
        positions[i] = positions[i - 1] + f_before[i] + 1
    T = int(positions[-1] + f_after[-1])
    return positions, T


def chain_consistency(f_before, f_after) -> float:
    """Fraction of adjacent pairs satisfying f_after[i] == f_before[i+1]."""
    f_before = np.asarray(f_before, dtype=np.int64)
    f_after = np.asarray(f_after, dtype=np.int64)
    if f_before.size <= 1:
        return 1.0
    return float(np.mean(f_after[:-1] == f_before[1:]))
