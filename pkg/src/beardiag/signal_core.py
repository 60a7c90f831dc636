"""Signal acquisition and frequency-domain alignment.

Raw recordings are cut into one-second segments, transformed with an
orthonormal DCT-II, padded or truncated to a fixed number of frequency
components, and rescaled to a fixed Euclidean norm.  Because every segment
spans exactly one second, coefficient k of the transform corresponds to
k/2 Hz regardless of the sensor's sampling rate, so representations from
different sensors line up bin by bin.  A query spectrum, a fault-free
reference spectrum, and their difference are stacked into the three-channel
representation consumed by the classifier.

All arithmetic here is 64-bit; 32-bit floats appear only in the segment
file format.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.fft

from .errors import (
    DegenerateSegmentError,
    EmptySignalError,
    FormatError,
    FrequencyRangeError,
    SegmentBoundsError,
    ShapeError,
)

VSEG_MAGIC = b"VSEG"


def _as_float_vector(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a 1-D sample vector, got shape {x.shape}")
    return x


@dataclass
class RawSignal:
    """A raw vibration recording with its sensor sampling rate."""

    samples: np.ndarray
    sample_rate_hz: int
    condition_id: int = 0

    def __post_init__(self) -> None:
        self.samples = _as_float_vector(self.samples)
        self.sample_rate_hz = int(self.sample_rate_hz)
        if self.sample_rate_hz < 1:
            raise ShapeError("sample_rate_hz must be >= 1")
        if self.condition_id < 0:
            raise ShapeError("condition_id must be >= 0")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass
class SignalSegment:
    """Exactly one second of samples cut from a raw recording."""

    samples: np.ndarray
    sample_rate_hz: int
    segment_index: int = 0
    condition_id: int = 0

    def __post_init__(self) -> None:
        self.samples = _as_float_vector(self.samples)
        self.sample_rate_hz = int(self.sample_rate_hz)
        if self.samples.size != self.sample_rate_hz:
            raise ShapeError(
                f"segment length {self.samples.size} != sample rate {self.sample_rate_hz}"
            )
        if self.segment_index < 0:
            raise SegmentBoundsError("segment_index must be >= 0")


@dataclass(frozen=True)
class DcnConfig:
    """Target component count and amplitude scale of the aligned spectrum."""

    n_f: int = 24000
    beta: float = 0.01

    def __post_init__(self) -> None:
        if self.n_f < 1:
            raise ShapeError("n_f must be >= 1")
        if not self.beta > 0:
            raise ShapeError("beta must be > 0")

    @property
    def target_norm(self) -> float:
        return self.beta * math.sqrt(self.n_f)


@dataclass
class FrequencyRep:
    """Aligned, norm-scaled frequency representation of one segment."""

    coefficients: np.ndarray
    n_f: int

    def __post_init__(self) -> None:
        self.coefficients = _as_float_vector(self.coefficients)
        if self.coefficients.size != self.n_f:
            raise ShapeError(
                f"coefficient count {self.coefficients.size} != n_f {self.n_f}"
            )


@dataclass
class UnifiedRepresentation:
    """Stacked [query, reference, residual] channels, shape (3, n_f)."""

    channels: np.ndarray

    def __post_init__(self) -> None:
        self.channels = np.asarray(self.channels, dtype=np.float64)
        if self.channels.ndim != 2 or self.channels.shape[0] != 3:
            raise ShapeError(f"expected shape (3, n_f), got {self.channels.shape}")

    @property
    def query(self) -> np.ndarray:
        return self.channels[0]

    @property
    def reference(self) -> np.ndarray:
        return self.channels[1]

    @property
    def residual(self) -> np.ndarray:
        return self.channels[2]


def segment(raw: RawSignal, m: int) -> SignalSegment:
    """Cut the m-th non-overlapping one-second segment out of a recording."""
    s = raw.sample_rate_hz
    if m < 0:
        raise SegmentBoundsError(f"segment index must be >= 0, got {m}")
    if (m + 1) * s > raw.samples.size:
        raise SegmentBoundsError(
            f"segment {m} needs samples up to {(m + 1) * s}, "
            f"recording has {raw.samples.size}"
        )
    chunk = raw.samples[m * s : (m + 1) * s].copy()
    return SignalSegment(chunk, s, segment_index=m, condition_id=raw.condition_id)


def segment_all(raw: RawSignal) -> list[SignalSegment]:
    """All full one-second segments; a trailing partial second is dropped."""
    count = raw.samples.size // raw.sample_rate_hz
    if count == 0:
        raise EmptySignalError(
            f"recording of {raw.samples.size} samples is shorter than one second "
            f"at {raw.sample_rate_hz} Hz"
        )
    return [segment(raw, m) for m in range(count)]


def dct(x) -> np.ndarray:
    """Orthonormal DCT-II of a real vector (fast transform)."""
    x = _as_float_vector(x)
    if x.size == 0:
        raise EmptySignalError("cannot transform an empty vector")
    return scipy.fft.dct(x, type=2, norm="ortho")


def dct_direct(x, block: int = 256) -> np.ndarray:
    """Orthonormal DCT-II evaluated directly from its defining sum.

    Quadratic cost; this is the independent correctness oracle for
    :func:`dct`.  The cosine matrix is built blockwise from exact integer
    phase numerators reduced mod 4n, so entries are accurate to ~1 ulp even
    for n around 10^5, and the O(n^2) work runs as two matrix products.
    """
    x = _as_float_vector(x)
    n = x.size
    if n == 0:
        raise EmptySignalError("cannot transform an empty vector")

    t_odd = 2 * np.arange(n, dtype=np.int64) + 1
    period = 4 * n

    def cos_sin_rows(ks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        # angle(k, t) = pi * k * (2t+1) / (2n); reduce k*(2t+1) mod 4n exactly
        phase = (ks[:, None] * t_odd[None, :]) % period
        ang = phase * (np.pi / (2.0 * n))
        return np.cos(ang), np.sin(ang)

    block = max(1, min(block, n))
    n_blocks = -(-n // block)
    # cos((jB + i) a) = cos(jB a) cos(i a) - sin(jB a) sin(i a), so the full
    # n x n product collapses to two (n_blocks x n) @ (n x block) products.
    cos_lo, sin_lo = cos_sin_rows(np.arange(block, dtype=np.int64))
    cos_hi, sin_hi = cos_sin_rows(block * np.arange(n_blocks, dtype=np.int64))
    y = (cos_hi * x) @ cos_lo.T - (sin_hi * x) @ sin_lo.T
    y = y.reshape(-1)[:n]

    y *= math.sqrt(2.0 / n)
    y[0] *= math.sqrt(0.5)
    return y


def normalize(x, beta: float) -> np.ndarray:
    """Rescale a vector to Euclidean norm beta * sqrt(len(x))."""
    x = _as_float_vector(x)
    if x.size == 0:
        raise EmptySignalError("cannot normalize an empty vector")
    norm = float(np.linalg.norm(x))
    if norm == 0.0:
        raise DegenerateSegmentError(
            "all-zero input: amplitude normalization is undefined "
            "(zero vibration indicates a dead sensor, not a healthy bearing)"
        )
    return (beta * math.sqrt(x.size) / norm) * x


def dcn(seg: SignalSegment, cfg: DcnConfig) -> FrequencyRep:
    """Discrete cosine normalization of one segment.

    The spectrum is truncated (sampling rate >= n_f) or zero-padded
    (sampling rate < n_f) to exactly n_f components, then norm-scaled.
    The normalization always sees a length-n_f vector, so the output norm
    is beta * sqrt(n_f) for every input rate.
    """
    y = dct(seg.samples)
    if seg.sample_rate_hz >= cfg.n_f:
        z = y[: cfg.n_f]
    else:
        z = np.concatenate([y, np.zeros(cfg.n_f - seg.sample_rate_hz)])
    return FrequencyRep(normalize(z, cfg.beta), cfg.n_f)


def unify(query: FrequencyRep, reference: FrequencyRep) -> UnifiedRepresentation:
    """Stack query, reference, and their residual into one 3 x n_f matrix."""
    if query.n_f != reference.n_f:
        raise ShapeError(
            f"query n_f {query.n_f} != reference n_f {reference.n_f}"
        )
    channels = np.empty((3, query.n_f), dtype=np.float64)
    channels[0] = query.coefficients
    channels[1] = reference.coefficients
    channels[2] = query.coefficients - reference.coefficients
    return UnifiedRepresentation(channels)


def frequency_bin_of_hz(f_hz: float, n_f: int = 24000) -> int:
    """Coefficient index holding frequency f for a one-second window.

    Bin k corresponds to k/2 Hz, so the index is round(2 f) with halves
    rounded away from zero.
    """
    if f_hz < 0:
        raise FrequencyRangeError(f"frequency must be >= 0, got {f_hz}")
    if f_hz > n_f / 2:
        raise FrequencyRangeError(
            f"{f_hz} Hz exceeds the representable range ({n_f / 2} Hz at n_f={n_f})"
        )
    return int(math.floor(2.0 * f_hz + 0.5))


def write_vseg(path, samples, sample_rate_hz: int) -> None:
    """Write samples as a VSEG file (f32 payload, little endian)."""
    x = _as_float_vector(samples)
    payload = x.astype("<f4").tobytes()
    header = VSEG_MAGIC + struct.pack("<II", int(sample_rate_hz), x.size)
    Path(path).write_bytes(header + payload)


def read_vseg(path) -> tuple[np.ndarray, int]:
    """Read a VSEG file; returns (samples as float64, sample_rate_hz)."""
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != VSEG_MAGIC:
        raise FormatError(f"{path}: not a VSEG file")
    rate, count = struct.unpack("<II", blob[4:12])
    expected = 12 + 4 * count
    if len(blob) != expected:
        raise FormatError(
            f"{path}: payload truncated or padded ({len(blob)} bytes, expected {expected})"
        )
    samples = np.frombuffer(blob, dtype="<f4", offset=12, count=count)
    return samples.astype(np.float64), int(rate)
