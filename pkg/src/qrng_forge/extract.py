"""Min-entropy estimation and Toeplitz-hashing randomness extraction.

The extractor output block y is the GF(2) product T @ x of an m x n
Toeplitz matrix with the raw block, where T[i][j] = seed[m-1-i+j] over an
(n+m-1)-bit seed. Two internally different but bit-identical evaluation
paths sit behind one interface:

  * small blocks (n <= 32768): a byte-table ("four Russians") kernel that
    XOR-accumulates precomputed shifted seed combinations, JIT-compiled
    when numba is available;
  * large blocks: float64 FFT convolution with the seed transform cached.
    Column sums are bounded by n, so rounding stays 8+ orders of magnitude
    below 1/2; a guard raises if the margin ever degrades.

Output sizing follows the leftover-hash budget m = floor(n*H - 2*log2(1/eps)).
One seed serves every block of a stream: Toeplitz hashing is a strong
extractor, so seed reuse across blocks is sound.
"""

from __future__ import annotations

import math
import secrets
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import fft as _fft

from .timetags import BitSequence

try:  # pragma: no cover
    import numba
except ImportError:  # pragma: no cover
    numba = None

#: Largest input block handled by the byte-table kernel.
FR_MAX_N = 1 << 15

#: Block length for the per-block worst-case entropy scan.
ENTROPY_BLOCK = 10**6


class BlockTooSmallError(ValueError):
    """n * h_min does not exceed the 2*log2(1/eps) security cost."""


class SeedError(ValueError):
    """Seed material shorter than the required n + m - 1 bits."""


class ToeplitzPrecisionError(RuntimeError):
    """FFT rounding margin degraded; results would not be trustworthy."""


@dataclass(frozen=True)
class EntropyReport:
    """Min-entropy summary of a bit sequence.

    ``h_min_per_bit`` is -log2(p_max) from the full-sequence empirical
    frequencies; ``per_block_min`` is the worst value over consecutive
    10^6-bit blocks (the whole sequence when shorter). ``degenerate``
    flags an all-equal input, which carries zero extractable entropy.
    """

    h_min_per_bit: float
    p_max: float
    n_bits: int
    per_block_min: float
    degenerate: bool = False


def _as_bit_array(bits) -> np.ndarray:
    if isinstance(bits, BitSequence):
        return bits.to_bits()
    arr = np.asarray(bits, dtype=np.uint8)
    if arr.size and arr.max() > 1:
        raise ValueError("bits must be 0/1")
    return arr


def min_entropy(bits) -> EntropyReport:
    """Empirical min-entropy of a bit sequence (needs >= 10^4 bits)."""
    arr = _as_bit_array(bits)
    n = arr.size
    if n < 10**4:
        raise ValueError(f"min_entropy needs >= 1e4 bits, got {n}")
    ones = int(arr.sum())
    p1 = ones / n
    p_max = max(p1, 1.0 - p1)
    degenerate = ones == 0 or ones == n
    h = 0.0 if degenerate else -math.log2(p_max)

    if n <= ENTROPY_BLOCK:
        per_block = h
    else:
        n_blocks = n // ENTROPY_BLOCK
        per_block = math.inf
        for k in range(n_blocks):
            seg = arr[k * ENTROPY_BLOCK:(k + 1) * ENTROPY_BLOCK]
            p = seg.mean()
            pm = max(p, 1.0 - p)
            per_block = min(per_block, 0.0 if pm >= 1.0 else -math.log2(pm))
    return EntropyReport(h, p_max, n, per_block, degenerate)


def output_length(n: int, h_min: float, epsilon: float) -> int:
    """Leftover-hash output size m = floor(n*h_min - 2*log2(1/epsilon)).

    Raises BlockTooSmallError unless n*h_min strictly exceeds the
    security cost.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= h_min <= 1.0:
        raise ValueError("h_min must lie in [0, 1]")
    if not 0.0 < epsilon <= 1.0:
        raise ValueError("epsilon must lie in (0, 1]")
    cost = 2.0 * math.log2(1.0 / epsilon)
    budget = n * h_min
    if budget <= cost:
        raise BlockTooSmallError(
            f"n*h_min = {budget:.6g} does not exceed security cost {cost:.6g}"
        )
    # the tiny guard keeps decimal-intent values (e.g. h = 0.99) exact
    return int(math.floor(budget - cost + 1e-9))


@dataclass(frozen=True)
class ExtractorParams:
    """Toeplitz block geometry: n input bits -> m output bits.

    ``seed`` must hold exactly n + m - 1 bits; epsilon is the extractor
    security parameter (a power of two by convention).
    """

    n: int
    m: int
    epsilon: float
    seed: BitSequence

    def __post_init__(self):
        if not 1 <= self.m <= self.n:
            raise ValueError(f"need 1 <= m <= n, got m={self.m}, n={self.n}")
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in (0, 1]")
        if len(self.seed) != self.n + self.m - 1:
            raise ValueError(
                f"seed holds {len(self.seed)} bits, need n+m-1 = {self.n + self.m - 1}"
            )

    @classmethod
    def sized(
        cls, n: int, h_min: float, epsilon: float, seed_source=None
    ) -> "ExtractorParams":
        """Construct with m from the leftover-hash budget and a drawn seed."""
        m = output_length(n, h_min, epsilon)
        seed = resolve_seed(seed_source, n + m - 1)
        return cls(n, m, epsilon, seed)


def resolve_seed(source, n_bits: int) -> BitSequence:
    """Materialize extractor seed bits from a flexible source.

    ``None`` draws fresh OS entropy; bytes, bit arrays, BitSequences and
    file paths supply recorded seeds (must hold at least ``n_bits``).
    """
    if source is None:
        raw = secrets.token_bytes((n_bits + 7) // 8)
        return BitSequence.from_bits(np.unpackbits(np.frombuffer(raw, np.uint8))[:n_bits])
    if isinstance(source, BitSequence):
        if len(source) < n_bits:
            raise SeedError(f"seed holds {len(source)} bits, need {n_bits}")
        return BitSequence.from_bits(source.to_bits()[:n_bits])
    if isinstance(source, (bytes, bytearray)):
        if len(source) * 8 < n_bits:
            raise SeedError(f"seed holds {len(source) * 8} bits, need {n_bits}")
        arr = np.unpackbits(np.frombuffer(bytes(source), np.uint8))[:n_bits]
        return BitSequence.from_bits(arr)
    if isinstance(source, (str, Path)):
        return resolve_seed(Path(source).read_bytes(), n_bits)
    arr = np.asarray(source, dtype=np.uint8)
    if arr.size < n_bits:
        raise SeedError(f"seed holds {arr.size} bits, need {n_bits}")
    return BitSequence.from_bits(arr[:n_bits])


# ---------------------------------------------------------------------------
# evaluation kernels


def _fr_accumulate_py(table, xbytes, mb, out):
    for t in range(xbytes.size):
        b = xbytes[t]
        if b:
            out[:mb] ^= table[b, t:t + mb]


if numba is not None:
    @numba.njit(cache=True)
    def _fr_accumulate(table, xbytes, mb, out):  # pragma: no cover - jitted
        for t in range(xbytes.size):
            b = xbytes[t]
            if b:
                row = table[b]
                for q in range(mb):
                    out[q] ^= row[t + q]
else:  # pragma: no cover
    _fr_accumulate = _fr_accumulate_py


class _ByteTableHasher:
    """Four-Russians evaluation: one 256-row table of packed, shifted
    reversed-seed combinations, shared by all blocks of a stream."""

    def __init__(self, params: ExtractorParams):
        self.n = params.n
        self.m = params.m
        r = params.seed.to_bits()[::-1].copy()  # r[p] = seed[L-1-p]
        length = r.size
        nbytes = (length + 7) // 8 + 2
        shifted = np.zeros((8, nbytes), np.uint8)
        for u in range(8):
            arr = np.zeros(length, np.uint8)
            if u < length:
                arr[: length - u] = r[u:]
            shifted[u, : (length + 7) // 8] = np.packbits(arr, bitorder="little")
        table = np.zeros((256, nbytes), np.uint8)
        for b in range(1, 256):
            low = b & (-b)
            table[b] = table[b ^ low] ^ shifted[low.bit_length() - 1]
        self._table = table
        self._mb = (self.m + 7) // 8 + 1

    def extract_bits(self, x: np.ndarray) -> np.ndarray:
        xbytes = np.packbits(x[::-1], bitorder="little")
        out = np.zeros(self._mb, np.uint8)
        _fr_accumulate(self._table, xbytes, self._mb, out)
        return np.unpackbits(out, bitorder="little")[: self.m]


class _FftHasher:
    """Exact GF(2) Toeplitz product through float64 FFT convolution."""

    def __init__(self, params: ExtractorParams):
        self.n = params.n
        self.m = params.m
        r = params.seed.to_bits()[::-1].astype(np.float64)
        self._size = _fft.next_fast_len(r.size + self.n - 1, real=True)
        self._seed_fft = _fft.rfft(r, self._size)

    def extract_bits(self, x: np.ndarray) -> np.ndarray:
        fx = _fft.rfft(x.astype(np.float64), self._size)
        conv = _fft.irfft(self._seed_fft * fx, self._size)[self.n - 1: self.n - 1 + self.m]
        rounded = np.rint(conv)
        margin = float(np.abs(conv - rounded).max(initial=0.0))
        if margin > 0.25:
            raise ToeplitzPrecisionError(
                f"FFT rounding margin {margin:.3g} exceeds 0.25"
            )
        return (rounded.astype(np.int64) & 1).astype(np.uint8)


@lru_cache(maxsize=8)
def _hasher(params: ExtractorParams):
    if params.n <= FR_MAX_N:
        return _ByteTableHasher(params)
    return _FftHasher(params)


def toeplitz_extract(block, params: ExtractorParams) -> BitSequence:
    """Hash one n-bit block to m bits: y = T @ x over GF(2).

    Bit-identical to the direct matrix definition regardless of the
    evaluation path chosen internally.
    """
    x = _as_bit_array(block)
    if x.size != params.n:
        raise ValueError(f"block holds {x.size} bits, params expect n={params.n}")
    return BitSequence.from_bits(_hasher(params).extract_bits(x))


@dataclass(frozen=True)
class ExtractionReport:
    """Accounting for one extraction run (the ratio report)."""

    h_min: float
    n: int
    m: int
    ratio: float
    bits_in: int
    bits_out: int
    blocks: int
    seconds: float | None = None
    mbps: float | None = None
    seed_sha256: str = ""

    def to_dict(self) -> dict:
        return {
            "h_min": self.h_min,
            "n": self.n,
            "m": self.m,
            "ratio": self.ratio,
            "bits_out": self.bits_out,
            "seconds": self.seconds,
            "mbps": self.mbps,
            "bits_in": self.bits_in,
            "blocks": self.blocks,
            "seed_sha256": self.seed_sha256,
        }


def extract_stream(
    raw: BitSequence,
    epsilon: float = 2.0**-50,
    n_block: int = 10**6,
    seed_source=None,
    acquisition_seconds: float | None = None,
) -> tuple[BitSequence, ExtractionReport, ExtractorParams]:
    """Extract a whole raw stream blockwise with a single shared seed.

    Output length per block comes from the full-sequence min-entropy;
    the trailing partial block is discarded. ``acquisition_seconds``
    (wall time of the raw acquisition) turns the output count into the
    effective post-processed bit rate.
    """
    import hashlib

    if len(raw) < n_block:
        raise ValueError(f"raw stream holds {len(raw)} bits, need >= n_block = {n_block}")
    report = min_entropy(raw)
    params = ExtractorParams.sized(n_block, report.h_min_per_bit, epsilon, seed_source)
    bits = raw.to_bits()
    n_blocks = bits.size // n_block
    hasher = _hasher(params)
    out_parts = [
        hasher.extract_bits(bits[k * n_block:(k + 1) * n_block])
        for k in range(n_blocks)
    ]
    out_bits = np.concatenate(out_parts) if out_parts else np.empty(0, np.uint8)
    out = BitSequence.from_bits(out_bits)
    mbps = None
    if acquisition_seconds:
        mbps = out_bits.size / acquisition_seconds / 1e6
    info = ExtractionReport(
        h_min=report.h_min_per_bit,
        n=params.n,
        m=params.m,
        ratio=params.m / params.n,
        bits_in=n_blocks * n_block,
        bits_out=int(out_bits.size),
        blocks=n_blocks,
        seconds=acquisition_seconds,
        mbps=mbps,
        seed_sha256=hashlib.sha256(params.seed.to_bytes()).hexdigest(),
    )
    return out, info, params
