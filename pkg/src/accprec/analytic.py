"""Closed-form variance retention ratio (VRR) of a swamped accumulation.

All lengths are term counts and all precisions are fraction bits (hidden bit
excluded).  Variances are in units of the product variance, so nothing here
depends on the scale of the data.

The variance lost over an accumulation is compared against a cutoff in log
space: an accumulator precision is suitable for length ``n`` when
``n * (1 - VRR) <= ln(cutoff)``.  The exponential itself is never formed.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy import special

DEFAULT_CUTOFF = 50.0
MIN_BITS = 1
MAX_BITS = 32

CHUNK_RULES = ("levels", "total")


# ---------------------------------------------------------------------------
# Gaussian tail helpers
# ---------------------------------------------------------------------------


def q_function(x):
    """Upper tail of the standard normal, ``P(Z > x)``."""
    return 0.5 * special.erfc(np.asarray(x, dtype=np.float64) / math.sqrt(2.0))[()]


def _two_tail(x):
    # 2Q(x)
    return special.erfc(np.asarray(x, dtype=np.float64) / math.sqrt(2.0))[()]


def _central(x):
    # 1 - 2Q(x), evaluated through erf so small x keeps full relative precision
    return special.erf(np.asarray(x, dtype=np.float64) / math.sqrt(2.0))[()]


# ---------------------------------------------------------------------------
# partial-swamping bookkeeping
# ---------------------------------------------------------------------------


def _stage_weight(j: int) -> int:
    return 2**j * (2**j - 1) * (2 ** (j + 1) - 1)


def stage_iterations(m_acc: int, m_p: int, j: int) -> float:
    """Typical number of additions spent in partial-swamping stage ``j``."""
    return math.ldexp(1.0, m_acc - m_p + j + 1)


def fractional_variance_loss(m_p: int, j: int) -> float:
    """Variance lost per addition when the ``j`` lowest product bits are truncated.

    Assumes the truncated bits are uniform; in units of the product variance.
    """
    return math.ldexp((2**j - 1) * (2 ** (j + 1) - 1), -2 * m_p) / 6.0


def _partial_loss_exact(m_acc: int, m_p: int, stages: int) -> Fraction:
    # each stage weight is divisible by 3, so the sum over stages is exact
    total = sum(_stage_weight(j) for j in range(1, stages + 1)) // 3
    return Fraction(total) * Fraction(2) ** (m_acc - 3 * m_p)


def partial_loss(m_acc: int, m_p: int, stages: Optional[int] = None) -> float:
    """Variance lost to partial swamping over the first ``stages`` stages.

    With ``stages=None`` this is the total over all ``m_p`` stages (the
    threshold below which a full-swamping event is discarded).
    """
    return float(_partial_loss_exact(m_acc, m_p, m_p if stages is None else stages))


# ---------------------------------------------------------------------------
# full-swamping probability series
# ---------------------------------------------------------------------------

_BLOCK = 4096
# beyond this index the series is smooth on the scale of one step and is
# summed by Euler-Maclaurin over a log-spaced Gauss-Legendre quadrature
_EXACT_LIMIT = 1 << 24
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(24)
_PANELS_PER_OCTAVE = 8
# erfc underflows to exactly 0.0 beyond ~27.3; below this index every q_i is 0
_ERFC_ZERO_ARG = 27.5


def _first_live_index(m_acc: int) -> int:
    return max(2, int(math.ldexp(1.0, 2 * m_acc) / (2.0 * _ERFC_ZERO_ARG**2)))


def _q_terms(m_acc: int, lo: int, hi: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices ``i`` in ``[lo, hi)`` (``lo >= 2``) and the first-full-swamp probabilities."""
    i = np.arange(lo, hi, dtype=np.float64)
    scale = math.ldexp(1.0, m_acc)
    q = _two_tail(scale / np.sqrt(i)) * _central(scale / np.sqrt(i - 1.0))
    return i, np.atleast_1d(q)


def _q_at(m_acc: int, x: np.ndarray) -> np.ndarray:
    scale = math.ldexp(1.0, m_acc)
    return _two_tail(scale / np.sqrt(x)) * _central(scale / np.sqrt(x - 1.0))


def _smooth_sums(m_acc: int, lo: int, hi: int, shift: float) -> tuple[float, float]:
    """Euler-Maclaurin estimate of the ``[lo, hi)`` sums for large ``lo``."""
    a = float(max(lo, _first_live_index(m_acc)))
    b = float(hi)
    if b <= a:
        return 0.0, 0.0
    panels = max(1, math.ceil(math.log2(b / a) * _PANELS_PER_OCTAVE))
    edges = np.exp(np.linspace(math.log(a), math.log(b), panels + 1))
    mid = 0.5 * (edges[1:] + edges[:-1])[:, None]
    half = 0.5 * (edges[1:] - edges[:-1])[:, None]
    x = (mid + half * _GL_NODES[None, :]).ravel()
    w = (half * _GL_WEIGHTS[None, :]).ravel()
    q = _q_at(m_acc, x)
    int_q = math.fsum(w * q)
    int_iq = math.fsum(w * (x - shift) * q)

    ends = np.array([a - 1.0, a, a + 1.0, b - 1.0, b, b + 1.0])
    fq = _q_at(m_acc, ends)
    fiq = (ends - shift) * fq
    # sum_{i=a}^{b-1} f(i) = int_a^b f + (f(a) - f(b))/2 + (f'(b) - f'(a))/12 + ...
    def corr(f):
        return 0.5 * (f[1] - f[4]) + ((f[5] - f[3]) - (f[2] - f[0])) / 24.0

    return int_q + corr(fq), int_iq + corr(fiq)


class _SeriesCache:
    """Block sums of ``q_i`` and ``i*q_i`` per accumulator precision.

    A range sum is assembled from cached block sums plus at most two partial
    blocks evaluated on the fly, so memory stays proportional to n / block.
    """

    def __init__(self, block: int = _BLOCK):
        self.block = block
        self._sums: dict[int, tuple[list[float], list[float]]] = {}
        self._lock = threading.Lock()

    def _ensure(self, m_acc: int, n_blocks: int):
        with self._lock:
            qs, iqs = self._sums.setdefault(m_acc, ([], []))
            live = _first_live_index(m_acc)
            while len(qs) < n_blocks:
                b = len(qs)
                lo, hi = max(2, b * self.block), (b + 1) * self.block
                if hi <= live:
                    qs.append(0.0)
                    iqs.append(0.0)
                    continue
                i, q = _q_terms(m_acc, lo, hi)
                qs.append(float(q.sum()))
                iqs.append(float((i * q).sum()))
            return qs, iqs

    def _direct(self, m_acc: int, lo: int, hi: int, shift: float) -> tuple[float, float]:
        lo = max(lo, 2)
        if hi <= lo or hi <= _first_live_index(m_acc):
            return 0.0, 0.0
        i, q = _q_terms(m_acc, lo, hi)
        return float(q.sum()), float(((i - shift) * q).sum())

    def sums(self, m_acc: int, lo: int, hi: int, shift: float = 0.0) -> tuple[float, float]:
        """``(sum q_i, sum (i - shift) q_i)`` over integer ``i`` in ``[lo, hi)``."""
        lo = max(lo, 2)
        if hi <= lo:
            return 0.0, 0.0
        if hi > _EXACT_LIMIT:
            exact = self._exact_sums(m_acc, lo, min(hi, _EXACT_LIMIT), shift)
            smooth = _smooth_sums(m_acc, max(lo, _EXACT_LIMIT), hi, shift)
            return exact[0] + smooth[0], exact[1] + smooth[1]
        return self._exact_sums(m_acc, lo, hi, shift)

    def _exact_sums(self, m_acc: int, lo: int, hi: int, shift: float) -> tuple[float, float]:
        if hi <= lo:
            return 0.0, 0.0
        B = self.block
        b_lo = -(-lo // B)
        b_hi = hi // B
        if b_hi - b_lo < 2:
            return self._direct(m_acc, lo, hi, shift)
        qs, iqs = self._ensure(m_acc, b_hi)
        head = self._direct(m_acc, lo, b_lo * B, shift)
        tail = self._direct(m_acc, b_hi * B, hi, shift)
        mid_q = math.fsum(qs[b_lo:b_hi])
        mid_iq = math.fsum(iqs[b_lo:b_hi]) - shift * mid_q
        return (
            math.fsum((head[0], mid_q, tail[0])),
            math.fsum((head[1], mid_iq, tail[1])),
        )


_series = _SeriesCache()


# ---------------------------------------------------------------------------
# VRR formulas
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VrrBreakdown:
    """VRR together with every intermediate of the partial-swamping formula."""

    vrr: float
    n: int
    m_acc: int
    m_p: int
    alpha: float
    alpha_jr: tuple[float, ...]  # j_r = 2 .. m_p
    q_prime: tuple[float, ...]  # boundary-event weights, j_r = 2 .. m_p (0 when excluded)
    k1: float
    k2: float
    k3: float
    k: float
    full_swamp_mass: float  # sum over i of (i - alpha)_+ q_i
    boundary_mass: float  # sum over j_r of (n - alpha_jr)_+ q'_jr

    @property
    def variance_lost_exponent(self) -> float:
        return self.n * (1.0 - self.vrr)


def _check_bits(name: str, value: int) -> None:
    if int(value) != value or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")


def _check_length(name: str, value: int) -> None:
    if int(value) != value or value < 1:
        raise ValueError(f"{name} must be an integer >= 1, got {value!r}")


def vrr_full_swamping(m_acc: int, n: int) -> float:
    """VRR when only full swamping is modelled."""
    _check_bits("m_acc", m_acc)
    _check_length("n", n)
    m_acc, n = int(m_acc), int(n)
    if n <= 2:
        return 1.0
    k_full, num_full = _series.sums(m_acc, 2, n)
    q_tilde = _central(math.ldexp(1.0, m_acc) / math.sqrt(n))
    k = k_full + q_tilde
    return (num_full + n * q_tilde) / (k * n)


@lru_cache(maxsize=65536)
def vrr(m_acc: int, m_p: int, n: int) -> VrrBreakdown:
    """VRR of a length-``n`` accumulation with partial and full swamping."""
    _check_bits("m_acc", m_acc)
    _check_bits("m_p", m_p)
    _check_length("n", n)
    m_acc, m_p, n = int(m_acc), int(m_p), int(n)

    alpha_exact = _partial_loss_exact(m_acc, m_p, m_p)
    alpha = float(alpha_exact)
    alpha_jr = tuple(partial_loss(m_acc, m_p, jr - 1) for jr in range(2, m_p + 1))

    if n == 1:
        return VrrBreakdown(1.0, n, m_acc, m_p, alpha, alpha_jr, (0.0,) * len(alpha_jr),
                            0.0, 0.0, 1.0, 1.0, 0.0, 0.0)

    # full-swamping events at i = 2..n-1, kept only when i > alpha
    first = max(2, math.floor(alpha_exact) + 1)
    k1, full_mass = _series.sums(m_acc, first, n, shift=alpha)

    # boundary events: partial swamping reached stage j_r - 1 but not j_r
    root_n = math.sqrt(n)
    q_prime = []
    for jr, a_jr in zip(range(2, m_p + 1), alpha_jr):
        if n > a_jr:
            weight = stage_iterations(m_acc, m_p, jr - 1)
            lo = math.ldexp(1.0, m_acc - m_p + jr - 1) / root_n
            hi = math.ldexp(1.0, m_acc - m_p + jr) / root_n
            q_prime.append(weight * _two_tail(lo) * _central(hi))
        else:
            q_prime.append(0.0)
    k2 = math.fsum(q_prime)
    boundary_mass = math.fsum((n - a) * qp for a, qp in zip(alpha_jr, q_prime) if qp)

    k3 = float(_central(math.ldexp(1.0, m_acc - m_p + 1) / root_n))
    k = k1 + k2 + k3
    ratio = math.fsum((full_mass, boundary_mass, n * k3)) / (k * n)
    return VrrBreakdown(
        vrr=min(1.0, max(0.0, ratio)),
        n=n,
        m_acc=m_acc,
        m_p=m_p,
        alpha=alpha,
        alpha_jr=alpha_jr,
        q_prime=tuple(float(q) for q in q_prime),
        k1=k1,
        k2=k2,
        k3=k3,
        k=k,
        full_swamp_mass=full_mass,
        boundary_mass=boundary_mass,
    )


def effective_length(n: int, nzr: float) -> int:
    """Number of non-zero terms expected in a length-``n`` sum."""
    if not 0.0 < nzr <= 1.0:
        raise ValueError(f"nzr must be in (0, 1], got {nzr!r}")
    return max(1, math.floor(nzr * n + 0.5))


def inter_chunk_mantissa(m_acc: int, m_p: int, chunk_len: int) -> int:
    """Mantissa width of the chunk partial sums fed to the inter-chunk sum."""
    grown = m_p + (int(chunk_len).bit_length() - 1)  # floor(m_p + log2(chunk_len))
    return max(1, min(m_acc, grown))


def vrr_sparse(m_acc: int, m_p: int, n: int, nzr: float) -> float:
    return vrr(m_acc, m_p, effective_length(n, nzr)).vrr


def vrr_chunked_sparse(m_acc: int, m_p: int, n1: int, n2: int, nzr: float = 1.0) -> float:
    """VRR of a two-level chunked sum whose terms are non-zero with rate ``nzr``."""
    intra, inter = _chunk_levels(m_acc, m_p, n1, n2, nzr)
    return intra.vrr * inter.vrr


def vrr_chunked(m_acc: int, m_p: int, n1: int, n2: int) -> float:
    return vrr_chunked_sparse(m_acc, m_p, n1, n2, 1.0)


def _chunk_levels(m_acc, m_p, n1, n2, nzr):
    _check_length("n1", n1)
    _check_length("n2", n2)
    n1_eff = effective_length(n1, nzr)
    intra = vrr(m_acc, m_p, n1_eff)
    inter = vrr(m_acc, inter_chunk_mantissa(m_acc, m_p, n1_eff), int(n2))
    return intra, inter


# ---------------------------------------------------------------------------
# accumulation problems and the suitability test
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AccumulationSpec:
    """One accumulation: length, product/accumulator precision, chunking, sparsity."""

    n: int
    m_p: int
    m_acc: int
    chunk_size: Optional[int] = None
    nzr: float = 1.0

    def __post_init__(self):
        _check_length("n", self.n)
        _check_bits("m_p", self.m_p)
        _check_bits("m_acc", self.m_acc)
        if self.chunk_size is not None:
            _check_length("chunk_size", self.chunk_size)
        if not 0.0 < self.nzr <= 1.0:
            raise ValueError(f"nzr must be in (0, 1], got {self.nzr!r}")

    @property
    def chunked(self) -> bool:
        return self.chunk_size is not None and 1 < self.chunk_size < self.n

    @property
    def chunks(self) -> tuple[int, int]:
        """``(n1, n2)``: chunk length and chunk count (``(n, 1)`` when unchunked)."""
        if not self.chunked:
            return self.n, 1
        return self.chunk_size, -(-self.n // self.chunk_size)

    def with_m_acc(self, m_acc: int) -> "AccumulationSpec":
        return AccumulationSpec(self.n, self.m_p, m_acc, self.chunk_size, self.nzr)


def spec_vrr(spec: AccumulationSpec) -> float:
    """VRR of ``spec`` using the formula variant its fields call for."""
    if spec.chunked:
        n1, n2 = spec.chunks
        return vrr_chunked_sparse(spec.m_acc, spec.m_p, n1, n2, spec.nzr)
    return vrr_sparse(spec.m_acc, spec.m_p, spec.n, spec.nzr)


def variance_lost_exponent(spec: AccumulationSpec, chunk_rule: str = "levels") -> float:
    """Log of the normalized exponential variance lost, ``n_eff * (1 - VRR)``.

    ``n_eff`` is the sparsity-adjusted length.  For chunked sums the default
    ``"levels"`` rule charges each level at its own length (intra-chunk sum of
    ``n1_eff`` terms plus inter-chunk sum of ``n2`` partials); ``"total"``
    charges the whole length against the product of the two level VRRs.
    """
    if chunk_rule not in CHUNK_RULES:
        raise ValueError(f"chunk_rule must be one of {CHUNK_RULES}, got {chunk_rule!r}")
    if not spec.chunked:
        n_eff = effective_length(spec.n, spec.nzr)
        return n_eff * (1.0 - vrr(spec.m_acc, spec.m_p, n_eff).vrr)
    n1, n2 = spec.chunks
    intra, inter = _chunk_levels(spec.m_acc, spec.m_p, n1, n2, spec.nzr)
    if chunk_rule == "total":
        return intra.n * n2 * (1.0 - intra.vrr * inter.vrr)
    return intra.n * (1.0 - intra.vrr) + n2 * (1.0 - inter.vrr)


@dataclass(frozen=True)
class PrecisionPrediction:
    min_m_acc: Optional[int]  # None when nothing in the search range qualifies
    v_exponent_at_choice: Optional[float]
    cutoff: float  # log-domain threshold, ln(cutoff value)
    scanned: tuple[tuple[int, float], ...] = field(default=(), repr=False)

    @property
    def satisfiable(self) -> bool:
        return self.min_m_acc is not None


def predict_min_mantissa(
    m_p: int,
    n: int,
    chunk_size: Optional[int] = None,
    nzr: float = 1.0,
    cutoff: float = DEFAULT_CUTOFF,
    *,
    lo: int = MIN_BITS,
    hi: int = MAX_BITS,
    chunk_rule: str = "levels",
) -> PrecisionPrediction:
    """Smallest accumulator mantissa whose variance-lost exponent is within ``ln(cutoff)``.

    Scans ``m_acc = lo, lo+1, ..., hi`` and stops at the first qualifying width.
    """
    if cutoff <= 1.0:
        raise ValueError(f"cutoff must exceed 1, got {cutoff!r}")
    log_cut = math.log(cutoff)
    scanned = []
    for m_acc in range(lo, hi + 1):
        spec = AccumulationSpec(n, m_p, m_acc, chunk_size, nzr)
        expo = variance_lost_exponent(spec, chunk_rule)
        scanned.append((m_acc, expo))
        if expo <= log_cut:
            return PrecisionPrediction(m_acc, expo, log_cut, tuple(scanned))
    return PrecisionPrediction(None, None, log_cut, tuple(scanned))


def knee_length(
    m_acc: int,
    m_p: int,
    lengths: Sequence[int],
    cutoff: float = DEFAULT_CUTOFF,
    chunk_size: Optional[int] = None,
) -> Optional[int]:
    """First length in ``lengths`` whose exponent exceeds ``ln(cutoff)``, if any."""
    log_cut = math.log(cutoff)
    for n in lengths:
        if variance_lost_exponent(AccumulationSpec(n, m_p, m_acc, chunk_size)) > log_cut:
            return n
    return None


@dataclass(frozen=True)
class ChunkSweepRow:
    chunk_size: int
    n_chunks: int
    vrr: float


@dataclass(frozen=True)
class ChunkSweep:
    baseline: float  # unchunked VRR for the same setup
    rows: tuple[ChunkSweepRow, ...]

    def value_at(self, chunk_size: int) -> float:
        for row in self.rows:
            if row.chunk_size == chunk_size:
                return row.vrr
        raise KeyError(chunk_size)


def sweep_chunk_size(
    m_acc: int, m_p: int, n: int, nzr: float = 1.0, chunk_sizes: Sequence[int] = ()
) -> ChunkSweep:
    rows = []
    for n1 in chunk_sizes:
        _check_length("chunk size", n1)
        n1 = min(int(n1), n)
        n2 = -(-n // n1)
        rows.append(ChunkSweepRow(n1, n2, vrr_chunked_sparse(m_acc, m_p, n1, n2, nzr)))
    return ChunkSweep(vrr_sparse(m_acc, m_p, n, nzr), tuple(rows))
