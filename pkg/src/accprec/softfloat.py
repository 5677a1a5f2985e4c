"""Bit-exact emulation of small floating-point formats.

Values are carried as Python/NumPy doubles.  Every emulated operation first
forms the exact result as an unevaluated pair ``hi + lo`` (error-free
transformations) and only then rounds once into the target format, so the
double carrier never contributes a rounding of its own.  This keeps the
emulation exact for every format with at most 50 mantissa bits.

A ``(1, e, m)`` format here has no reserved exponent codes: exponent field 0
encodes subnormals, every other field is a normal binade.  Infinities and
NaNs do not exist; overflow saturates to the largest finite magnitude.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from numba import njit

MAX_MANTISSA_BITS = 50
MAX_EXPONENT_BITS = 10

_OK, _OVERFLOW, _UNDERFLOW = 0, 1, 2


class RoundingMode(enum.IntEnum):
    NEAREST_EVEN = 0
    TRUNCATE_TOWARD_ZERO = 1

    @classmethod
    def parse(cls, text: str) -> "RoundingMode":
        key = text.strip().lower().replace("-", "_")
        aliases = {
            "nearest_even": cls.NEAREST_EVEN,
            "nearesteven": cls.NEAREST_EVEN,
            "rne": cls.NEAREST_EVEN,
            "nearest": cls.NEAREST_EVEN,
            "truncate": cls.TRUNCATE_TOWARD_ZERO,
            "truncate_toward_zero": cls.TRUNCATE_TOWARD_ZERO,
            "truncatetowardzero": cls.TRUNCATE_TOWARD_ZERO,
            "rtz": cls.TRUNCATE_TOWARD_ZERO,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown rounding mode {text!r}") from None

    @property
    def label(self) -> str:
        return "nearest_even" if self is RoundingMode.NEAREST_EVEN else "truncate"


class StepKind(enum.IntEnum):
    EXACT = 0
    PARTIAL = 1  # some low bits of the addend were lost
    FULL = 2  # the addend was lost entirely


@dataclass(frozen=True)
class FloatFormat:
    """A ``(1, e, m)`` floating-point format with ``e`` exponent bits and ``m`` fraction bits."""

    exponent_bits: int
    mantissa_bits: int

    def __post_init__(self):
        if not 2 <= self.exponent_bits <= MAX_EXPONENT_BITS:
            raise ValueError(
                f"exponent_bits must be in [2, {MAX_EXPONENT_BITS}], got {self.exponent_bits}"
            )
        if not 0 <= self.mantissa_bits <= MAX_MANTISSA_BITS:
            raise ValueError(
                f"mantissa_bits must be in [0, {MAX_MANTISSA_BITS}], got {self.mantissa_bits}"
            )

    @property
    def width(self) -> int:
        return 1 + self.exponent_bits + self.mantissa_bits

    @property
    def bias(self) -> int:
        return 2 ** (self.exponent_bits - 1) - 1

    @property
    def min_exponent(self) -> int:
        return 1 - self.bias

    @property
    def max_exponent(self) -> int:
        return 2**self.exponent_bits - 1 - self.bias

    @property
    def max_value(self) -> float:
        return math.ldexp(2.0 - math.ldexp(1.0, -self.mantissa_bits), self.max_exponent)

    @property
    def min_normal(self) -> float:
        return math.ldexp(1.0, self.min_exponent)

    @property
    def min_subnormal(self) -> float:
        return math.ldexp(1.0, self.min_exponent - self.mantissa_bits)

    def decode(self, bits: int) -> float:
        """Value of the bit pattern ``sign | exponent | fraction``."""
        if not 0 <= bits < 2**self.width:
            raise ValueError(f"bit pattern {bits:#x} does not fit {self}")
        m = self.mantissa_bits
        frac = bits & ((1 << m) - 1)
        expo = (bits >> m) & ((1 << self.exponent_bits) - 1)
        sign = -1.0 if bits >> (self.width - 1) else 1.0
        if expo == 0:
            return sign * math.ldexp(frac, self.min_exponent - m)
        return sign * math.ldexp((1 << m) + frac, expo - self.bias - m)

    def finite_values(self) -> list[float]:
        """Every value of the format, one per bit pattern (so +0 and -0 both appear)."""
        return [self.decode(b) for b in range(2**self.width)]

    def __str__(self) -> str:
        return f"(1,{self.exponent_bits},{self.mantissa_bits})"


# formats used by the experiments: (1,5,2) inputs, exact (1,6,5) products,
# (1,6,m_acc) accumulators
INPUT_FORMAT = FloatFormat(5, 2)
PRODUCT_FORMAT = FloatFormat(6, 5)
ACC_EXPONENT_BITS = 6


def accumulator_format(m_acc: int, exponent_bits: int = ACC_EXPONENT_BITS) -> FloatFormat:
    return FloatFormat(exponent_bits, m_acc)


@dataclass
class FPStatus:
    """Sticky overflow/underflow counters; pass one in to collect flags."""

    overflow: int = 0
    underflow: int = 0

    def _record(self, flag: int) -> None:
        if flag == _OVERFLOW:
            self.overflow += 1
        elif flag == _UNDERFLOW:
            self.underflow += 1


@dataclass
class SwampingTrace:
    """Per-step outcome of an emulated accumulation.

    ``kinds[i]`` classifies step ``i`` by what actually happened to the
    addend; ``exponent_gaps[i]`` is the exponent of the running sum minus that
    of the addend before the step (0 when either is zero).
    """

    kinds: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))
    exponent_gaps: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int32))
    overflow: int = 0
    underflow: int = 0

    def __len__(self) -> int:
        return len(self.kinds)

    @property
    def n_exact(self) -> int:
        return int(np.count_nonzero(self.kinds == StepKind.EXACT))

    @property
    def n_partial(self) -> int:
        return int(np.count_nonzero(self.kinds == StepKind.PARTIAL))

    @property
    def n_full(self) -> int:
        return int(np.count_nonzero(self.kinds == StepKind.FULL))

    @property
    def first_full(self) -> Optional[int]:
        hits = np.flatnonzero(self.kinds == StepKind.FULL)
        return int(hits[0]) if hits.size else None

    @staticmethod
    def concat(traces: Sequence["SwampingTrace"]) -> "SwampingTrace":
        if not traces:
            return SwampingTrace()
        return SwampingTrace(
            kinds=np.concatenate([t.kinds for t in traces]),
            exponent_gaps=np.concatenate([t.exponent_gaps for t in traces]),
            overflow=sum(t.overflow for t in traces),
            underflow=sum(t.underflow for t in traces),
        )


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _pow2(k):
    # 2.0**k for -1022 <= k <= 1023, straight from the bit pattern
    return np.int64((k + 1023) << 52).view(np.float64)


@njit(cache=True, nogil=True)
def _exponent(ax):
    # floor(log2(ax)) for finite ax > 0
    biased = (np.float64(ax).view(np.int64) >> 52) & 0x7FF
    if biased == 0:
        return math.frexp(ax)[1] - 1
    return biased - 1023


@njit(cache=True, nogil=True)
def _round(x, err, man, emin, maxval, mode, ftz):
    """Round the exact value ``x + err`` (``|err| <= ulp(x)/2``) into the format."""
    if x == 0.0:
        return x, _OK
    ax = abs(x)
    if not ax < 2.0 * maxval:
        # certain overflow; also keeps the scale factors below in range
        return math.copysign(maxval, x), _OVERFLOW
    lean = -err if x < 0.0 else err
    ex = _exponent(ax)
    if ex < emin:
        ex = emin
    ulp = _pow2(ex - man)
    scaled = ax * _pow2(man - ex)
    if mode == 1:
        whole = np.floor(scaled)
        if lean < 0.0 and whole == scaled:
            if whole == _pow2(man) and ex > emin:
                # exact value sits just under a binade boundary
                r = ax - 0.5 * ulp
            else:
                r = (whole - 1.0) * ulp
        else:
            r = whole * ulp
    else:
        # hardware rint already breaks exact ties to even
        whole = np.rint(scaled)
        if lean != 0.0 and abs(scaled - np.floor(scaled) - 0.5) == 0.0:
            whole = np.floor(scaled) + (1.0 if lean > 0.0 else 0.0)
        r = whole * ulp
    flag = _OK
    if r > maxval:
        r = maxval
        flag = _OVERFLOW
    elif r == 0.0:
        flag = _UNDERFLOW
    elif ftz and r < _pow2(emin):
        r = 0.0
        flag = _UNDERFLOW
    return math.copysign(r, x), flag


@njit(cache=True, nogil=True)
def _two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


@njit(cache=True, nogil=True)
def _split(a):
    c = 134217729.0 * a
    hi = c - (c - a)
    return hi, a - hi


@njit(cache=True, nogil=True)
def _two_prod(a, b):
    p = a * b
    ah, al = _split(a)
    bh, bl = _split(b)
    return p, ((ah * bh - p) + ah * bl + al * bh) + al * bl


@njit(cache=True, nogil=True)
def _quantize_into(xs, out, man, emin, maxval, mode, ftz):
    n_over = 0
    n_under = 0
    for i in range(xs.shape[0]):
        r, flag = _round(xs[i], 0.0, man, emin, maxval, mode, ftz)
        out[i] = r
        if flag == _OVERFLOW:
            n_over += 1
        elif flag == _UNDERFLOW:
            n_under += 1
    return n_over, n_under


@njit(cache=True, nogil=True)
def _accumulate_kernel(terms, man, emin, maxval, mode, ftz, kinds, gaps, record):
    s = 0.0
    n_full = 0
    n_over = 0
    n_under = 0
    for i in range(terms.shape[0]):
        p = terms[i]
        t, err = _two_sum(s, p)
        r, flag = _round(t, err, man, emin, maxval, mode, ftz)
        if flag == _OVERFLOW:
            n_over += 1
        elif flag == _UNDERFLOW and t != 0.0:
            n_under += 1
        kind = 0
        if p != 0.0:
            if r == s:
                kind = 2
                n_full += 1
            elif err != 0.0 or r != t:
                kind = 1
        if record:
            kinds[i] = kind
            if s != 0.0 and p != 0.0:
                gaps[i] = _exponent(abs(s)) - _exponent(abs(p))
            else:
                gaps[i] = 0
        s = r
    return s, n_full, n_over, n_under


@njit(cache=True, nogil=True)
def _accumulate_chunked_kernel(terms, chunk, man, emin, maxval, mode, ftz):
    """Sum of ``terms`` (chunked when ``chunk > 0``) and its full-swamp count."""
    dummy_k = np.zeros(0, dtype=np.int8)
    dummy_g = np.zeros(0, dtype=np.int32)
    n = terms.shape[0]
    if chunk <= 1 or chunk >= n:
        s, n_full, _, _ = _accumulate_kernel(terms, man, emin, maxval, mode, ftz, dummy_k, dummy_g, False)
        return s, n_full
    n2 = (n + chunk - 1) // chunk
    partials = np.empty(n2, dtype=np.float64)
    total_full = 0
    for c in range(n2):
        lo = c * chunk
        hi = min(n, lo + chunk)
        s, n_full, _, _ = _accumulate_kernel(terms[lo:hi], man, emin, maxval, mode, ftz, dummy_k, dummy_g, False)
        partials[c] = s
        total_full += n_full
    s, n_full, _, _ = _accumulate_kernel(partials, man, emin, maxval, mode, ftz, dummy_k, dummy_g, False)
    return s, total_full + n_full


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


def _fmt_args(fmt: FloatFormat):
    return fmt.mantissa_bits, fmt.min_exponent, fmt.max_value


def _check_finite(*xs: float) -> None:
    for x in xs:
        if not math.isfinite(x):
            raise ValueError(f"non-finite operand {x!r}")


def quantize(
    x: float,
    fmt: FloatFormat,
    mode: RoundingMode = RoundingMode.NEAREST_EVEN,
    *,
    flush_to_zero: bool = False,
    status: Optional[FPStatus] = None,
) -> float:
    """Round ``x`` to a value representable in ``fmt``.

    Magnitudes above the format's range saturate to ``fmt.max_value``; values
    that round to zero (or below the normal range with ``flush_to_zero``)
    become a signed zero.  Both events are counted in ``status`` if given.
    """
    x = float(x)
    _check_finite(x)
    r, flag = _round(x, 0.0, *_fmt_args(fmt), int(mode), flush_to_zero)
    if status is not None:
        status._record(flag)
    return r


def quantize_array(
    xs,
    fmt: FloatFormat,
    mode: RoundingMode = RoundingMode.NEAREST_EVEN,
    *,
    flush_to_zero: bool = False,
    status: Optional[FPStatus] = None,
) -> np.ndarray:
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    if not np.all(np.isfinite(xs)):
        raise ValueError("non-finite value in input")
    out = np.empty_like(xs)
    n_over, n_under = _quantize_into(xs.ravel(), out.ravel(), *_fmt_args(fmt), int(mode), flush_to_zero)
    if status is not None:
        status.overflow += n_over
        status.underflow += n_under
    return out


def fp_mul(
    a: float,
    b: float,
    out_fmt: FloatFormat,
    mode: RoundingMode = RoundingMode.NEAREST_EVEN,
    *,
    flush_to_zero: bool = False,
    status: Optional[FPStatus] = None,
) -> float:
    """Exact product of ``a`` and ``b`` rounded once into ``out_fmt``."""
    a, b = float(a), float(b)
    _check_finite(a, b)
    p, err = _two_prod(a, b)
    if not math.isfinite(p):
        raise OverflowError("product exceeds the double carrier")
    r, flag = _round(p, err, *_fmt_args(out_fmt), int(mode), flush_to_zero)
    if status is not None:
        status._record(flag)
    return r


def fp_add(
    a: float,
    b: float,
    acc_fmt: FloatFormat,
    mode: RoundingMode = RoundingMode.NEAREST_EVEN,
    *,
    flush_to_zero: bool = False,
    status: Optional[FPStatus] = None,
) -> float:
    """Exact sum of ``a`` and ``b`` rounded once into ``acc_fmt``."""
    a, b = float(a), float(b)
    _check_finite(a, b)
    s, err = _two_sum(a, b)
    r, flag = _round(s, err, *_fmt_args(acc_fmt), int(mode), flush_to_zero)
    if status is not None:
        status._record(flag)
    return r


def _as_terms(terms: Iterable[float]) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(list(terms) if not isinstance(terms, np.ndarray) else terms, dtype=np.float64))
    if arr.ndim != 1:
        raise ValueError("terms must be one-dimensional")
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite term")
    return arr


def _accumulate_array(arr, acc_fmt, mode, flush_to_zero):
    kinds = np.zeros(arr.shape[0], dtype=np.int8)
    gaps = np.zeros(arr.shape[0], dtype=np.int32)
    s, _, n_over, n_under = _accumulate_kernel(
        arr, *_fmt_args(acc_fmt), int(mode), flush_to_zero, kinds, gaps, True
    )
    return s, SwampingTrace(kinds, gaps, int(n_over), int(n_under))


def accumulate(
    terms: Iterable[float],
    acc_fmt: FloatFormat,
    mode: RoundingMode = RoundingMode.NEAREST_EVEN,
    *,
    flush_to_zero: bool = False,
) -> tuple[float, SwampingTrace]:
    """Left-to-right recursive sum, rounding into ``acc_fmt`` after every add."""
    arr = _as_terms(terms)
    if arr.size == 0:
        return 0.0, SwampingTrace()
    return _accumulate_array(arr, acc_fmt, mode, flush_to_zero)


def accumulate_chunked(
    terms: Iterable[float],
    acc_fmt: FloatFormat,
    chunk_size: int,
    mode: RoundingMode = RoundingMode.NEAREST_EVEN,
    *,
    flush_to_zero: bool = False,
) -> tuple[float, SwampingTrace]:
    """Two-level sum: chunks of ``chunk_size`` terms, then the chunk partials.

    Both levels use ``acc_fmt``.  The last chunk may be short.  The returned
    trace lists the intra-chunk steps in order followed by the inter-chunk
    steps.
    """
    if chunk_size < 1:
        raise ValueError(f"chunk_size must be >= 1, got {chunk_size}")
    arr = _as_terms(terms)
    if arr.size == 0:
        return 0.0, SwampingTrace()
    if chunk_size == 1 or chunk_size >= arr.size:
        return _accumulate_array(arr, acc_fmt, mode, flush_to_zero)
    partials = []
    traces = []
    for lo in range(0, arr.size, chunk_size):
        s, tr = _accumulate_array(arr[lo : lo + chunk_size], acc_fmt, mode, flush_to_zero)
        partials.append(s)
        traces.append(tr)
    s, tr = _accumulate_array(np.asarray(partials), acc_fmt, mode, flush_to_zero)
    traces.append(tr)
    return s, SwampingTrace.concat(traces)


def sum_terms(
    terms: np.ndarray,
    acc_fmt: FloatFormat,
    mode: RoundingMode = RoundingMode.NEAREST_EVEN,
    chunk_size: Optional[int] = None,
    *,
    flush_to_zero: bool = False,
) -> tuple[float, int]:
    """Fast path without a per-step trace: ``(sum, number of full-swamp steps)``."""
    arr = np.ascontiguousarray(terms, dtype=np.float64)
    s, n_full = _accumulate_chunked_kernel(
        arr, int(chunk_size or 0), *_fmt_args(acc_fmt), int(mode), flush_to_zero
    )
    return float(s), int(n_full)
