from fractions import Fraction
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from accprec.softfloat import (
    FloatFormat,
    FPStatus,
    RoundingMode,
    StepKind,
    accumulate,
    accumulate_chunked,
    accumulator_format,
    fp_add,
    fp_mul,
    quantize,
    quantize_array,
    sum_terms,
)

RNE = RoundingMode.NEAREST_EVEN
RTZ = RoundingMode.TRUNCATE_TOWARD_ZERO


# ---------------------------------------------------------------------------
# exact-rational reference rounding, built from the format definition alone
# ---------------------------------------------------------------------------


def reference_grid(e: int, m: int) -> list[tuple[Fraction, int]]:
    """All non-negative representable values as ``(value, integer significand)``."""
    bias = 2 ** (e - 1) - 1
    emin = 1 - bias
    out = [(Fraction(0), 0)]
    for f in range(1, 2**m):  # subnormals
        out.append((Fraction(f, 2**m) * Fraction(2) ** emin, f))
    for field in range(1, 2**e):
        E = field - bias
        for f in range(2**m):
            out.append(((1 + Fraction(f, 2**m)) * Fraction(2) ** E, 2**m + f))
    return out


def reference_round(x: Fraction, grid, mode: RoundingMode) -> Fraction:
    sign = -1 if x < 0 else 1
    ax = abs(x)
    top = grid[-1][0]
    if ax >= top:
        return sign * top
    lo_i = max(i for i, (v, _) in enumerate(grid) if v <= ax)
    lo, lo_sig = grid[lo_i]
    if lo == ax or mode == RTZ:
        return sign * lo
    hi, hi_sig = grid[lo_i + 1]
    if ax - lo < hi - ax:
        return sign * lo
    if ax - lo > hi - ax:
        return sign * hi
    return sign * (lo if lo_sig % 2 == 0 else hi)


FMT_142 = FloatFormat(4, 2)
GRID_142 = reference_grid(4, 2)


def test_reference_grid_matches_format_enumeration():
    values = sorted({float(v) for v, _ in GRID_142} | {-float(v) for v, _ in GRID_142})
    assert values == sorted(set(FMT_142.finite_values()))
    assert FMT_142.max_value == float(GRID_142[-1][0])


@pytest.mark.parametrize("mode", [RNE, RTZ], ids=lambda m: m.label)
@pytest.mark.parametrize("op", ["add", "mul"])
def test_exhaustive_142_matches_rational_oracle(op, mode):
    values = FMT_142.finite_values()
    mismatches = []
    for a in values:
        fa = Fraction(a)
        for b in values:
            exact = fa + Fraction(b) if op == "add" else fa * Fraction(b)
            want = float(reference_round(exact, GRID_142, mode))
            got = fp_add(a, b, FMT_142, mode) if op == "add" else fp_mul(a, b, FMT_142, mode)
            if got != want:
                mismatches.append((a, b, got, want))
    assert not mismatches, mismatches[:5]


# ---------------------------------------------------------------------------
# format bookkeeping
# ---------------------------------------------------------------------------


def test_format_fields():
    fmt = FloatFormat(5, 2)
    assert fmt.width == 8
    assert fmt.bias == 15
    assert str(fmt) == "(1,5,2)"
    assert fmt.min_subnormal == 2.0**-16
    assert fmt.min_normal == 2.0**-14


@pytest.mark.parametrize("e,m", [(1, 2), (4, -1), (11, 2), (4, 51)])
def test_format_rejects_bad_widths(e, m):
    with pytest.raises(ValueError):
        FloatFormat(e, m)


def test_rounding_mode_parse():
    assert RoundingMode.parse("truncate") is RTZ
    assert RoundingMode.parse("NearestEven") is RNE
    with pytest.raises(ValueError):
        RoundingMode.parse("up")


# ---------------------------------------------------------------------------
# worked examples
# ---------------------------------------------------------------------------

M2 = FloatFormat(6, 2)


def test_quantize_examples():
    assert quantize(1.3, M2) == 1.25
    assert quantize(-2.5, M2) == -2.5
    assert quantize(0.0, M2) == 0.0


def test_mul_examples():
    assert fp_mul(1.5, 2.0, FloatFormat(6, 1)) == 3.0
    assert fp_mul(1.75, 1.75, FloatFormat(6, 5)) == 3.0625
    assert fp_mul(1.75, 0.0, FloatFormat(6, 5)) == 0.0


def test_add_examples():
    assert fp_add(8.0, 0.25, M2) == 8.0
    assert fp_add(4.0, 0.375, FloatFormat(6, 3)) == 4.5
    assert fp_add(1.0, 1.0, M2) == 2.0


def test_saturation_and_underflow_flags():
    st_ = FPStatus()
    assert quantize(1e11, M2, status=st_) == M2.max_value
    assert st_.overflow == 1
    assert quantize(M2.min_subnormal / 4, M2, status=st_) == 0.0
    assert st_.underflow == 1
    # gradual underflow keeps subnormals unless flushing
    sub = M2.min_subnormal * 3
    assert quantize(sub, M2) == sub
    assert quantize(sub, M2, flush_to_zero=True) == 0.0


def test_nonfinite_rejected():
    with pytest.raises(ValueError):
        quantize(math.inf, M2)


def test_accumulate_examples():
    s, tr = accumulate([1.0] * 4, accumulator_format(23))
    assert s == 4.0 and tr.n_full == 0
    for n in (8, 9, 50):
        s, _ = accumulate([1.0] * n, M2, RTZ)
        assert s == 8.0
    s, tr = accumulate([], M2)
    assert s == 0.0 and len(tr) == 0


def test_accumulate_zero_padding_is_identity():
    x = [1.25, -0.5, 3.0, 0.75]
    assert accumulate(x + [0.0] * 7, M2)[0] == accumulate(x, M2)[0]


def test_chunked_degenerate_cases():
    rng = np.random.default_rng(1)
    x = quantize_array(rng.standard_normal(300), FloatFormat(6, 5))
    fmt = accumulator_format(6)
    base = accumulate(x, fmt)[0]
    assert accumulate_chunked(x, fmt, len(x))[0] == base
    assert accumulate_chunked(x, fmt, 1)[0] == base
    assert sum_terms(x, fmt, RNE, 1)[0] == base


def test_chunking_rescues_constant_sum():
    fmt = accumulator_format(4)
    ones = np.ones(4096)
    plain = accumulate(ones, fmt)[0]
    chunked = accumulate_chunked(ones, fmt, 64)[0]
    assert abs(4096 - chunked) < abs(4096 - plain)


def test_chunked_trace_layout():
    fmt = accumulator_format(4)
    _, tr = accumulate_chunked(np.ones(100), fmt, 30)
    assert len(tr) == 100 + 4  # intra steps, then one per chunk partial


def test_sum_terms_agrees_with_traced_path():
    rng = np.random.default_rng(7)
    x = quantize_array(rng.standard_normal(5000) * rng.standard_normal(5000), FloatFormat(6, 5))
    for m in (3, 6, 10):
        fmt = accumulator_format(m)
        for mode in (RNE, RTZ):
            s, tr = accumulate(x, fmt, mode)
            assert sum_terms(x, fmt, mode) == (s, tr.n_full)
            s, tr = accumulate_chunked(x, fmt, 64, mode)
            assert sum_terms(x, fmt, mode, 64) == (s, tr.n_full)


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------

formats = st.builds(FloatFormat, st.integers(3, 8), st.integers(0, 12))
modes = st.sampled_from([RNE, RTZ])
reals = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@given(reals, formats, modes)
def test_quantize_idempotent(x, fmt, mode):
    q = quantize(x, fmt, mode)
    assert quantize(q, fmt, mode) == q


@given(reals, formats, modes)
def test_quantize_sign_symmetric(x, fmt, mode):
    assert quantize(-x, fmt, mode) == -quantize(x, fmt, mode)


@given(reals, formats)
def test_truncate_never_grows_magnitude(x, fmt):
    assert abs(quantize(x, fmt, RTZ)) <= abs(x)


@given(st.integers(1, 10))
def test_wide_product_is_exact(m_in):
    fin = FloatFormat(5, m_in)
    fout = FloatFormat(8, 2 * m_in + 1)
    rng = np.random.default_rng(m_in)
    for a, b in quantize_array(rng.standard_normal((50, 2)), fin):
        assert fp_mul(a, b, fout) == a * b


@given(st.lists(st.floats(-8, 8, allow_nan=False), min_size=1, max_size=200), st.integers(4, 10), modes,
       st.integers(-4, 4))
def test_accumulate_scale_invariant(raw, m, mode, k):
    fmt = accumulator_format(m)
    terms = quantize_array(raw, FloatFormat(6, 5))
    # keep everything in the normal range so scaling is exact
    terms[np.abs(terms) < 2.0**-8] = 0.0
    s, _ = accumulate(terms, fmt, mode)
    s_scaled, _ = accumulate(terms * 2.0**k, fmt, mode)
    assert s_scaled == s * 2.0**k


@given(st.lists(st.floats(-4, 4, allow_nan=False), min_size=1, max_size=300), st.integers(2, 8), modes)
def test_full_swamp_leaves_sum_unchanged(raw, m, mode):
    fmt = accumulator_format(m)
    terms = quantize_array(raw, FloatFormat(6, 5))
    _, tr = accumulate(terms, fmt, mode)
    partial = [0.0]
    for p in terms:
        partial.append(fp_add(partial[-1], p, fmt, mode))
    for i, kind in enumerate(tr.kinds):
        if kind == StepKind.FULL:
            assert partial[i + 1] == partial[i]
            assert terms[i] != 0.0


@given(st.integers(1, 6), st.integers(2, 6), st.integers(1, 400))
def test_truncate_constant_terms_stall(k, m, n):
    fmt = accumulator_format(m)
    c = 2.0**-k * 1.5
    terms = [c] * n
    _, tr = accumulate(terms, fmt, RTZ)
    partial = [0.0]
    for p in terms:
        partial.append(fp_add(partial[-1], p, fmt, RTZ))
    assert all(b >= a for a, b in zip(partial, partial[1:]))
    first = tr.first_full
    if first is not None:
        assert len(set(partial[first:])) == 1


@settings(max_examples=50)
@given(st.lists(st.floats(-4, 4, allow_nan=False), min_size=2, max_size=300), st.integers(2, 8), st.integers(2, 64))
def test_chunked_trace_counts(raw, m, chunk):
    fmt = accumulator_format(m)
    terms = quantize_array(raw, FloatFormat(6, 5))
    s, tr = accumulate_chunked(terms, fmt, chunk)
    assert tr.n_exact + tr.n_partial + tr.n_full == len(tr)
    assert sum_terms(terms, fmt, RNE, chunk) == (s, tr.n_full)
