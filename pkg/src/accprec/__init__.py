"""Accumulation precision analysis for reduced-precision dot products.

Predicts how many accumulator mantissa bits a long floating-point sum needs
before swamping erodes the variance of the result, and checks those
predictions against a bit-exact emulation of the accumulation.
"""

from accprec.analytic import (
    AccumulationSpec,
    PrecisionPrediction,
    VrrBreakdown,
    predict_min_mantissa,
    q_function,
    sweep_chunk_size,
    variance_lost_exponent,
    vrr,
    vrr_chunked,
    vrr_chunked_sparse,
    vrr_full_swamping,
    vrr_sparse,
)
from accprec.softfloat import (
    FloatFormat,
    RoundingMode,
    SwampingTrace,
    accumulate,
    accumulate_chunked,
    fp_add,
    fp_mul,
    quantize,
)

__version__ = "0.1.0"

__all__ = [
    "AccumulationSpec",
    "FloatFormat",
    "PrecisionPrediction",
    "RoundingMode",
    "SwampingTrace",
    "VrrBreakdown",
    "accumulate",
    "accumulate_chunked",
    "fp_add",
    "fp_mul",
    "predict_min_mantissa",
    "q_function",
    "quantize",
    "sweep_chunk_size",
    "variance_lost_exponent",
    "vrr",
    "vrr_chunked",
    "vrr_chunked_sparse",
    "vrr_full_swamping",
    "vrr_sparse",
]
