"""Monte Carlo measurement of variance retention under emulated accumulation.

Every trial draws its own terms from a generator seeded by ``(seed, trial)``,
so a trial's result depends on nothing but its index.  Per-trial squared sums
are reduced with ``math.fsum`` (exactly rounded, order independent), which
makes serial and threaded runs agree bit for bit.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from accprec.analytic import AccumulationSpec, spec_vrr
from accprec.softfloat import (
    ACC_EXPONENT_BITS,
    FloatFormat,
    RoundingMode,
    accumulator_format,
    quantize_array,
    sum_terms,
)

THREADS_ENV = "ACCPREC_THREADS"
DEFAULT_TRIALS = 1000
DEFAULT_KNEE_THRESHOLD = 0.90

CSV_COLUMNS = (
    "n",
    "m_p",
    "m_acc",
    "chunk",
    "nzr",
    "mode",
    "trials",
    "seed",
    "vrr_analytic",
    "vrr_empirical",
    "std_error",
    "swamp_fraction",
)


def default_workers() -> int:
    raw = os.environ.get(THREADS_ENV, "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@dataclass(frozen=True)
class ProductModel:
    """Distribution of the i.i.d. zero-mean product terms.

    ``gaussian_product`` multiplies two independent standard normals (unit
    variance); ``gaussian`` draws a standard normal directly.  Each draw is
    then rounded to ``(1, exponent_bits, m_p)`` and zeroed with probability
    ``sparsity``.
    """

    distribution: str = "gaussian_product"
    m_p: int = 5
    sparsity: float = 0.0
    exponent_bits: int = ACC_EXPONENT_BITS

    def __post_init__(self):
        if self.distribution not in ("gaussian_product", "gaussian"):
            raise ValueError(f"unknown distribution {self.distribution!r}")
        if not 0.0 <= self.sparsity <= 1.0:
            raise ValueError(f"sparsity must be in [0, 1], got {self.sparsity!r}")

    @property
    def variance(self) -> float:
        # exact variance of a term before quantization
        return 1.0 - self.sparsity

    @property
    def product_format(self) -> FloatFormat:
        return FloatFormat(self.exponent_bits, self.m_p)


def sample_products(n: int, model: ProductModel, seed: int, trial: int = 0) -> np.ndarray:
    """``n`` quantized product terms for one trial; deterministic in ``(seed, trial)``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng([int(seed), int(trial)])
    if model.distribution == "gaussian_product":
        x = rng.standard_normal(n) * rng.standard_normal(n)
    else:
        x = rng.standard_normal(n)
    if model.sparsity > 0.0:
        x[rng.random(n) < model.sparsity] = 0.0
    return quantize_array(x, model.product_format, RoundingMode.NEAREST_EVEN)


@dataclass(frozen=True)
class EmpiricalVrr:
    estimate: float
    trials: int
    std_error: float
    swamp_fraction: float  # trials with at least one full-swamp step


def _model_for(spec: AccumulationSpec, model: ProductModel) -> ProductModel:
    # the AccumulationSpec owns precision and sparsity; the model only picks the distribution
    return replace(model, m_p=spec.m_p, sparsity=1.0 - spec.nzr)


def _run_trials(
    n: int,
    model: ProductModel,
    m_accs: Sequence[int],
    chunk: Optional[int],
    mode: RoundingMode,
    trials: int,
    seed: int,
    workers: Optional[int],
) -> tuple[np.ndarray, np.ndarray]:
    """Final sums and full-swamp flags, shape ``(len(m_accs), trials)``."""
    sums = np.zeros((len(m_accs), trials))
    swamped = np.zeros((len(m_accs), trials), dtype=bool)
    fmts = [accumulator_format(m, model.exponent_bits) for m in m_accs]

    def work(t: int) -> None:
        terms = sample_products(n, model, seed, t)
        for row, fmt in enumerate(fmts):
            s, n_full = sum_terms(terms, fmt, mode, chunk)
            sums[row, t] = s
            swamped[row, t] = n_full > 0

    workers = workers or default_workers()
    if workers <= 1:
        for t in range(trials):
            work(t)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, range(trials)))
    return sums, swamped


def _summarize(sums: np.ndarray, swamped: np.ndarray, norm: float) -> EmpiricalVrr:
    trials = sums.shape[0]
    ratios = [float(s) * float(s) / norm for s in sums]
    mean = math.fsum(ratios) / trials
    var = math.fsum((r - mean) ** 2 for r in ratios) / (trials - 1)
    return EmpiricalVrr(
        estimate=mean,
        trials=trials,
        std_error=math.sqrt(var / trials),
        swamp_fraction=float(np.count_nonzero(swamped)) / trials,
    )


def measure_vrr(
    spec: AccumulationSpec,
    model: ProductModel = ProductModel(),
    trials: int = DEFAULT_TRIALS,
    seed: int = 0,
    mode: RoundingMode = RoundingMode.NEAREST_EVEN,
    *,
    workers: Optional[int] = None,
) -> EmpiricalVrr:
    """Mean of the emulated ``s_n**2`` over trials, divided by ``n * var(p)``.

    ``spec.m_p`` and ``spec.nzr`` override the model's precision and sparsity.
    """
    if trials < 2:
        raise ValueError(f"trials must be >= 2, got {trials}")
    model = _model_for(spec, model)
    chunk = spec.chunk_size if spec.chunked else None
    sums, swamped = _run_trials(spec.n, model, [spec.m_acc], chunk, mode, trials, seed, workers)
    return _summarize(sums[0], swamped[0], spec.n * model.variance)


@dataclass(frozen=True)
class KneeResult:
    m_acc: Optional[int]  # None when no width up to the ceiling retains enough variance
    threshold: float
    estimates: tuple[tuple[int, EmpiricalVrr], ...]

    @property
    def satisfiable(self) -> bool:
        return self.m_acc is not None


def empirical_knee(
    m_p: int,
    n: int,
    model: ProductModel = ProductModel(),
    mode: RoundingMode = RoundingMode.NEAREST_EVEN,
    retention_threshold: float = DEFAULT_KNEE_THRESHOLD,
    *,
    trials: int = DEFAULT_TRIALS,
    seed: int = 0,
    chunk_size: Optional[int] = None,
    nzr: float = 1.0,
    lo: int = 1,
    hi: int = 32,
    batch: int = 4,
    workers: Optional[int] = None,
) -> KneeResult:
    """Smallest ``m_acc`` whose measured VRR reaches ``retention_threshold``.

    Widths are scanned upward in batches that share one draw of the terms per
    trial; every width sees exactly the terms ``measure_vrr`` would use with
    the same seed, so the estimates match it value for value.
    """
    if not 0.0 < retention_threshold < 1.0:
        raise ValueError(f"retention_threshold must be in (0, 1), got {retention_threshold!r}")
    base = AccumulationSpec(n, m_p, lo, chunk_size, nzr)
    model = _model_for(base, model)
    chunk = chunk_size if base.chunked else None
    norm = n * model.variance
    found = []
    for start in range(lo, hi + 1, batch):
        widths = list(range(start, min(hi, start + batch - 1) + 1))
        sums, swamped = _run_trials(n, model, widths, chunk, mode, trials, seed, workers)
        for row, m_acc in enumerate(widths):
            est = _summarize(sums[row], swamped[row], norm)
            found.append((m_acc, est))
            if est.estimate >= retention_threshold:
                return KneeResult(m_acc, retention_threshold, tuple(found))
    return KneeResult(None, retention_threshold, tuple(found))


@dataclass(frozen=True)
class ProfileRow:
    spec: AccumulationSpec
    ideal_variance: float
    empirical_variance: float
    ratio: float
    std_error: float


def variance_profile(
    specs: Sequence[AccumulationSpec],
    model: ProductModel = ProductModel(),
    trials: int = DEFAULT_TRIALS,
    seed: int = 0,
    mode: RoundingMode = RoundingMode.NEAREST_EVEN,
    *,
    workers: Optional[int] = None,
) -> list[ProfileRow]:
    """Ideal vs emulated variance of the final sum for a sequence of layers."""
    if not specs:
        raise ValueError("variance_profile needs at least one spec")
    rows = []
    for spec in specs:
        res = measure_vrr(spec, model, trials, seed, mode, workers=workers)
        ideal = spec.n * _model_for(spec, model).variance
        rows.append(ProfileRow(spec, ideal, res.estimate * ideal, res.estimate, res.std_error))
    return rows


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def validation_row(
    spec: AccumulationSpec,
    mode: RoundingMode,
    seed: int,
    result: Optional[EmpiricalVrr],
) -> dict:
    """One CSV record; empirical columns are blank when ``result`` is None."""
    return {
        "n": spec.n,
        "m_p": spec.m_p,
        "m_acc": spec.m_acc,
        "chunk": spec.chunk_size if spec.chunked else "",
        "nzr": repr(float(spec.nzr)),
        "mode": mode.label,
        "trials": result.trials if result else "",
        "seed": seed if result else "",
        "vrr_analytic": repr(float(spec_vrr(spec))),
        "vrr_empirical": repr(result.estimate) if result else "",
        "std_error": repr(result.std_error) if result else "",
        "swamp_fraction": repr(result.swamp_fraction) if result else "",
    }


def write_csv(rows: Iterable[dict], handle) -> None:
    writer = csv.DictWriter(handle, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)


def read_csv(handle) -> list[AccumulationSpec]:
    """Specs listed in any CSV this package writes (the grid loader).

    Validation and prediction files carry an ``m_acc`` column; precision
    tables carry ``m_acc_normal`` and ``m_acc_chunked`` and yield one spec
    for each.  Rows without a width (unsatisfiable or excluded) are skipped.
    """
    reader = csv.DictReader(handle)
    fields = set(reader.fieldnames or ())
    if "m_acc" in fields:
        width_cols = [("m_acc", False)]
    elif {"m_acc_normal", "m_acc_chunked"} <= fields:
        width_cols = [("m_acc_normal", False), ("m_acc_chunked", True)]
    else:
        raise ValueError("CSV lacks an m_acc column")
    missing = {"n", "m_p"} - fields
    if missing:
        raise ValueError(f"CSV lacks columns {sorted(missing)}")
    specs = []
    for lineno, rec in enumerate(reader, start=2):
        try:
            if rec.get("excluded") in ("1", "True", "true"):
                continue
            chunk = rec.get("chunk") or None
            nzr = float(rec.get("nzr") or "1.0")
            for col, chunk_only in width_cols:
                if not rec.get(col):
                    continue
                if chunk_only and chunk is None:
                    continue
                specs.append(
                    AccumulationSpec(
                        int(rec["n"]),
                        int(rec["m_p"]),
                        int(rec[col]),
                        int(chunk) if chunk and (chunk_only or len(width_cols) == 1) else None,
                        nzr,
                    )
                )
        except (TypeError, ValueError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return specs
