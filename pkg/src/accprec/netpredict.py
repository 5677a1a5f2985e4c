"""Per-layer accumulation lengths and precision tables for a network topology."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Optional

import yaml

from accprec.analytic import DEFAULT_CUTOFF, effective_length, predict_min_mantissa

GEMMS = ("FWD", "BWD", "GRAD")


class TopologyError(ValueError):
    """A topology document violates the schema; the message names line and field."""


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv" or "fc"
    kernel_h: int = 1
    kernel_w: int = 1
    c_in: int = 1
    c_out: int = 1
    out_h: int = 1
    out_w: int = 1
    in_features: int = 1
    out_features: int = 1
    block: Optional[str] = None
    nzr_fwd: float = 1.0
    nzr_bwd: float = 1.0
    nzr_grad: float = 1.0
    excluded: bool = False

    def __post_init__(self):
        if self.kind not in ("conv", "fc"):
            raise ValueError(f"layer {self.name!r}: kind must be 'conv' or 'fc', got {self.kind!r}")
        for attr in ("kernel_h", "kernel_w", "c_in", "c_out", "out_h", "out_w", "in_features", "out_features"):
            value = getattr(self, attr)
            if int(value) != value or value < 1:
                raise ValueError(f"layer {self.name!r}: {attr} must be an integer >= 1, got {value!r}")
        for attr in ("nzr_fwd", "nzr_bwd", "nzr_grad"):
            value = getattr(self, attr)
            if not 0.0 < value <= 1.0:
                raise ValueError(f"layer {self.name!r}: {attr} must be in (0, 1], got {value!r}")

    @property
    def group(self) -> str:
        return self.block or self.name

    def nzr(self, gemm: str) -> float:
        return {"FWD": self.nzr_fwd, "BWD": self.nzr_bwd, "GRAD": self.nzr_grad}[gemm]


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    batch_size: int
    m_p: int = 5
    chunk_size: Optional[int] = 64
    cutoff: float = DEFAULT_CUTOFF

    def __post_init__(self):
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ValueError(f"batch_size must be an integer >= 1, got {self.batch_size!r}")
        if not self.layers:
            raise ValueError("a network needs at least one layer")


def accumulation_lengths(layer: LayerSpec, batch_size: int, first: bool = False) -> dict[str, Optional[int]]:
    """Dot-product lengths of the three training GEMMs; BWD is None for the first layer."""
    if layer.kind == "conv":
        fwd = layer.kernel_h * layer.kernel_w * layer.c_in
        bwd = layer.kernel_h * layer.kernel_w * layer.c_out
        grad = batch_size * layer.out_h * layer.out_w
    else:
        fwd = layer.in_features
        bwd = layer.out_features
        grad = batch_size
    return {"FWD": fwd, "BWD": None if first else bwd, "GRAD": grad}


@dataclass(frozen=True)
class PrecisionRow:
    layer: str
    block: str
    gemm: str
    n: int
    nzr: float
    n_effective: int
    m_acc_normal: Optional[int]  # None: unsatisfiable within the search range
    m_acc_chunked: Optional[int]
    excluded: bool = False  # kept at a fixed wide precision, not predicted


@dataclass(frozen=True)
class PrecisionTable:
    network: str
    rows: tuple[PrecisionRow, ...]
    chunk_size: Optional[int] = None
    m_p: int = 5

    def row(self, layer: str, gemm: str) -> PrecisionRow:
        for r in self.rows:
            if r.layer == layer and r.gemm == gemm:
                return r
        raise KeyError((layer, gemm))

    def block_max(self) -> "PrecisionTable":
        """One row per (block, GEMM): the largest prediction among its layers."""
        grouped: dict[tuple[str, str], list[PrecisionRow]] = {}
        for r in self.rows:
            if not r.excluded:
                grouped.setdefault((r.block, r.gemm), []).append(r)
        out = []
        for (block, gemm), members in grouped.items():
            longest = max(members, key=lambda r: r.n_effective)
            out.append(
                PrecisionRow(
                    layer=block,
                    block=block,
                    gemm=gemm,
                    n=max(r.n for r in members),
                    nzr=longest.nzr,
                    n_effective=longest.n_effective,
                    m_acc_normal=_max_bits(r.m_acc_normal for r in members),
                    m_acc_chunked=_max_bits(r.m_acc_chunked for r in members),
                )
            )
        return PrecisionTable(self.network, tuple(out), self.chunk_size, self.m_p)

    def to_text(self) -> str:
        header = ("layer", "block", "gemm", "n", "nzr", "n_eff", "normal", "chunked")
        lines = [header]
        for r in self.rows:
            if r.excluded:
                normal = chunked = "fixed"
            else:
                normal, chunked = _fmt_bits(r.m_acc_normal), _fmt_bits(r.m_acc_chunked)
            lines.append((r.layer, r.block, r.gemm, str(r.n), f"{r.nzr:g}", str(r.n_effective), normal, chunked))
        widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
        return "\n".join(
            "  ".join(cell.ljust(w) if i < 3 else cell.rjust(w) for i, (cell, w) in enumerate(zip(line, widths)))
            for line in lines
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("network", "layer", "block", "gemm", "n", "m_p", "chunk", "nzr", "n_effective",
                         "m_acc_normal", "m_acc_chunked", "excluded"))
        for r in self.rows:
            writer.writerow((self.network, r.layer, r.block, r.gemm, r.n, self.m_p, self.chunk_size or "",
                             repr(float(r.nzr)), r.n_effective,
                             "" if r.m_acc_normal is None else r.m_acc_normal,
                             "" if r.m_acc_chunked is None else r.m_acc_chunked,
                             int(r.excluded)))
        return buf.getvalue()


def _max_bits(values):
    values = list(values)
    if any(v is None for v in values):
        return None
    return max(values)


def _fmt_bits(bits: Optional[int]) -> str:
    return ">max" if bits is None else str(bits)


@lru_cache(maxsize=4096)
def _predict_pair(m_p, n, nzr, chunk_size, cutoff):
    normal = predict_min_mantissa(m_p, n, None, nzr, cutoff).min_m_acc
    if chunk_size is None:
        return normal, normal
    chunked = predict_min_mantissa(m_p, n, chunk_size, nzr, cutoff).min_m_acc
    return normal, chunked


def predict_network(net: NetworkSpec) -> PrecisionTable:
    rows = []
    for idx, layer in enumerate(net.layers):
        lengths = accumulation_lengths(layer, net.batch_size, first=idx == 0)
        for gemm in GEMMS:
            n = lengths[gemm]
            if n is None:
                continue
            nzr = layer.nzr(gemm)
            n_eff = effective_length(n, nzr)
            if layer.excluded:
                rows.append(PrecisionRow(layer.name, layer.group, gemm, n, nzr, n_eff, None, None, True))
                continue
            normal, chunked = _predict_pair(net.m_p, n, nzr, net.chunk_size, net.cutoff)
            rows.append(PrecisionRow(layer.name, layer.group, gemm, n, nzr, n_eff, normal, chunked))
    return PrecisionTable(net.name, tuple(rows), net.chunk_size, net.m_p)


def apply_perturbation(table: PrecisionTable, pp: int) -> PrecisionTable:
    """Shift every predicted width by ``pp`` (<= 0), never below one bit."""
    if int(pp) != pp or pp > 0:
        raise ValueError(f"perturbation must be an integer <= 0, got {pp!r}")

    def shift(bits):
        return None if bits is None else max(1, bits + pp)

    rows = tuple(
        r if r.excluded else replace(r, m_acc_normal=shift(r.m_acc_normal), m_acc_chunked=shift(r.m_acc_chunked))
        for r in table.rows
    )
    return replace(table, rows=rows)


# ---------------------------------------------------------------------------
# topology documents
# ---------------------------------------------------------------------------

_LINE_KEY = "__line__"


class _LineLoader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node):
    mapping = loader.construct_mapping(node, deep=True)
    mapping[_LINE_KEY] = node.start_mark.line + 1
    return mapping


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)

_NETWORK_KEYS = {"name", "batch_size", "m_p", "chunk_size", "cutoff", "layers", "description"}
_LAYER_KEYS = {
    "name", "kind", "kernel", "c_in", "c_out", "out", "in_features", "out_features",
    "block", "nzr", "excluded", "repeat",
}


def _pair(value, where, key):
    if isinstance(value, int):
        return value, value
    if isinstance(value, list) and len(value) == 2 and all(isinstance(v, int) for v in value):
        return value[0], value[1]
    raise TopologyError(f"{where}: field '{key}' must be an integer or a pair of integers, got {value!r}")


def _layer_from_doc(doc, index) -> list[LayerSpec]:
    line = doc.get(_LINE_KEY, "?") if isinstance(doc, dict) else "?"
    where = f"line {line}: layers[{index}]"
    if not isinstance(doc, dict):
        raise TopologyError(f"{where}: expected a mapping, got {doc!r}")
    unknown = set(doc) - _LAYER_KEYS - {_LINE_KEY}
    if unknown:
        raise TopologyError(f"{where}: unknown field(s) {sorted(unknown)}")
    for key in ("name", "kind"):
        if key not in doc:
            raise TopologyError(f"{where}: missing field '{key}'")
    kind = doc["kind"]
    kwargs = {"name": str(doc["name"]), "kind": kind, "block": doc.get("block"), "excluded": bool(doc.get("excluded", False))}
    if kind == "conv":
        for key in ("kernel", "c_in", "c_out", "out"):
            if key not in doc:
                raise TopologyError(f"{where}: conv layer missing field '{key}'")
        kwargs["kernel_h"], kwargs["kernel_w"] = _pair(doc["kernel"], where, "kernel")
        kwargs["out_h"], kwargs["out_w"] = _pair(doc["out"], where, "out")
        kwargs["c_in"], kwargs["c_out"] = doc["c_in"], doc["c_out"]
    elif kind == "fc":
        for key in ("in_features", "out_features"):
            if key not in doc:
                raise TopologyError(f"{where}: fc layer missing field '{key}'")
        kwargs["in_features"], kwargs["out_features"] = doc["in_features"], doc["out_features"]
    else:
        raise TopologyError(f"{where}: field 'kind' must be 'conv' or 'fc', got {kind!r}")
    nzr = doc.get("nzr", {})
    if isinstance(nzr, (int, float)):
        nzr = {"fwd": nzr, "bwd": nzr, "grad": nzr}
    if not isinstance(nzr, dict):
        raise TopologyError(f"{where}: field 'nzr' must be a number or a mapping of fwd/bwd/grad")
    for gemm in ("fwd", "bwd", "grad"):
        if gemm in nzr:
            kwargs[f"nzr_{gemm}"] = float(nzr[gemm])
    bad = set(nzr) - {"fwd", "bwd", "grad", _LINE_KEY}
    if bad:
        raise TopologyError(f"{where}: field 'nzr' has unknown key(s) {sorted(bad)}")
    repeat = doc.get("repeat", 1)
    if not isinstance(repeat, int) or repeat < 1:
        raise TopologyError(f"{where}: field 'repeat' must be an integer >= 1, got {repeat!r}")
    try:
        base = LayerSpec(**kwargs)
    except (TypeError, ValueError) as exc:
        raise TopologyError(f"{where}: {exc}") from None
    if repeat == 1:
        return [base]
    return [replace(base, name=f"{base.name}.{k}") for k in range(repeat)]


def network_from_document(doc) -> NetworkSpec:
    if not isinstance(doc, dict):
        raise TopologyError("line 1: topology document must be a mapping")
    line = doc.get(_LINE_KEY, 1)
    unknown = set(doc) - _NETWORK_KEYS - {_LINE_KEY}
    if unknown:
        raise TopologyError(f"line {line}: unknown top-level field(s) {sorted(unknown)}")
    for key in ("name", "batch_size", "layers"):
        if key not in doc:
            raise TopologyError(f"line {line}: missing field '{key}'")
    if not isinstance(doc["layers"], list) or not doc["layers"]:
        raise TopologyError(f"line {line}: field 'layers' must be a non-empty list")
    layers = []
    for i, entry in enumerate(doc["layers"]):
        layers.extend(_layer_from_doc(entry, i))
    try:
        return NetworkSpec(
            name=str(doc["name"]),
            layers=tuple(layers),
            batch_size=doc["batch_size"],
            m_p=doc.get("m_p", 5),
            chunk_size=doc.get("chunk_size", 64),
            cutoff=float(doc.get("cutoff", DEFAULT_CUTOFF)),
        )
    except (TypeError, ValueError) as exc:
        raise TopologyError(f"line {line}: {exc}") from None


def loads_topology(text: str) -> NetworkSpec:
    try:
        doc = yaml.load(text, Loader=_LineLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark else "topology"
        raise TopologyError(f"{where}: malformed document ({getattr(exc, 'problem', exc)})") from None
    return network_from_document(doc)


def builtin_topologies() -> list[str]:
    folder = resources.files("accprec") / "topologies"
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".yaml"))


def load_topology(source: str | Path) -> NetworkSpec:
    """Load a topology from a file path or the name of a bundled topology."""
    path = Path(source)
    if path.exists():
        return loads_topology(path.read_text())
    name = str(source)
    if name in builtin_topologies():
        return loads_topology((resources.files("accprec") / "topologies" / f"{name}.yaml").read_text())
    raise TopologyError(f"no topology file or bundled topology named {name!r}")
