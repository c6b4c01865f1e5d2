"""Parameter, training-memory and energy accounting.

Training memory is measured as the bytes the autodiff tape retains for one
forward pass (what backward will need), with the frozen-backbone cache that
a side network reads reported separately. Parameters and optimiser state
are excluded. Energy follows the discrete utilisation formula

    E [kWh] = p0 * sum(u_i) / 6000

for per-minute utilisation samples ``u_i`` in percent and device power
``p0`` in kW.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig, backbone_forward
from .errors import ConfigError, TraceError
from .petl import MethodSpec, apply_method, count_method_parameters
from .read import ReadModel
from .tasks import BOS, FIRST_PAYLOAD, Split
from .tunable import TunableModel

DEFAULT_POWER_KW = 0.25
BYTES_PER_PARAM = np.dtype(T.DTYPE).itemsize
TRACE_HEADER = ("minute", "utilization_percent")


# ---------------------------------------------------------------------------
# Energy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnergyTrace:
    """Per-minute device utilisation in percent; ``len(samples) / 60`` hours long."""

    samples: tuple[float, ...]
    power_kw: float = DEFAULT_POWER_KW

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(float(u) for u in self.samples))
        if not self.samples:
            raise TraceError("energy trace is empty")
        for i, u in enumerate(self.samples):
            if not (0.0 <= u <= 100.0):
                raise TraceError(f"utilization sample {i} = {u} is outside [0, 100]")
        if not (self.power_kw >= 0 and math.isfinite(self.power_kw)):
            raise TraceError(f"device power must be finite and >= 0, got {self.power_kw}")

    @property
    def hours(self) -> float:
        return len(self.samples) / 60.0

    @classmethod
    def from_csv(cls, path: str | Path, power_kw: float = DEFAULT_POWER_KW) -> "EnergyTrace":
        with open(path, newline="") as fh:
            return cls.from_rows(csv.reader(fh), power_kw)

    @classmethod
    def from_rows(cls, rows: Iterable[Sequence[str]], power_kw: float = DEFAULT_POWER_KW) -> "EnergyTrace":
        rows = [r for r in rows if r]
        if not rows or tuple(c.strip() for c in rows[0]) != TRACE_HEADER:
            raise TraceError(f"trace must start with the header {','.join(TRACE_HEADER)}")
        samples = []
        for line, row in enumerate(rows[1:], start=2):
            if len(row) != 2:
                raise TraceError(f"line {line}: expected 2 columns, got {len(row)}")
            try:
                minute, u = int(row[0]), float(row[1])
            except ValueError:
                raise TraceError(f"line {line}: cannot parse {row}") from None
            if minute != len(samples):
                raise TraceError(f"line {line}: minutes must count up from 0, got {minute}")
            samples.append(u)
        return cls(tuple(samples), power_kw)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for i, u in enumerate(self.samples):
            writer.writerow((i, repr(u)))
        return buf.getvalue()


def estimate_energy(trace: EnergyTrace) -> float:
    """Energy in kWh: summed utilisation times device power over 6000."""
    return math.fsum(trace.samples) * trace.power_kw / 6000.0


# ---------------------------------------------------------------------------
# Memory
# ---------------------------------------------------------------------------


def bench_batch(cfg: BackboneConfig, batch_size: int = 32, src_len: int = 9, tgt_len: int = 9,
                seed: int = 0) -> Split:
    """A fixed-shape random batch for memory measurements (no padding)."""
    if min(batch_size, src_len, tgt_len) < 1:
        raise ConfigError("batch size and lengths must be >= 1")
    if cfg.vocab_size <= FIRST_PAYLOAD:
        raise ConfigError("vocabulary too small for payload tokens")
    rng = np.random.default_rng(seed)
    X = rng.integers(FIRST_PAYLOAD, cfg.vocab_size, (batch_size, src_len))
    Y_out = rng.integers(FIRST_PAYLOAD, cfg.vocab_size, (batch_size, tgt_len))
    Y_in = np.concatenate([np.full((batch_size, 1), BOS), Y_out[:, :-1]], axis=1)
    return Split(X, np.ones(X.shape, bool), Y_in, Y_out, np.ones(Y_out.shape, bool))


@dataclass(frozen=True)
class MemoryMeasurement:
    tape_bytes: int
    cache_bytes: int
    bytes_by_op: dict

    @property
    def training_bytes(self) -> int:
        return self.tape_bytes + self.cache_bytes


def measure_step_memory(model: TunableModel, batch: Split) -> MemoryMeasurement:
    """Run one forward and backward pass; report the tape's peak retained bytes.

    For a side network the frozen-backbone states it reads are counted as
    cache bytes (they are tape-exempt constants).
    """
    tape = T.Tape()
    with tape:
        loss = model.loss(batch.X, batch.Y_in, batch.Y_out, batch.src_mask, batch.tgt_mask)
    by_op = tape.bytes_by_op()
    peak = tape.peak_bytes
    if tape.nodes:
        T.backward(tape, loss)
    cache = 0
    if isinstance(model, ReadModel):
        _, c = backbone_forward(batch.X, batch.Y_in, model.backbone, "frozen",
                                src_mask=batch.src_mask, tgt_mask=batch.tgt_mask)
        cache = c.consumed_nbytes()
    return MemoryMeasurement(peak, cache, by_op)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class CostReport:
    """One row of the efficiency table. Byte fields are ``None`` when not measured."""

    method: str
    total_params: int
    trainable_params: int
    trainable_percent: float
    tape_bytes: int | None = None
    cache_bytes: int | None = None
    inference_bytes: int | None = None
    energy_kwh: float | None = None

    def __post_init__(self):
        if not 0 <= self.trainable_params <= self.total_params:
            raise ConfigError("trainable parameters must lie in [0, total]")
        for name in ("tape_bytes", "cache_bytes", "inference_bytes"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ConfigError(f"{name} must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CostReport":
        return cls(**data)


def cost_report(backbone: Backbone | BackboneConfig, spec: MethodSpec, batch: Split | None = None,
                trace: EnergyTrace | None = None, seed: int = 0) -> CostReport:
    """Parameter counts for ``spec``; memory too when given a built backbone and a batch.

    Passing a config instead of a backbone gives shape-only counts, which
    keeps large presets cheap.
    """
    energy = estimate_energy(trace) if trace is not None else None
    if isinstance(backbone, BackboneConfig):
        trainable, total = count_method_parameters(backbone, spec)
        return CostReport(spec.label, total, trainable, 100.0 * trainable / total, energy_kwh=energy)
    model = apply_method(backbone, spec, seed)
    trainable, total = model.trainable_count(), model.total_count()
    report = CostReport(spec.label, total, trainable, 100.0 * trainable / total, energy_kwh=energy)
    if batch is not None:
        mem = measure_step_memory(model, batch)
        report.tape_bytes = mem.tape_bytes
        report.cache_bytes = mem.cache_bytes
        # weights plus whatever the method must hold across the forward pass
        report.inference_bytes = BYTES_PER_PARAM * total + mem.cache_bytes
    return report


COST_COLUMNS = (
    ("method", "method", "{}"),
    ("total_params", "total", "{:,}"),
    ("trainable_params", "trainable", "{:,}"),
    ("trainable_percent", "trainable %", "{:.3f}"),
    ("tape_bytes", "tape bytes", "{:,}"),
    ("cache_bytes", "cache bytes", "{:,}"),
    ("inference_bytes", "inference bytes", "{:,}"),
    ("energy_kwh", "energy kWh", "{:.6g}"),
)


def format_table(rows: Sequence[dict], columns=COST_COLUMNS) -> str:
    """Aligned text table; missing values print as ``-``."""
    header = [title for _, title, _ in columns]
    body = [[("-" if r.get(key) is None else fmt.format(r[key])) for key, _, fmt in columns] for r in rows]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(header, widths)))]
    for row in body:
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))))
    return "\n".join(lines)


def reports_to_json(reports: Sequence[CostReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# Depth sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DepthRow:
    method: str
    depth: int
    trainable_params: int
    total_params: int


def depth_sweep(base: BackboneConfig, specs: Sequence[MethodSpec],
                depths: Sequence[int] = (2, 4, 6, 12)) -> list[DepthRow]:
    """Trainable counts with ``depth`` encoder and ``depth`` decoder blocks (shapes only)."""
    rows = []
    for spec in specs:
        for depth in depths:
            trainable, total = count_method_parameters(base.with_depth(depth), spec)
            rows.append(DepthRow(spec.label, depth, trainable, total))
    return rows


def is_exactly_linear(depths: Sequence[int], counts: Sequence[int]) -> bool:
    """Integer check that ``counts`` is an affine function of ``depths`` with positive slope."""
    if len(depths) != len(counts) or len(depths) < 2:
        raise ConfigError("need at least two (depth, count) pairs")
    d0, c0 = depths[0], counts[0]
    d1, c1 = depths[1], counts[1]
    if (c1 - c0) * (d1 - d0) <= 0:
        return False
    return all((c - c0) * (d1 - d0) == (c1 - c0) * (d - d0) for d, c in zip(depths, counts))
