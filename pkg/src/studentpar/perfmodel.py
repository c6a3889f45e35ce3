"""Analytic latency and throughput model for serving configurations.

Latency decomposes into a per-layer compute term (serialized waves once
parallel capacity is exhausted), a batching wait, a host-to-device
transfer term, and an optional representation-gather cost when one model
group spans GPUs:

    latency = D * t_unit * max(1, ceil(W*B*N^2*M / (C*G))) + Q(B) + B*N/T + gather

The per-layer unit time t_unit is calibrated from one observed
configuration; everything else is arithmetic over the factor fields.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace


@dataclass(frozen=True)
class DynamicBatch:
    """Waiting-queue model: collect up to B samples or time out."""

    timeout_ms: float
    arrival_rps: float


@dataclass(frozen=True)
class PerfFactors:
    """The factor ledger of one serving configuration."""

    depth: int            # D: layers
    width: int            # W: hidden dims
    batch: int            # B: samples per inference
    seq_len: int          # N: tokens
    parallel_models: int  # M: concurrently running models or student groups
    gpus: int             # G
    capacity: float       # C: work units per ms per GPU
    pcie_tokens_per_ms: float  # T
    gather_ms: float = 0.0     # cross-GPU representation gather, once per inference
    wait_model: DynamicBatch | None = None  # Q(B); None means no batching wait

    def __post_init__(self):
        if min(self.depth, self.width, self.batch, self.seq_len, self.parallel_models, self.gpus) < 1:
            raise ValueError("all counts must be >= 1")
        if self.capacity <= 0 or self.pcie_tokens_per_ms <= 0:
            raise ValueError("capacity and pcie_tokens_per_ms must be positive")
        if self.gather_ms < 0:
            raise ValueError("gather_ms must be nonnegative")


@dataclass(frozen=True)
class FactorRow:
    name: str
    factors: PerfFactors
    latency_ms: float
    throughput_per_gpu: float


def waiting_time(wait_model: DynamicBatch | None, batch: int) -> float:
    """Mean residual wait of a sample while a batch accumulates, capped by the timeout."""
    if wait_model is None:
        return 0.0
    if wait_model.arrival_rps <= 0:
        raise ValueError("arrival_rps must be positive under dynamic batching")
    return min(wait_model.timeout_ms, 1000.0 * (batch - 1) / (2.0 * wait_model.arrival_rps))


def compute_waves(f: PerfFactors) -> int:
    """Serialized waves of layer work once capacity is exceeded; floor 1."""
    work = float(f.width) * f.batch * f.seq_len**2 * f.parallel_models
    return max(1, math.ceil(work / (f.capacity * f.gpus)))


class PerfModel:
    """Latency/throughput evaluator with one calibrated constant."""

    def __init__(self, t_unit: float | None = None):
        if t_unit is not None and t_unit <= 0:
            raise ValueError("t_unit must be positive")
        self.t_unit = t_unit

    def compute_term(self, f: PerfFactors) -> float:
        if self.t_unit is None:
            raise RuntimeError("perf model not calibrated: t_unit unknown")
        return f.depth * self.t_unit * compute_waves(f)

    @staticmethod
    def transfer_term(f: PerfFactors) -> float:
        return f.batch * f.seq_len / f.pcie_tokens_per_ms

    def latency(self, f: PerfFactors) -> float:
        return (
            self.compute_term(f)
            + waiting_time(f.wait_model, f.batch)
            + self.transfer_term(f)
            + f.gather_ms
        )

    @staticmethod
    def throughput_per_gpu(f: PerfFactors, latency_ms: float) -> float:
        """Samples per second per GPU: 1000 * B * M / (latency * G)."""
        if latency_ms <= 0:
            raise ValueError("latency must be positive")
        return 1000.0 * f.batch * f.parallel_models / (latency_ms * f.gpus)

    def calibrate(self, reference: PerfFactors, observed_latency_ms: float) -> float:
        """Solve for t_unit so that latency(reference) == observed_latency_ms."""
        fixed = (
            waiting_time(reference.wait_model, reference.batch)
            + self.transfer_term(reference)
            + reference.gather_ms
        )
        residual = observed_latency_ms - fixed
        if residual <= 0:
            raise ValueError(
                f"infeasible calibration: observed {observed_latency_ms} ms does not exceed "
                f"the wait/transfer/gather floor {fixed:.3f} ms"
            )
        self.t_unit = residual / (reference.depth * compute_waves(reference))
        return self.t_unit

    def factor_table(self, named_rows: list[tuple[str, PerfFactors]]) -> list[FactorRow]:
        rows = []
        for name, f in named_rows:
            lat = self.latency(f)
            rows.append(FactorRow(name, f, lat, self.throughput_per_gpu(f, lat)))
        return rows


def write_factor_table_csv(rows: list[FactorRow], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "D", "W", "B", "N", "M", "G", "latency_ms", "throughput_per_gpu"])
        for row in rows:
            f = row.factors
            writer.writerow([
                row.name, f.depth, f.width, f.batch, f.seq_len, f.parallel_models, f.gpus,
                f"{row.latency_ms:.3f}", f"{row.throughput_per_gpu:.3f}",
            ])


# -- stock configurations ------------------------------------------------------

DEFAULT_CAPACITY = 1.5e7        # work units per ms per GPU
DEFAULT_PCIE_TOKENS_PER_MS = 1000.0
DEFAULT_GATHER_MS = 0.2
DEFAULT_BATCH_TIMEOUT_MS = 10.0
REFERENCE_OBSERVED_LATENCY_MS = 11.6  # measured 12-layer baseline average


def baseline_reference(gpus: int = 4, arrival_rps: float = 2000.0) -> PerfFactors:
    """The 12-layer dense baseline served with dynamic batching, used for calibration."""
    return PerfFactors(
        depth=12, width=768, batch=8, seq_len=128, parallel_models=gpus, gpus=gpus,
        capacity=DEFAULT_CAPACITY, pcie_tokens_per_ms=DEFAULT_PCIE_TOKENS_PER_MS,
        gather_ms=0.0, wait_model=DynamicBatch(DEFAULT_BATCH_TIMEOUT_MS, arrival_rps),
    )


def student_parallel_factors(
    gpus: int = 4,
    students: int = 3,
    width_per_student: int = 256,
    depth: int = 2,
    typical_len: int = 32,
    batch: int = 4,
) -> PerfFactors:
    """A student group spanning GPUs: shallow, bin-padded lengths, no waiting queue."""
    return PerfFactors(
        depth=depth, width=width_per_student * students, batch=batch, seq_len=typical_len,
        parallel_models=4 * gpus, gpus=gpus,
        capacity=DEFAULT_CAPACITY, pcie_tokens_per_ms=DEFAULT_PCIE_TOKENS_PER_MS,
        gather_ms=DEFAULT_GATHER_MS if students > 1 and gpus > 1 else 0.0,
        wait_model=None,
    )


def reference_factor_rows(gpus: int = 4, arrival_rps: float = 2000.0) -> list[tuple[str, PerfFactors]]:
    """The six stock configurations compared in the factor ledger.

    The early-exit row uses an effective depth between its one-layer and
    full-depth extremes. The ensemble-of-candidates row inherits the
    deepest member's depth and the summed width of its members. The
    student-parallel row pads to the bin upper edge (8 tokens per bin).
    """
    base = baseline_reference(gpus, arrival_rps)
    rows = [
        ("bert_base_12l", base),
        ("tinybert_4l", replace(base, depth=4, width=312)),
        ("dynabert_6l", replace(base, depth=6, width=192)),
        ("deebert_early_exit", replace(base, depth=7, width=768)),
        ("cocktail_bagging", replace(base, depth=12, width=768 + 312 + 192 + 768)),
        ("student_parallel_2l", student_parallel_factors(gpus)),
    ]
    return rows
