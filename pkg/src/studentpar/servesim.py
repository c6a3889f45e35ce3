"""Deterministic discrete-event simulator of the student-parallel serving system.

One global dispatcher round-robins arrivals across nodes. Each node owns a
length-aware buffer (bounded FIFO of small same-length-bin batches) and a
set of student groups; whenever a group is idle the head buffer element is
dispatched immediately. Service times come from the calibrated analytic
performance model. A controller drops one student per group when a buffer
fills (starting more groups) and adds one back after a sustained idle
window. A dynamic-batching baseline mode replaces immediate dispatch with
a waiting queue and full-length padding, for ablation runs.

The simulated clock is real-valued milliseconds; ties break by event
insertion order, so identical inputs give identical outputs.
"""

from __future__ import annotations

import csv
import heapq
import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .distill import AccuracyTable
from .perfmodel import PerfFactors, PerfModel
from .seeding import rng_for


@dataclass(frozen=True)
class Request:
    id: int
    arrival_ms: float
    length_tokens: int


@dataclass(frozen=True)
class PoissonSpec:
    """Synthetic open-loop workload: Poisson arrivals, histogram lengths."""

    rps: float
    duration_ms: float
    length_weights: tuple[float, ...] | None = None  # one weight per length bin


@dataclass(frozen=True)
class TraceFile:
    path: str
    scale: float = 1.0


DEFAULT_LENGTH_WEIGHTS = (1.0, 2.0, 3.0, 3.0, 2.0, 1.5, 1.0, 0.8, 0.6, 0.5, 0.4, 0.3, 0.25, 0.2, 0.15, 0.1)


def generate_workload(kind, seed: int, max_len: int = 128, bin_width: int = 8) -> list[Request]:
    """Arrival-sorted requests, deterministic per seed."""
    if isinstance(kind, PoissonSpec):
        if kind.rps <= 0:
            raise ValueError("rps must be positive")
        rng = rng_for(seed, "workload")
        weights = np.asarray(kind.length_weights or DEFAULT_LENGTH_WEIGHTS, dtype=np.float64)
        n_bins = len(weights)
        if n_bins * bin_width > max_len:
            raise ValueError("length_weights cover more than max_len tokens")
        probs = weights / weights.sum()
        requests = []
        t = rng.exponential(1000.0 / kind.rps)
        rid = 0
        while t <= kind.duration_ms:
            b = int(rng.choice(n_bins, p=probs))
            length = int(rng.integers(b * bin_width + 1, (b + 1) * bin_width + 1))
            requests.append(Request(rid, t, length))
            rid += 1
            t += rng.exponential(1000.0 / kind.rps)
        return requests
    if isinstance(kind, TraceFile):
        requests = []
        with open(kind.path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["arrival_ms", "length_tokens"]:
                raise ValueError(f"trace line 1: expected header arrival_ms,length_tokens, got {header}")
            last_t = -math.inf
            for lineno, row in enumerate(reader, start=2):
                try:
                    t, length = float(row[0]), int(row[1])
                except (ValueError, IndexError) as exc:
                    raise ValueError(f"trace line {lineno}: malformed row {row!r}") from exc
                if t < last_t:
                    raise ValueError(f"trace line {lineno}: arrival times must be nondecreasing")
                if length < 1:
                    raise ValueError(f"trace line {lineno}: length must be >= 1")
                last_t = t
                requests.append(Request(len(requests), t * kind.scale, length))
        return requests
    raise TypeError(f"unknown workload kind {type(kind).__name__}")


def write_trace(requests: list[Request], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arrival_ms", "length_tokens"])
        for r in requests:
            writer.writerow([f"{r.arrival_ms:.6f}", r.length_tokens])


# -- length-aware buffer -------------------------------------------------------

MERGED = "merged"
APPENDED = "appended"
REJECTED = "rejected"


@dataclass
class BufferElement:
    """Up to max_merge requests sharing one length bin, padded to its upper edge."""

    bin: int
    padded_len: int
    requests: list[Request] = field(default_factory=list)
    created_ms: float = 0.0

    @property
    def size(self) -> int:
        return len(self.requests)


class LengthAwareBuffer:
    """Bounded FIFO of buffer elements with an O(1) bin index.

    ``index`` maps a length bin to its unique open (non-full) element, if
    any; entries are removed the moment an element fills or leaves the
    FIFO, so every push and pop touches a constant number of elements.
    ``op_touches`` records the element touches of the last operation, for
    the constant-work property tests.
    """

    def __init__(self, num_bins: int, bin_width: int, max_merge: int, capacity: int,
                 pad_to_max: bool = False):
        if min(num_bins, bin_width, max_merge, capacity) < 1:
            raise ValueError("buffer dimensions must be >= 1")
        self.num_bins = num_bins
        self.bin_width = bin_width
        self.max_len = num_bins * bin_width
        self.max_merge = max_merge
        self.capacity = capacity
        self.pad_to_max = pad_to_max
        self.fifo: deque[BufferElement] = deque()
        self.index: dict[int, BufferElement] = {}
        self.op_touches = 0

    def __len__(self) -> int:
        return len(self.fifo)

    def is_empty(self) -> bool:
        return not self.fifo

    def is_full(self) -> bool:
        return len(self.fifo) >= self.capacity

    def bin_of(self, length: int) -> int:
        if length < 1:
            raise ValueError("length must be >= 1")
        length = min(length, self.max_len)  # longer samples are clipped
        return (length + self.bin_width - 1) // self.bin_width - 1

    def push(self, req: Request, now_ms: float = 0.0) -> str:
        self.op_touches = 0
        b = self.num_bins - 1 if self.pad_to_max else self.bin_of(req.length_tokens)
        el = self.index.get(b)
        if el is not None:
            self.op_touches = 1
            el.requests.append(req)
            if el.size >= self.max_merge:
                del self.index[b]
            return MERGED
        if self.is_full():
            return REJECTED
        el = BufferElement(bin=b, padded_len=(b + 1) * self.bin_width, requests=[req], created_ms=now_ms)
        self.op_touches = 1
        self.fifo.append(el)
        if el.size < self.max_merge:  # a size-1 element is already full when max_merge == 1
            self.index[b] = el
        return APPENDED

    def pop(self) -> BufferElement:
        if not self.fifo:
            raise IndexError("pop from empty buffer")
        el = self.fifo.popleft()
        self.op_touches = 1
        if self.index.get(el.bin) is el:
            del self.index[el.bin]
        return el

    def head(self) -> BufferElement | None:
        return self.fifo[0] if self.fifo else None


def bin_of(length: int, cfg) -> int:
    """Length bin for a request under the cluster's binning, clipping long samples."""
    if length < 1:
        raise ValueError("length must be >= 1")
    length = min(length, cfg.max_len)
    return (length + cfg.bin_width - 1) // cfg.bin_width - 1


def buffer_push(buf: LengthAwareBuffer, req: Request, now_ms: float = 0.0) -> str:
    return buf.push(req, now_ms)


def buffer_pop(buf: LengthAwareBuffer) -> BufferElement:
    return buf.pop()


# -- allocation and configuration ----------------------------------------------


def group_count(group_size: int, gpus: int, replicas_per_gpu: int) -> int:
    """Replica groups a node can host: floor(replicas * G / S), at least 1."""
    return max(1, (replicas_per_gpu * gpus) // group_size)


def allocate_students(group_size: int, gpus: int, replicas_per_gpu: int) -> dict[tuple[int, int], int]:
    """GPU placement (group j, student i) -> (i + j*S) mod G for every replica group."""
    if group_size < 1 or gpus < 1:
        raise ValueError("group_size and gpus must be >= 1")
    total = group_count(group_size, gpus, replicas_per_gpu)
    return {
        (j, i): (i + j * group_size) % gpus
        for j in range(total)
        for i in range(group_size)
    }


@dataclass
class ControllerConfig:
    max_students: int
    accuracy_table: AccuracyTable
    min_students: int = 1
    idle_window_ms: float = 120_000.0  # sustained-idle window before adding a student back

    def __post_init__(self):
        if not 1 <= self.min_students <= self.max_students:
            raise ValueError("need 1 <= min_students <= max_students")
        if len(self.accuracy_table) < self.max_students:
            raise ValueError("accuracy_table must cover 1..max_students")


@dataclass
class ClusterConfig:
    controller: ControllerConfig
    nodes: int = 1
    gpus_per_node: int = 4
    group_size: int = 3           # students per group at start
    replicas_per_gpu: int = 3     # simulated MPS slots per GPU
    bin_width: int = 8
    num_bins: int = 16
    max_len: int = 128
    max_merge: int = 4
    pad_to_max: bool = False           # baseline ablation: pad every sample to max_len
    batch_timeout_ms: float | None = None  # baseline ablation: waiting-queue dispatch

    def __post_init__(self):
        if min(self.nodes, self.gpus_per_node, self.group_size, self.replicas_per_gpu,
               self.bin_width, self.num_bins, self.max_len, self.max_merge) < 1:
            raise ValueError("all cluster counts must be >= 1")
        if self.num_bins * self.bin_width != self.max_len:
            raise ValueError("num_bins * bin_width must equal max_len")
        if not self.controller.min_students <= self.group_size <= self.controller.max_students:
            raise ValueError("group_size must lie within the controller's [min, max] range")


@dataclass
class ServiceFactors:
    """Calibrated performance model plus the per-student factor constants."""

    model: PerfModel
    depth: int
    width_per_student: int
    capacity: float
    pcie_tokens_per_ms: float
    gather_ms: float = 0.2


def service_time(element: BufferElement, k_students: int, cfg: ClusterConfig,
                 factors: ServiceFactors, active_groups: int = 1) -> float:
    """Inference time of one buffer element on a group of k students.

    No waiting term: queueing is simulated, not modeled. The gather cost
    applies only when the group actually spans GPUs.
    """
    spans = k_students > 1 and cfg.gpus_per_node > 1
    f = PerfFactors(
        depth=factors.depth,
        width=factors.width_per_student * k_students,
        batch=element.size,
        seq_len=element.padded_len,
        parallel_models=max(1, active_groups),
        gpus=cfg.gpus_per_node,
        capacity=factors.capacity,
        pcie_tokens_per_ms=factors.pcie_tokens_per_ms,
        gather_ms=factors.gather_ms if spans else 0.0,
        wait_model=None,
    )
    return factors.model.latency(f)


# -- controller ------------------------------------------------------------------

DROP_ONE = "drop_one"
ADD_ONE = "add_one"
HOLD = "hold"


def decide_controller_action(
    k: int,
    min_students: int,
    max_students: int,
    any_buffer_full: bool,
    all_buffers_idle_ms: float | None,
    idle_students: int,
    occupied_students: int,
    idle_window_ms: float,
) -> str:
    """Pure adaptation rule evaluated at every event boundary.

    Drop one student per group when a buffer has filled (more, cheaper
    groups); add one back when every buffer has been empty for the idle
    window and idle groups outweigh occupied ones.
    """
    if any_buffer_full and k > min_students:
        return DROP_ONE
    if (
        k < max_students
        and all_buffers_idle_ms is not None
        and all_buffers_idle_ms >= idle_window_ms
        and idle_students > occupied_students
    ):
        return ADD_ONE
    return HOLD


@dataclass
class CompletionRecord:
    request_id: int
    arrival_ms: float
    completion_ms: float
    length_tokens: int

    @property
    def latency_ms(self) -> float:
        return self.completion_ms - self.arrival_ms


@dataclass
class SimMetrics:
    avg_latency_ms: float | None
    p95_latency_ms: float | None
    throughput_per_gpu: float | None
    completed: int
    student_number_timeline: list[tuple[float, int]]
    accuracy_timeline: list[tuple[float, float]]
    generated: int = 0
    rejected_pushes: int = 0
    per_request: list[CompletionRecord] = field(default_factory=list, repr=False)


def nearest_rank_percentile(values: list[float], pct: float) -> float:
    """Nearest-rank percentile: the ceil(pct/100 * n)-th smallest value."""
    if not values:
        raise ValueError("no values")
    ordered = sorted(values)
    rank = max(1, math.ceil(pct / 100.0 * len(ordered)))
    return ordered[rank - 1]


def _round6(x):
    return None if x is None else round(float(x), 6)


def metrics_to_json_dict(m: SimMetrics) -> dict:
    return {
        "avg_latency_ms": _round6(m.avg_latency_ms),
        "p95_latency_ms": _round6(m.p95_latency_ms),
        "throughput_per_gpu": _round6(m.throughput_per_gpu),
        "completed": m.completed,
        "student_number_timeline": [[_round6(t), k] for t, k in m.student_number_timeline],
        "accuracy_timeline": [[_round6(t), _round6(a)] for t, a in m.accuracy_timeline],
    }


def write_metrics_json(m: SimMetrics, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(metrics_to_json_dict(m), fh, indent=1)
        fh.write("\n")


def write_latency_csv(records: list[CompletionRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["request_id", "arrival_ms", "completion_ms", "latency_ms", "length_tokens"])
        for r in records:
            writer.writerow([
                r.request_id, f"{r.arrival_ms:.6f}", f"{r.completion_ms:.6f}",
                f"{r.latency_ms:.6f}", r.length_tokens,
            ])


class _Node:
    def __init__(self, cfg: ClusterConfig, k: int):
        self.buffer = LengthAwareBuffer(
            cfg.num_bins, cfg.bin_width, cfg.max_merge,
            capacity=group_count(k, cfg.gpus_per_node, cfg.replicas_per_gpu),
            pad_to_max=cfg.pad_to_max,
        )
        self.retry: deque[Request] = deque()
        self.busy = 0
        self.empty_since: float | None = 0.0

    def target_groups(self, cfg: ClusterConfig, k: int) -> int:
        return group_count(k, cfg.gpus_per_node, cfg.replicas_per_gpu)


_ARRIVAL, _COMPLETION, _TIMER, _HEARTBEAT = "arrival", "completion", "timer", "heartbeat"
HEARTBEAT_MS = 100.0


class Simulation:
    """Event loop state; use run_simulation unless you need to poke internals."""

    def __init__(self, cluster: ClusterConfig, workload: list[Request], factors: ServiceFactors, seed: int = 0):
        if factors.model.t_unit is None:
            raise RuntimeError("perf model must be calibrated before simulation")
        self.cfg = cluster
        self.factors = factors
        self.seed = seed  # reserved: all randomness lives in workload generation
        self.k = cluster.group_size
        self.nodes = [_Node(cluster, self.k) for _ in range(cluster.nodes)]
        self.events: list[tuple[float, int, str, object]] = []
        self._seq = 0
        self.records: list[CompletionRecord] = []
        self.element_waits: list[float] = []  # buffer residence per dispatched element
        self.rejected_pushes = 0
        self.generated = len(workload)
        self.k_timeline: list[tuple[float, int]] = [(0.0, self.k)]
        self.acc_timeline: list[tuple[float, float]] = [
            (0.0, cluster.controller.accuracy_table.val_accuracy(self.k))
        ]
        for i, req in enumerate(workload):
            self._push_event(req.arrival_ms, _ARRIVAL, (i % cluster.nodes, req))
        horizon = (max((r.arrival_ms for r in workload), default=0.0)
                   + cluster.controller.idle_window_ms + 5 * HEARTBEAT_MS)
        t = 0.0
        while t <= horizon:
            self._push_event(t, _HEARTBEAT, None)
            t += HEARTBEAT_MS

    def _push_event(self, t: float, kind: str, payload) -> None:
        heapq.heappush(self.events, (t, self._seq, kind, payload))
        self._seq += 1

    # -- helpers ---------------------------------------------------------

    def _set_k(self, new_k: int, now: float) -> None:
        self.k = new_k
        for node in self.nodes:
            node.buffer.capacity = node.target_groups(self.cfg, new_k)
        self.k_timeline.append((now, new_k))
        self.acc_timeline.append((now, self.cfg.controller.accuracy_table.val_accuracy(new_k)))

    def _head_dispatchable(self, node: _Node, now: float) -> bool:
        el = node.buffer.head()
        if el is None:
            return False
        if self.cfg.batch_timeout_ms is None:
            return True
        return el.size >= self.cfg.max_merge or now - el.created_ms >= self.cfg.batch_timeout_ms - 1e-9

    def _dispatch(self, node: _Node, now: float) -> None:
        while node.busy < node.target_groups(self.cfg, self.k) and self._head_dispatchable(node, now):
            el = node.buffer.pop()
            self.element_waits.append(now - el.created_ms)
            node.busy += 1
            dt = service_time(el, self.k, self.cfg, self.factors, active_groups=node.busy)
            self._push_event(now + dt, _COMPLETION, (node, el))

    def _try_push(self, node: _Node, req: Request, now: float) -> bool:
        result = node.buffer.push(req, now)
        if result == REJECTED:
            return False
        if result == APPENDED and self.cfg.batch_timeout_ms is not None:
            self._push_event(now + self.cfg.batch_timeout_ms, _TIMER, None)
        return True

    def controller_tick(self, now: float) -> str:
        ctl = self.cfg.controller
        any_full = any(n.buffer.is_full() for n in self.nodes)
        if all(n.buffer.is_empty() and n.empty_since is not None for n in self.nodes):
            idle_ms = now - max(n.empty_since for n in self.nodes)
        else:
            idle_ms = None
        idle_students = sum(max(0, n.target_groups(self.cfg, self.k) - n.busy) for n in self.nodes) * self.k
        occupied_students = sum(n.busy for n in self.nodes) * self.k
        action = decide_controller_action(
            self.k, ctl.min_students, ctl.max_students, any_full, idle_ms,
            idle_students, occupied_students, ctl.idle_window_ms,
        )
        if action == DROP_ONE:
            self._set_k(self.k - 1, now)
        elif action == ADD_ONE:
            self._set_k(self.k + 1, now)
            for node in self.nodes:  # a fresh idle window must elapse before the next add
                if node.empty_since is not None:
                    node.empty_since = now
        return action

    def _boundary(self, now: float) -> None:
        # retries first, preserving arrival order ahead of newer rejects
        for node in self.nodes:
            while node.retry and self._try_push(node, node.retry[0], now):
                node.retry.popleft()
        self.controller_tick(now)
        for node in self.nodes:
            self._dispatch(node, now)
            if node.buffer.is_empty():
                if node.empty_since is None:
                    node.empty_since = now
            else:
                node.empty_since = None

    def run(self) -> SimMetrics:
        while self.events:
            now, _, kind, payload = heapq.heappop(self.events)
            if kind == _ARRIVAL:
                node_id, req = payload
                node = self.nodes[node_id]
                if node.retry or not self._try_push(node, req, now):
                    # a full buffer defers the request to the next event boundary
                    self.rejected_pushes += 1
                    node.retry.append(req)
            elif kind == _COMPLETION:
                node, el = payload
                node.busy -= 1
                for req in el.requests:
                    self.records.append(CompletionRecord(req.id, req.arrival_ms, now, req.length_tokens))
            self._boundary(now)
        return self._metrics()

    def _metrics(self) -> SimMetrics:
        lats = [r.latency_ms for r in self.records]
        if lats:
            span_ms = max(r.completion_ms for r in self.records) - min(r.arrival_ms for r in self.records)
            total_gpus = self.cfg.nodes * self.cfg.gpus_per_node
            throughput = 1000.0 * len(lats) / (span_ms * total_gpus) if span_ms > 0 else None
            avg = float(np.mean(lats))
            p95 = nearest_rank_percentile(lats, 95.0)
        else:
            avg = p95 = throughput = None
        return SimMetrics(
            avg_latency_ms=avg,
            p95_latency_ms=p95,
            throughput_per_gpu=throughput,
            completed=len(self.records),
            student_number_timeline=self.k_timeline,
            accuracy_timeline=self.acc_timeline,
            generated=self.generated,
            rejected_pushes=self.rejected_pushes,
            per_request=sorted(self.records, key=lambda r: (r.arrival_ms, r.request_id)),
        )


def controller_tick(sim: Simulation, now_ms: float) -> str:
    return sim.controller_tick(now_ms)


def run_simulation(cluster: ClusterConfig, workload: list[Request], factors: ServiceFactors,
                   seed: int = 0) -> SimMetrics:
    """Run the event loop to completion and return the metrics."""
    return Simulation(cluster, workload, factors, seed).run()
