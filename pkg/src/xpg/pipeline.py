"""Streamed execution of the paged expert model with real bytes.

Two loader contexts (one per tensor kind) and one compute context coordinate
through one-shot completion events. Loaders recycle the second-preceding
layer's blocks only after observing its compute-done event (WAR); compute
launches only after observing both of its layer's load-done events (RAW).
A strictly sequential mode executes the same task order inline for
deterministic debugging and must produce identical activations.
"""

from __future__ import annotations

import hashlib
import json
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DeadlockError, PageFaultError, XpgError
from .model import ExpertTensorId, ModelSpec, TensorKind, bf16_to_float32
from .paging import PageTable, target_layer
from .storage import StorageHierarchy

EVENT_WAIT_DEADLINE = 60.0

ROLE_LOAD = {TensorKind.GATE_UP: "load1", TensorKind.DOWN: "load2"}
ROLE_COMPUTE = "comp"


# ---------------------------------------------------------------------------
# events and the ordering log


class CompletionEvent:
    """One-shot signal with (iteration, layer, role) identity."""

    def __init__(self, iteration: int, layer: int, role: str):
        self.iteration = iteration
        self.layer = layer
        self.role = role
        self._event = threading.Event()

    def signal(self):
        if self._event.is_set():
            raise XpgError(f"event {self.key} signaled twice")
        self._event.set()

    def wait(self, abort: threading.Event | None = None, deadline: float = EVENT_WAIT_DEADLINE):
        start = time.perf_counter()
        while not self._event.wait(timeout=0.02):
            if abort is not None and abort.is_set():
                raise XpgError("pipeline aborted while waiting")
            if time.perf_counter() - start > deadline:
                raise DeadlockError(f"wait on {self.key} exceeded {deadline}s")

    def is_signaled(self) -> bool:
        return self._event.is_set()

    @property
    def key(self):
        return (self.iteration, self.layer, self.role)


class EventRegistry:
    def __init__(self):
        self._lock = threading.Lock()
        self._events = {}

    def get(self, iteration: int, layer: int, role: str) -> CompletionEvent:
        key = (iteration, layer, role)
        with self._lock:
            ev = self._events.get(key)
            if ev is None:
                ev = CompletionEvent(iteration, layer, role)
                self._events[key] = ev
            return ev


@dataclass(frozen=True)
class OrderingRecord:
    t: int
    event: str  # load-start | load-done | compute-start | compute-done | recycle
    iteration: int
    layer: int
    kind: int | None = None
    target_iteration: int | None = None
    target_layer: int | None = None
    wall: float = 0.0


class OrderingLog:
    def __init__(self):
        self._lock = threading.Lock()
        self._records = []

    def add(self, event, iteration, layer, kind=None, target_iteration=None, target_layer=None):
        with self._lock:
            rec = OrderingRecord(
                t=len(self._records),
                event=event,
                iteration=iteration,
                layer=layer,
                kind=kind,
                target_iteration=target_iteration,
                target_layer=target_layer,
                wall=time.perf_counter(),
            )
            self._records.append(rec)
            return rec

    def records(self):
        with self._lock:
            return list(self._records)


def validate_ordering(records) -> list[str]:
    """Return one message per RAW/WAR violation; empty means the log is clean."""
    first_seen = {}
    for rec in records:
        key = (rec.event, rec.iteration, rec.layer, rec.kind)
        first_seen.setdefault(key, rec.t)

    def seen_before(event, iteration, layer, kind, t):
        at = first_seen.get((event, iteration, layer, kind))
        return at is not None and at < t

    violations = []
    for rec in records:
        if rec.event == "compute-start":
            for kind in (1, 2):
                if not seen_before("load-done", rec.iteration, rec.layer, kind, rec.t):
                    violations.append(
                        f"RAW: compute-start iter={rec.iteration} layer={rec.layer} "
                        f"before load-done kind={kind}"
                    )
        elif rec.event == "recycle":
            if not seen_before(
                "compute-done", rec.target_iteration, rec.target_layer, None, rec.t
            ):
                violations.append(
                    f"WAR: recycle of iter={rec.target_iteration} "
                    f"layer={rec.target_layer} kind={rec.kind} before its compute-done"
                )
    return violations


# ---------------------------------------------------------------------------
# deterministic router and the toy expert compute


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def routed_experts(seed: int, token: int, layer: int, num_experts: int, top_k: int):
    """Experts handling a token: the top_k smallest hash scores, residency-blind."""
    k = min(top_k, num_experts)
    scores = [
        (_splitmix64(seed * 0x9E37 + token * 0x85EB + layer * 0xC2B2 + j), j)
        for j in range(1, num_experts + 1)
    ]
    scores.sort()
    return sorted(j for _, j in scores[:k])


@dataclass(frozen=True)
class ForwardSpec:
    tokens_per_step: int = 4
    top_k: int = 2
    router_seed: int = 0


def _silu(x: np.ndarray) -> np.ndarray:
    return x * (np.float32(1.0) / (np.float32(1.0) + np.exp(-x)))


def expert_output(gate_up: np.ndarray, down: np.ndarray, x: np.ndarray) -> np.ndarray:
    """down @ (silu(gate) * up) for one expert; float32 throughout."""
    f = gate_up.shape[0] // 2
    gate = gate_up[:f] @ x
    up = gate_up[f:] @ x
    return down @ (_silu(gate) * up)


def layer_forward(weights_of, spec: ModelSpec, fwd: ForwardSpec, layer: int, acts: np.ndarray) -> np.ndarray:
    """One MoE layer over all tokens; expert-major accumulation, fixed order.

    `weights_of(tid)` returns the float32 matrix for a tensor id, so the same
    math runs against paged blocks or the raw container.
    """
    out = np.zeros_like(acts)
    inv_k = np.float32(1.0 / fwd.top_k)
    for t in range(acts.shape[0]):
        x = acts[t]
        y = np.zeros_like(x)
        for j in routed_experts(fwd.router_seed, t, layer, spec.experts_per_layer, fwd.top_k):
            gate_up = weights_of(ExpertTensorId(layer, j, TensorKind.GATE_UP))
            down = weights_of(ExpertTensorId(layer, j, TensorKind.DOWN))
            y += expert_output(gate_up, down, x) * inv_k
        out[t] = y
    return out


def initial_activations(spec: ModelSpec, fwd: ForwardSpec, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed ^ 0xA5A5A5)
    return rng.standard_normal((fwd.tokens_per_step, spec.hidden_dim), dtype=np.float32)


def resident_baseline(
    iterations: int, spec: ModelSpec, container, fwd: ForwardSpec, acts: np.ndarray | None = None
) -> np.ndarray:
    """Fully-resident oracle: same compute, weights read straight from the container."""

    def weights_of(tid):
        return container.tensor_f32(tid)

    if acts is None:
        acts = initial_activations(spec, fwd, 0)
    acts = acts.copy()
    for _ in range(iterations):
        for layer in range(1, spec.num_layers + 1):
            acts = layer_forward(weights_of, spec, fwd, layer, acts)
    return acts


# ---------------------------------------------------------------------------
# the streamed runner


def _intervals_from_records(records) -> dict:
    """(iteration, layer) -> wall-clock spans of loads and compute."""
    spans = {}
    start = {}
    for rec in records:
        if rec.event in ("load-start", "compute-start"):
            start[(rec.event.split("-")[0], rec.iteration, rec.layer, rec.kind)] = rec.wall
        elif rec.event in ("load-done", "compute-done"):
            phase = rec.event.split("-")[0]
            t0 = start.get((phase, rec.iteration, rec.layer, rec.kind))
            if t0 is None:
                continue
            name = f"load{rec.kind}" if phase == "load" else "compute"
            spans.setdefault((rec.iteration, rec.layer), {})[name] = (t0, rec.wall)
    return spans


@dataclass
class RunReport:
    final_activations: np.ndarray
    arena_peak_bytes: int
    stall_seconds: float
    war_wait_seconds: float
    violations: list
    records: list
    intervals: dict = field(default_factory=dict)
    page_fault: str | None = None

    @property
    def checksum(self) -> str:
        return hashlib.sha256(self.final_activations.tobytes()).hexdigest()

    def to_json(self) -> str:
        doc = {
            "activation_checksum": self.checksum,
            "stall_ms": self.stall_seconds * 1e3,
            "war_wait_ms": self.war_wait_seconds * 1e3,
            "arena_peak_bytes": self.arena_peak_bytes,
            "violation_count": len(self.violations),
            "violations": self.violations,
            "page_fault": self.page_fault,
            "layer_intervals": {
                f"iter{it}.layer{ly}": spans for (it, ly), spans in sorted(self.intervals.items())
            },
        }
        return json.dumps(doc, indent=2)


def run_iterations(
    iterations: int,
    spec: ModelSpec,
    hierarchy: StorageHierarchy,
    fwd: ForwardSpec,
    mode: str = "threaded",
    acts: np.ndarray | None = None,
    **runner_kwargs,
) -> RunReport:
    """Run n full streamed iterations and return the report."""
    runner = StreamedRunner(spec, hierarchy, fwd, mode=mode, **runner_kwargs)
    return runner.run(iterations, acts=acts)


class StreamedRunner:
    """Executes the paged pipeline for n iterations over N layers.

    mode="threaded" runs loader(kind=1), loader(kind=2) and compute as three
    long-lived threads fed by ordered queues; mode="sequential" executes the
    identical task order inline with eagerly-resolved events.
    """

    def __init__(
        self,
        spec: ModelSpec,
        hierarchy: StorageHierarchy,
        fwd: ForwardSpec,
        mode: str = "threaded",
        compute_delay_fn=None,
        sabotage_skip_raw=None,  # (iteration, layer) whose RAW wait is skipped
        trace=None,
    ):
        if mode not in ("threaded", "sequential"):
            raise XpgError(f"unknown mode {mode!r}")
        self.spec = spec
        self.hierarchy = hierarchy
        self.fwd = fwd
        self.mode = mode
        self.compute_delay_fn = compute_delay_fn
        self.sabotage_skip_raw = sabotage_skip_raw
        self.table = PageTable(spec, trace=trace)
        self.events = EventRegistry()
        self.log = OrderingLog()
        self.abort = threading.Event()
        self.stall_seconds = 0.0
        self.war_wait_seconds = 0.0
        self._errors = []

    # -- loader side ---------------------------------------------------------

    def _materialize(self, iteration: int, layer: int, kind: TensorKind):
        spec = self.spec
        n = spec.num_layers
        if iteration > 1 or layer > 2:
            # WAR: the target layer's blocks are still readable until its
            # compute finishes; cold start (iter 1, layers 1-2) bypasses this.
            tgt = target_layer(layer, n)
            tgt_iter = iteration if layer > 2 else iteration - 1
            ev = self.events.get(tgt_iter, tgt, ROLE_COMPUTE)
            t0 = time.perf_counter()
            ev.wait(self.abort)
            self.war_wait_seconds += time.perf_counter() - t0
            self.log.add(
                "recycle", iteration, layer, kind=int(kind),
                target_iteration=tgt_iter, target_layer=tgt,
            )
            for expert in range(1, spec.experts_per_layer + 1):
                self.table.unmap_page(ExpertTensorId(tgt, expert, kind))
        self.log.add("load-start", iteration, layer, kind=int(kind))
        for expert in range(1, spec.experts_per_layer + 1):
            tid = ExpertTensorId(layer, expert, kind)
            self.table.map_page(tid)
            self.hierarchy.fetch(tid, self.table.loading_view(tid))
            self.table.mark_resident(tid)
        self.log.add("load-done", iteration, layer, kind=int(kind))
        self.events.get(iteration, layer, ROLE_LOAD[kind]).signal()

    # -- compute side ---------------------------------------------------------

    def _paged_weights(self, tid: ExpertTensorId) -> np.ndarray:
        words = np.frombuffer(self.table.read_page(tid), dtype="<u2")
        return bf16_to_float32(words).reshape(self.spec.tensor_shape(tid.kind))

    def _forward(self, iteration: int, layer: int, acts: np.ndarray) -> np.ndarray:
        skip = self.sabotage_skip_raw == (iteration, layer)
        if not skip:
            for kind in (TensorKind.GATE_UP, TensorKind.DOWN):
                ev = self.events.get(iteration, layer, ROLE_LOAD[kind])
                t0 = time.perf_counter()
                ev.wait(self.abort)
                self.stall_seconds += time.perf_counter() - t0
        self.log.add("compute-start", iteration, layer)
        if self.compute_delay_fn is not None:
            delay = self.compute_delay_fn(iteration, layer)
            if delay > 0:
                time.sleep(delay)
        out = layer_forward(self._paged_weights, self.spec, self.fwd, layer, acts)
        self.log.add("compute-done", iteration, layer)
        self.events.get(iteration, layer, ROLE_COMPUTE).signal()
        return out

    # -- drivers ---------------------------------------------------------------

    def _steps(self, iterations: int):
        for it in range(1, iterations + 1):
            for layer in range(1, self.spec.num_layers + 1):
                yield (it, layer)

    def _loader_main(self, kind: TensorKind, tasks):
        try:
            for iteration, layer in tasks:
                if self.abort.is_set():
                    return
                self._materialize(iteration, layer, kind)
        except BaseException as exc:  # surfaced by run()
            self._errors.append(exc)
            self.abort.set()

    def run(self, iterations: int, acts: np.ndarray | None = None) -> RunReport:
        if iterations < 1:
            raise XpgError("need at least one iteration")
        if acts is None:
            acts = initial_activations(self.spec, self.fwd, 0)
        acts = acts.copy()
        steps = list(self._steps(iterations))
        page_fault = None

        if self.mode == "sequential":
            try:
                # inline order: mat(1), mat(2), then fwd(g) | mat(g+2) interleaved
                for kind in (TensorKind.GATE_UP, TensorKind.DOWN):
                    self._materialize(*steps[0], kind)
                if len(steps) > 1:
                    for kind in (TensorKind.GATE_UP, TensorKind.DOWN):
                        self._materialize(*steps[1], kind)
                for g, (it, ly) in enumerate(steps):
                    acts = self._forward(it, ly, acts)
                    if g + 2 < len(steps):
                        for kind in (TensorKind.GATE_UP, TensorKind.DOWN):
                            self._materialize(*steps[g + 2], kind)
            except PageFaultError as exc:
                page_fault = str(exc)
        else:
            loaders = [
                threading.Thread(
                    target=self._loader_main, args=(kind, steps), daemon=True,
                    name=f"loader-{int(kind)}",
                )
                for kind in (TensorKind.GATE_UP, TensorKind.DOWN)
            ]
            result = {}

            def compute_main():
                nonlocal acts
                try:
                    a = acts
                    for it, ly in steps:
                        if self.abort.is_set():
                            return
                        a = self._forward(it, ly, a)
                    result["acts"] = a
                except PageFaultError as exc:
                    result["page_fault"] = str(exc)
                    self.abort.set()
                except BaseException as exc:
                    self._errors.append(exc)
                    self.abort.set()

            compute = threading.Thread(target=compute_main, daemon=True, name="compute")
            for th in loaders:
                th.start()
            compute.start()
            compute.join(timeout=EVENT_WAIT_DEADLINE * 4)
            if compute.is_alive():
                self.abort.set()
                raise DeadlockError("compute thread did not finish")
            self.abort.set()  # release any loader still parked on a dead event
            for th in loaders:
                th.join(timeout=10.0)
            page_fault = result.get("page_fault")
            if page_fault is None:
                if "acts" in result:
                    acts = result["acts"]
                elif self._errors:
                    raise self._errors[0]
                else:
                    raise DeadlockError("compute produced no result")

        records = self.log.records()
        return RunReport(
            final_activations=acts,
            arena_peak_bytes=self.table.arena_peak_bytes(),
            stall_seconds=self.stall_seconds,
            war_wait_seconds=self.war_wait_seconds,
            violations=validate_ordering(records),
            records=records,
            intervals=_intervals_from_records(records),
            page_fault=page_fault,
        )
