"""Storage backends and bandwidth-proportional expert placement.

Placement assigns whole expert tensors per layer. With no residency fraction
imposed, fractions follow the bandwidth-proportional rule x_k = B_k / sum(B),
realized greedily so each backend's per-layer bytes stay within one tensor of
its target and per-layer finish times stay within (largest tensor)/min(B).
When a residency fraction alpha is imposed (two-backend prototype regime),
the first round(alpha*L) experts of each layer live on the compressed device
backend and the rest on the host backend.

Loading-time estimates: a layer's latency is the slowest backend's share
(bytes counted uncompressed; the device bandwidth is an effective
post-decompression rate), and the per-iteration aggregate is the sum over
layers.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum

from .codec import CompressedModel
from .errors import BackendMissError, CapacityExceededError, OutOfRangeError
from .model import (
    ExpertTensorId,
    ModelSpec,
    TensorKind,
    WeightContainer,
    iter_tensor_ids,
)


class BackendKind(str, Enum):
    COMPRESSED_DEVICE = "compressed_device"
    HOST_OFFLOAD = "host_offload"


@dataclass(frozen=True)
class Backend:
    backend_id: int
    kind: BackendKind
    bandwidth: float  # bytes/second, effective (post-decompression for device)
    capacity: int     # bytes

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise OutOfRangeError(f"backend {self.backend_id}: bandwidth must be > 0")
        if self.capacity < 0:
            raise OutOfRangeError(f"backend {self.backend_id}: negative capacity")


@dataclass
class PlacementPlan:
    fractions: dict            # backend_id -> x_k
    assignment: dict           # ExpertTensorId -> backend_id
    per_layer_bytes: dict      # (layer, backend_id) -> bytes
    spec: ModelSpec = None

    def backend_for(self, tid: ExpertTensorId) -> int:
        try:
            return self.assignment[tid]
        except KeyError:
            raise BackendMissError(f"{tid} is not in the placement plan") from None

    def layer_bytes(self, layer: int, backend_id: int) -> int:
        return self.per_layer_bytes.get((layer, backend_id), 0)


@dataclass(frozen=True)
class LoadEstimate:
    per_backend: tuple       # per layer: dict backend_id -> seconds
    tau_load_layer: tuple    # per layer: max over backends
    tau_load: float          # sum over layers


def _check_capacities(per_backend_bytes: dict, backends) -> None:
    for b in backends:
        assigned = per_backend_bytes.get(b.backend_id, 0)
        if assigned > b.capacity:
            raise CapacityExceededError(
                f"backend {b.backend_id} holds {assigned} bytes, capacity {b.capacity}"
            )


def _layer_tensors(spec: ModelSpec, layer: int):
    for expert in range(1, spec.experts_per_layer + 1):
        for kind in (TensorKind.GATE_UP, TensorKind.DOWN):
            yield ExpertTensorId(layer, expert, kind)


def plan_placement(
    spec: ModelSpec, backends, alpha: float | None = None
) -> PlacementPlan:
    """Assign every expert tensor to a backend.

    alpha=None: pure bandwidth balancing, x_k = B_k / sum(B).
    alpha given: two-backend regime with x_dev = alpha, x_host = 1 - alpha,
    realized as whole experts per layer (device gets experts 1..round(alpha*L)).
    """
    if not backends:
        raise OutOfRangeError("need at least one backend")
    ids = sorted(b.backend_id for b in backends)
    if len(set(ids)) != len(ids):
        raise OutOfRangeError("backend ids must be unique")

    if alpha is None:
        plan = _plan_bandwidth_proportional(spec, backends)
    else:
        plan = _plan_alpha_split(spec, backends, alpha)

    totals = {}
    for (layer, bid), nbytes in plan.per_layer_bytes.items():
        totals[bid] = totals.get(bid, 0) + nbytes
    _check_capacities(totals, backends)
    return plan


def _plan_bandwidth_proportional(spec, backends) -> PlacementPlan:
    total_bw = sum(b.bandwidth for b in backends)
    fractions = {b.backend_id: b.bandwidth / total_bw for b in backends}
    assignment = {}
    per_layer = {}
    bw = {b.backend_id: b.bandwidth for b in backends}
    order = sorted(bw)
    for layer in range(1, spec.num_layers + 1):
        assigned = {bid: 0 for bid in order}
        # largest tensors first, each to the backend that finishes it earliest
        tensors = sorted(
            _layer_tensors(spec, layer),
            key=lambda t: (-spec.sigma(t.kind), t.expert, int(t.kind)),
        )
        for tid in tensors:
            size = spec.sigma(tid.kind)
            best = min(order, key=lambda bid: ((assigned[bid] + size) / bw[bid], bid))
            assigned[best] += size
            assignment[tid] = best
        for bid, nbytes in assigned.items():
            per_layer[(layer, bid)] = nbytes
    return PlacementPlan(fractions, assignment, per_layer, spec)


def _plan_alpha_split(spec, backends, alpha: float) -> PlacementPlan:
    if not 0.0 < alpha <= 1.0:
        raise OutOfRangeError(f"alpha must lie in (0, 1], got {alpha}")
    device = [b for b in backends if b.kind == BackendKind.COMPRESSED_DEVICE]
    host = [b for b in backends if b.kind == BackendKind.HOST_OFFLOAD]
    if len(device) != 1 or len(host) != 1:
        raise OutOfRangeError(
            "the residency split needs exactly one device and one host backend"
        )
    dev_id, host_id = device[0].backend_id, host[0].backend_id
    l = spec.experts_per_layer
    on_device = max(1, round(alpha * l)) if alpha > 0 else 0
    on_device = min(on_device, l)
    assignment = {}
    per_layer = {}
    for layer in range(1, spec.num_layers + 1):
        dev_bytes = 0
        for tid in _layer_tensors(spec, layer):
            bid = dev_id if tid.expert <= on_device else host_id
            assignment[tid] = bid
            if bid == dev_id:
                dev_bytes += spec.sigma(tid.kind)
        per_layer[(layer, dev_id)] = dev_bytes
        per_layer[(layer, host_id)] = spec.layer_bytes - dev_bytes
    fractions = {dev_id: alpha, host_id: 1.0 - alpha}
    return PlacementPlan(fractions, assignment, per_layer, spec)


def estimate_load(plan: PlacementPlan, backends, spec: ModelSpec) -> LoadEstimate:
    """Per-layer and aggregate loading latency for a placement."""
    bw = {b.backend_id: b.bandwidth for b in backends}
    per_backend = []
    per_layer = []
    for layer in range(1, spec.num_layers + 1):
        taus = {
            bid: plan.layer_bytes(layer, bid) / bw[bid]
            for bid in bw
        }
        per_backend.append(taus)
        per_layer.append(max(taus.values()) if taus else 0.0)
    return LoadEstimate(
        per_backend=tuple(per_backend),
        tau_load_layer=tuple(per_layer),
        tau_load=float(sum(per_layer)),
    )


def tau_layer_for_alpha(
    spec: ModelSpec, b_dev: float, b_host: float, alpha: float
) -> float:
    """Per-layer loading latency when fraction alpha streams from the device."""
    dev = alpha * spec.layer_bytes / b_dev
    host = (1.0 - alpha) * spec.layer_bytes / b_host
    return max(dev, host)


def tau_load_for_alpha_layers(
    spec: ModelSpec, b_dev: float, b_host: float, alpha_layers
) -> float:
    """Aggregate loading latency for possibly heterogeneous per-layer fractions."""
    return sum(tau_layer_for_alpha(spec, b_dev, b_host, a) for a in alpha_layers)


class StorageHierarchy:
    """Serves tensor bytes into physical blocks from the planned backend.

    Host fetches copy raw container bytes; device fetches decompress through
    the codec. Both deliver the exact original bytes. The optional delay hook
    (tid -> seconds) is the race-amplification knob used by the tests.
    """

    def __init__(
        self,
        container: WeightContainer,
        compressed: CompressedModel,
        plan: PlacementPlan,
        backends,
        delay_fn=None,
    ):
        self.container = container
        self.compressed = compressed
        self.plan = plan
        self.backends = {b.backend_id: b for b in backends}
        self.delay_fn = delay_fn

    def fetch(self, tid: ExpertTensorId, dest: memoryview) -> None:
        bid = self.plan.backend_for(tid)
        backend = self.backends[bid]
        if self.delay_fn is not None:
            delay = self.delay_fn(tid)
            if delay > 0:
                time.sleep(delay)
        if backend.kind == BackendKind.HOST_OFFLOAD:
            data = self.container.tensor_bytes(tid)
        else:
            data = self.compressed.tensor_bytes(tid)
        if len(data) != len(dest):
            raise BackendMissError(
                f"{tid}: fetched {len(data)} bytes into a {len(dest)}-byte block"
            )
        dest[:] = data
