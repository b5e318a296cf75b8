"""Run configuration: typed blocks loaded from a JSON file, strictly validated.

Unknown keys are rejected so a typo never silently falls back to a default.
All randomized behavior (weights, router, injected delays) derives from the
single model seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .model import ModelSpec
from .planner import PlannerState
from .simulate import SimConfig
from .storage import Backend, BackendKind


def _take(block: dict, name: str, cls) -> dict:
    if not isinstance(block, dict):
        raise ConfigError(f"block '{name}' must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(block) - known
    if unknown:
        raise ConfigError(f"block '{name}' has unknown keys: {sorted(unknown)}")
    return block


@dataclass(frozen=True)
class ModelBlock:
    num_layers: int = 8
    experts_per_layer: int = 8
    hidden_dim: int = 64
    intermediate_dim: int = 128
    seed: int = 7

    def spec(self) -> ModelSpec:
        try:
            return ModelSpec(
                self.num_layers, self.experts_per_layer,
                self.hidden_dim, self.intermediate_dim,
            )
        except Exception as exc:
            raise ConfigError(f"invalid model geometry: {exc}") from exc


@dataclass(frozen=True)
class BackendBlock:
    kind: str = "compressed_device"
    bandwidth_bytes_per_s: float = 3e9
    capacity_bytes: int = 1 << 30

    def backend(self, backend_id: int) -> Backend:
        try:
            kind = BackendKind(self.kind)
        except ValueError:
            raise ConfigError(
                f"backend kind must be one of "
                f"{[k.value for k in BackendKind]}, got {self.kind!r}"
            ) from None
        if self.bandwidth_bytes_per_s <= 0:
            raise ConfigError("backend bandwidth must be positive")
        return Backend(backend_id, kind, float(self.bandwidth_bytes_per_s),
                       int(self.capacity_bytes))


@dataclass(frozen=True)
class PipelineBlock:
    tokens_per_step: int = 4
    top_k: int = 2
    iterations: int = 3
    mode: str = "threaded"
    alpha: float | None = None           # None -> bandwidth-proportional placement
    fetch_delay_ms: tuple = (0.0, 0.0)   # uniform range per tensor fetch
    compute_delay_ms: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.mode not in ("threaded", "sequential"):
            raise ConfigError(f"pipeline mode must be threaded|sequential, got {self.mode!r}")
        if self.tokens_per_step < 1 or self.top_k < 1 or self.iterations < 1:
            raise ConfigError("tokens_per_step, top_k and iterations must be >= 1")
        for name in ("fetch_delay_ms", "compute_delay_ms"):
            rng = getattr(self, name)
            if len(rng) != 2 or rng[0] < 0 or rng[1] < rng[0]:
                raise ConfigError(f"{name} must be a [lo, hi] range with 0 <= lo <= hi")


@dataclass(frozen=True)
class SimBlock:
    tau_comp_theory_s: float = 4.03e-3
    batch_size: int = 8
    context_start: int = 256
    max_new_tokens: int = 400
    kv_bytes_per_token: int = 1024
    c_gpu_bytes: int = 24_000_000
    non_expert_bytes: int = 4_000_000
    swap_bandwidth_bytes_per_s: float = 2e6
    compression_ratio: float = 0.8

    def sim_config(self, spec: ModelSpec, b_dev: float, b_host: float) -> SimConfig:
        try:
            return SimConfig(
                spec=spec,
                b_dev=b_dev,
                b_host=b_host,
                tau_comp_theory=self.tau_comp_theory_s,
                batch_size=self.batch_size,
                context_start=self.context_start,
                max_new_tokens=self.max_new_tokens,
                kv_bytes_per_token=self.kv_bytes_per_token,
                c_gpu=self.c_gpu_bytes,
                non_expert_bytes=self.non_expert_bytes,
                swap_bandwidth=self.swap_bandwidth_bytes_per_s,
                compression_ratio=self.compression_ratio,
            )
        except Exception as exc:
            raise ConfigError(f"invalid sim block: {exc}") from exc


@dataclass(frozen=True)
class PlannerBlock:
    theta: float = 0.9
    step_experts: int = 1
    cooldown: int = 20
    io_balance: bool = True
    alpha0: float = 1.0

    def planner_state(self, experts_per_layer: int) -> PlannerState:
        m0 = max(1, min(experts_per_layer, round(self.alpha0 * experts_per_layer)))
        try:
            return PlannerState(
                experts_per_layer=experts_per_layer,
                device_experts=m0,
                theta=self.theta,
                step_experts=self.step_experts,
                cooldown=self.cooldown,
                io_balance=self.io_balance,
            )
        except Exception as exc:
            raise ConfigError(f"invalid planner block: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    model: ModelBlock = field(default_factory=ModelBlock)
    backends: tuple = ()
    pipeline: PipelineBlock = field(default_factory=PipelineBlock)
    sim: SimBlock = field(default_factory=SimBlock)
    planner: PlannerBlock = field(default_factory=PlannerBlock)

    def __post_init__(self):
        if not self.backends:
            object.__setattr__(
                self,
                "backends",
                (
                    BackendBlock("compressed_device", 3e9, 1 << 30),
                    BackendBlock("host_offload", 3e8, 8 << 30),
                ),
            )

    def spec(self) -> ModelSpec:
        return self.model.spec()

    def backend_list(self):
        return [blk.backend(i + 1) for i, blk in enumerate(self.backends)]

    def device_host_bandwidth(self) -> tuple[float, float]:
        dev = [b for b in self.backend_list() if b.kind == BackendKind.COMPRESSED_DEVICE]
        host = [b for b in self.backend_list() if b.kind == BackendKind.HOST_OFFLOAD]
        if len(dev) != 1 or len(host) != 1:
            raise ConfigError("simulation needs exactly one device and one host backend")
        return dev[0].bandwidth, host[0].bandwidth

    def sim_config(self) -> SimConfig:
        b_dev, b_host = self.device_host_bandwidth()
        return self.sim.sim_config(self.spec(), b_dev, b_host)


def _build(block: dict, name: str, cls):
    data = _take(block, name, cls)
    try:
        return cls(**data)
    except ConfigError:
        raise
    except TypeError as exc:
        raise ConfigError(f"block '{name}': {exc}") from exc


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    known = {"model", "backends", "pipeline", "sim", "planner"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    backends = doc.get("backends", None)
    backend_blocks = ()
    if backends is not None:
        if not isinstance(backends, list) or not backends:
            raise ConfigError("'backends' must be a non-empty list")
        backend_blocks = tuple(
            _build(b, f"backends[{i}]", BackendBlock) for i, b in enumerate(backends)
        )
    pipeline_raw = dict(doc.get("pipeline", {}))
    for key in ("fetch_delay_ms", "compute_delay_ms"):
        if key in pipeline_raw:
            pipeline_raw[key] = tuple(pipeline_raw[key])
    return RunConfig(
        model=_build(doc.get("model", {}), "model", ModelBlock),
        backends=backend_blocks,
        pipeline=_build(pipeline_raw, "pipeline", PipelineBlock),
        sim=_build(doc.get("sim", {}), "sim", SimBlock),
        planner=_build(doc.get("planner", {}), "planner", PlannerBlock),
    )


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return parse_config(doc)


def default_config() -> RunConfig:
    return RunConfig()
