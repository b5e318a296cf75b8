"""Discrete-event performance model of streamed decode.

Each decode iteration grows the KV cache, derives how much of it fits beside
the resident weights, charges swap traffic for newly displaced KV bytes, and
composes loading and compute as max(tau_comp_actual, tau_load) to reflect the
pipelined overlap of layer i+1 loading with layer i compute.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

from .errors import InfeasibleConfigError, OutOfRangeError
from .model import ModelSpec
from .storage import tau_layer_for_alpha, tau_load_for_alpha_layers


@dataclass(frozen=True)
class SimConfig:
    spec: ModelSpec
    b_dev: float                  # effective device (decompression) bandwidth, B/s
    b_host: float                 # host transfer bandwidth, B/s
    tau_comp_theory: float        # profiled per-iteration forward ceiling, seconds
    batch_size: int
    context_start: int            # tokens already in context at iteration 0
    max_new_tokens: int
    kv_bytes_per_token: int       # per (token, sequence), aggregated over layers
    c_gpu: int                    # device byte budget
    non_expert_bytes: int         # attention weights, activations, etc.
    swap_bandwidth: float         # B/s for KV overflow traffic
    compression_ratio: float = 0.8  # compressed/raw for the resident expert pool

    def __post_init__(self):
        if self.b_dev <= 0 or self.b_host <= 0 or self.swap_bandwidth <= 0:
            raise OutOfRangeError("bandwidths must be positive")
        if self.tau_comp_theory <= 0:
            raise OutOfRangeError("tau_comp_theory must be positive")
        if self.batch_size < 1 or self.max_new_tokens < 1:
            raise OutOfRangeError("batch_size and max_new_tokens must be >= 1")
        if not 0 < self.compression_ratio <= 1:
            raise OutOfRangeError("compression_ratio must lie in (0, 1]")
        if self.c_gpu <= self.non_expert_bytes + self.window_bytes:
            raise InfeasibleConfigError(
                "device budget cannot hold the mandatory two-layer window"
            )

    @property
    def window_bytes(self) -> int:
        """The mandatory 2L-blocks-per-kind working set."""
        return 2 * self.spec.experts_per_layer * self.spec.expert_bytes

    @property
    def compressed_expert_bytes(self) -> float:
        return self.compression_ratio * self.spec.total_bytes

    def resident_bytes(self, alpha: float) -> float:
        """On-device size of the alpha fraction (stored compressed)."""
        return alpha * self.compressed_expert_bytes

    def kv_bytes(self, iteration: int) -> int:
        """Logical KV demand after `iteration` decode steps."""
        return self.batch_size * (self.context_start + iteration) * self.kv_bytes_per_token

    def kv_free_bytes(self, alpha: float) -> float:
        return (
            self.c_gpu
            - self.non_expert_bytes
            - self.window_bytes
            - self.resident_bytes(alpha)
        )


@dataclass(frozen=True)
class IterationSample:
    iteration: int
    kv_bytes: int
    alpha: float
    tau_load: float
    tau_comp_actual: float
    iteration_time: float
    throughput: float
    rho: float
    kv_overflow: float = 0.0
    migration_bytes: float = 0.0


class FixedAlphaPolicy:
    """Residency held constant; no migrations."""

    def __init__(self, alpha: float):
        if not 0 < alpha <= 1:
            raise OutOfRangeError(f"alpha must lie in (0, 1], got {alpha}")
        self.alpha = alpha

    def begin(self, config: SimConfig):
        self._layers = [self.alpha] * config.spec.num_layers

    def step(self, iteration: int, kv_bytes: int, last_sample):
        return self._layers, 0.0


def simulate_decode(config: SimConfig, policy) -> list[IterationSample]:
    """Run the decode loop under an alpha policy (fixed value or controller).

    The policy's step() is called before each iteration with the current KV
    demand and the previous sample; it returns (per-layer alpha fractions,
    migration bytes charged to this iteration's host traffic).
    """
    if isinstance(policy, (int, float)):
        policy = FixedAlphaPolicy(float(policy))
    policy.begin(config)
    spec = config.spec
    samples = []
    prev_overflow = None
    last = None
    for it in range(1, config.max_new_tokens + 1):
        kv = config.kv_bytes(it)
        alpha_layers, migration_bytes = policy.step(it, kv, last)
        alpha = sum(alpha_layers) / len(alpha_layers)
        if prev_overflow is None:
            prev_overflow = max(0.0, config.kv_bytes(0) - config.kv_free_bytes(alpha))
        overflow = max(0.0, kv - config.kv_free_bytes(alpha))
        # only newly displaced bytes pay round-trip swap traffic
        tau_swap = 2.0 * max(0.0, overflow - prev_overflow) / config.swap_bandwidth
        prev_overflow = overflow
        tau_comp_actual = config.tau_comp_theory + tau_swap
        tau_load = tau_load_for_alpha_layers(spec, config.b_dev, config.b_host, alpha_layers)
        tau_load += migration_bytes / config.b_host
        rho = config.tau_comp_theory / tau_load if tau_load > 0 else math.inf
        iteration_time = max(tau_comp_actual, tau_load)
        last = IterationSample(
            iteration=it,
            kv_bytes=kv,
            alpha=alpha,
            tau_load=tau_load,
            tau_comp_actual=tau_comp_actual,
            iteration_time=iteration_time,
            throughput=config.batch_size / iteration_time,
            rho=rho,
            kv_overflow=overflow,
            migration_bytes=migration_bytes,
        )
        samples.append(last)
    return samples


def steady_tau_load(config: SimConfig, alpha: float) -> float:
    """Aggregate per-iteration loading demand at a uniform residency level."""
    return config.spec.num_layers * tau_layer_for_alpha(
        config.spec, config.b_dev, config.b_host, alpha
    )


def knee_alpha(config: SimConfig) -> float:
    """Closed-form alpha* where tau_load crosses tau_comp_theory.

    On the host-dominated branch tau_load = N*(1-alpha)*P_layer/B_host, so
    alpha* = 1 - tau_comp_theory*B_host/(N*P_layer), clipped into [0, 1].
    """
    n, p_layer = config.spec.num_layers, config.spec.layer_bytes
    alpha = 1.0 - config.tau_comp_theory * config.b_host / (n * p_layer)
    return min(1.0, max(0.0, alpha))


def sweep_alpha(config: SimConfig, alphas) -> list[dict]:
    """Steady-state tau_load and actual tau_comp across a residency grid."""
    rows = []
    for alpha in alphas:
        if not 0 < alpha <= 1:
            raise OutOfRangeError(f"alpha grid value {alpha} outside (0, 1]")
        tau_load = steady_tau_load(config, alpha)
        rows.append(
            {
                "alpha": alpha,
                "tau_load": tau_load,
                "tau_comp": max(config.tau_comp_theory, tau_load),
            }
        )
    return rows


def memory_breakdown(config: SimConfig, iteration: int, alpha: float) -> dict:
    """Byte composition of device memory at an iteration (0 = pre-decode)."""
    kv = config.kv_bytes(iteration)
    overflow = max(0.0, kv - config.kv_free_bytes(alpha))
    return {
        "non_expert": float(config.non_expert_bytes),
        "window": float(config.window_bytes),
        "resident_compressed": config.resident_bytes(alpha),
        "kv_device": kv - overflow,
        "kv_overflow": overflow,
    }


def write_samples_csv(samples, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["iter", "alpha", "kv_bytes", "tau_load", "tau_comp", "iter_time", "throughput", "rho"]
        )
        for s in samples:
            writer.writerow(
                [s.iteration, f"{s.alpha:.6f}", s.kv_bytes, f"{s.tau_load:.9f}",
                 f"{s.tau_comp_actual:.9f}", f"{s.iteration_time:.9f}",
                 f"{s.throughput:.6f}", f"{s.rho:.6f}"]
            )


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha", "tau_load", "tau_comp"])
        for r in rows:
            writer.writerow([f"{r['alpha']:.6f}", f"{r['tau_load']:.9f}", f"{r['tau_comp']:.9f}"])
