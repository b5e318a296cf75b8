"""Closed-loop residency control with a dead zone and a hard KV budget.

The controller holds the device-resident fraction alpha, quantized to whole
experts per layer. Every cooldown period it computes the compute-to-load
ratio rho = tau_comp_theory / tau_load from the deterministic loading-time
estimate (the paper-facing signal; bursty measurements are averaged over the
window when present) and applies:

  rho > 1          -> decrease alpha by step/L   (reclaim memory)
  rho < theta      -> increase alpha by step/L   (reduce loading demand)
  theta <= rho <= 1 -> hold                      (dead zone)

then clamps alpha so the resident experts never displace the KV cache.

Two refinements keep the quantized loop well-behaved:

* Descent guard: a rho-driven decrease executes only if the estimator says
  the destination still loads within the compute window (rho_est >= 1).
  This stops the loop exactly at the knee instead of limit-cycling across a
  dead zone narrower than one quantum, and keeps adapted throughput at the
  fixed-residency ceiling. Budget-driven decreases bypass the guard.
* Staggered migrations: a decrease releases one layer's experts per
  iteration (io_balance on) instead of moving every layer's bytes in a
  single burst, smoothing the migration traffic spike.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from .errors import OutOfRangeError
from .simulate import IterationSample, SimConfig, simulate_decode

DEFAULT_THETA = 0.9
DEFAULT_COOLDOWN = 300


@dataclass(frozen=True)
class PlannerState:
    experts_per_layer: int        # quantization denominator L
    device_experts: int           # m; alpha = m / L
    theta: float = DEFAULT_THETA
    step_experts: int = 1
    cooldown: int = DEFAULT_COOLDOWN
    io_balance: bool = True

    def __post_init__(self):
        if not 0 < self.theta < 1.0 + 1e-12:
            raise OutOfRangeError(f"theta must lie in (0, 1], got {self.theta}")
        if self.step_experts < 1 or self.cooldown < 1:
            raise OutOfRangeError("step_experts and cooldown must be >= 1")
        if not 1 <= self.device_experts <= self.experts_per_layer:
            raise OutOfRangeError(
                f"device_experts {self.device_experts} outside [1, {self.experts_per_layer}]"
            )

    @property
    def alpha(self) -> float:
        return self.device_experts / self.experts_per_layer


@dataclass(frozen=True)
class MemoryBudget:
    """Memory available to resident experts after the KV cache is served."""

    c_gpu: float          # budget shared by KV cache and resident experts
    c_kv: float           # current (or projected) KV usage
    expert_pool_bytes: float  # on-device size of the full pool at alpha = 1

    @property
    def c_res(self) -> float:
        return self.c_gpu - self.c_kv

    def c_exp(self, alpha: float) -> float:
        return alpha * self.expert_pool_bytes

    def max_feasible_m(self, experts_per_layer: int) -> int:
        if self.expert_pool_bytes <= 0:
            return experts_per_layer
        per_quantum = self.expert_pool_bytes / experts_per_layer
        return int(math.floor(self.c_res / per_quantum + 1e-9))


def compute_rho(tau_comp_theory: float, tau_load: float) -> float:
    """Compute-to-load ratio; a zero-cost load reads as +inf (rho > 1)."""
    if tau_load < 0:
        raise OutOfRangeError(f"negative tau_load {tau_load}")
    if tau_load == 0:
        return math.inf
    return tau_comp_theory / tau_load


def plan_step(
    state: PlannerState,
    rho: float,
    budget: MemoryBudget,
    rho_estimator=None,
) -> PlannerState:
    """One planner decision: adjust alpha by the dead-zone rule, then clamp.

    rho_estimator(alpha) -> rho predicted by the deterministic loading model;
    when provided, a rho-driven decrease is suppressed if the destination
    would already be load-bound (rho_est < 1). The budget clamp always runs.
    """
    l = state.experts_per_layer
    m = state.device_experts
    if rho > 1.0:
        target = max(1, m - state.step_experts)
        if target != m:
            if rho_estimator is None or rho_estimator(target / l) >= 1.0:
                m = target
    elif rho < state.theta:
        m = min(l, m + state.step_experts)
    # hard safety constraint: never displace the KV cache
    m = min(m, budget.max_feasible_m(l))
    m = max(1, min(l, m))
    if m == state.device_experts:
        return state
    return replace(state, device_experts=m)


# ---------------------------------------------------------------------------
# integrated controller driving the decode simulator


@dataclass
class TraceRow:
    iteration: int
    rho: float
    alpha: float
    c_kv: float
    c_exp: float
    throughput: float
    adjusted: int  # -1 decrease, 0 none, +1 increase


class ResidencyController:
    """Policy object for simulate_decode implementing the closed loop."""

    def __init__(self, planner: PlannerState, tau_load_noise=None):
        self.initial = planner
        self.tau_load_noise = tau_load_noise  # optional (iteration -> factor)

    def begin(self, config: SimConfig):
        self.config = config
        spec = config.spec
        self.l = spec.experts_per_layer
        self.n = spec.num_layers
        self.expert_compressed = config.compression_ratio * spec.expert_bytes
        self.pool_bytes = config.compressed_expert_bytes
        self.effective_gpu = config.c_gpu - config.non_expert_bytes - config.window_bytes
        state = self.initial
        # initial residency must already satisfy the projected constraint
        m0 = min(state.device_experts, self._budget(0).max_feasible_m(self.l))
        self.state = replace(state, device_experts=max(1, m0))
        self.m_layers = [self.state.device_experts] * self.n
        self.pending = deque()
        self.since_adjust = 0
        self.meta = []  # per-iteration (rho, adjusted) pairs for the trace

    def _budget(self, iteration: int) -> MemoryBudget:
        # project KV demand out to the next decision plus the migration span,
        # so staggered releases finish before the constraint can bind
        horizon = self.initial.cooldown + self.n
        kv = self.config.kv_bytes(iteration + horizon)
        return MemoryBudget(self.effective_gpu, kv, self.pool_bytes)

    def _estimated_tau_load(self, m: int) -> float:
        from .storage import tau_load_for_alpha_layers

        alpha = m / self.l
        return tau_load_for_alpha_layers(
            self.config.spec, self.config.b_dev, self.config.b_host, [alpha] * self.n
        )

    def _rho_estimator(self, alpha: float) -> float:
        m = round(alpha * self.l)
        return compute_rho(self.config.tau_comp_theory, self._estimated_tau_load(m))

    def step(self, iteration: int, kv_bytes: int, last_sample):
        migration_bytes = 0.0
        if self.pending:
            moves = [self.pending.popleft()]
            if not self.state.io_balance:
                while self.pending:
                    moves.append(self.pending.popleft())
            for layer_idx, new_m in moves:
                delta = abs(self.m_layers[layer_idx] - new_m)
                migration_bytes += delta * self.expert_compressed
                self.m_layers[layer_idx] = new_m

        adjusted = 0
        rho = self._rho_estimator(self.state.alpha)
        if self.tau_load_noise is not None:
            rho = compute_rho(
                self.config.tau_comp_theory,
                self._estimated_tau_load(self.state.device_experts)
                * self.tau_load_noise(iteration),
            )
        self.since_adjust += 1
        if self.since_adjust >= self.state.cooldown and not self.pending:
            new_state = plan_step(
                self.state, rho, self._budget(iteration), self._rho_estimator
            )
            if new_state.device_experts != self.state.device_experts:
                adjusted = 1 if new_state.device_experts > self.state.device_experts else -1
                for layer_idx in range(self.n):
                    self.pending.append((layer_idx, new_state.device_experts))
                self.state = new_state
                self.since_adjust = 0
        self.meta.append((rho, adjusted))
        return [m / self.l for m in self.m_layers], migration_bytes

    def trace(self, samples) -> list[TraceRow]:
        rows = []
        for sample, (rho, adjusted) in zip(samples, self.meta):
            rows.append(
                TraceRow(
                    iteration=sample.iteration,
                    rho=rho,
                    alpha=sample.alpha,
                    c_kv=float(sample.kv_bytes),
                    c_exp=sample.alpha * self.pool_bytes,
                    throughput=sample.throughput,
                    adjusted=adjusted,
                )
            )
        return rows


def run_control_loop(
    config: SimConfig, planner: PlannerState, tau_load_noise=None
) -> tuple[list[IterationSample], list[TraceRow]]:
    """Simulate decode under the closed-loop controller; returns samples + trace."""
    controller = ResidencyController(planner, tau_load_noise=tau_load_noise)
    samples = simulate_decode(config, controller)
    return samples, controller.trace(samples)


def check_trace_safety(config: SimConfig, trace) -> None:
    """Assert the hard constraint on every trace row (test helper)."""
    effective = config.c_gpu - config.non_expert_bytes - config.window_bytes
    for row in trace:
        if row.c_exp > effective - row.c_kv + 1e-6:
            raise AssertionError(
                f"iteration {row.iteration}: resident experts {row.c_exp:.0f} exceed "
                f"budget {effective - row.c_kv:.0f}"
            )


def write_trace_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "rho", "alpha", "c_kv", "c_exp", "throughput"])
        for row in trace:
            writer.writerow(
                [row.iteration, f"{row.rho:.6f}", f"{row.alpha:.6f}",
                 f"{row.c_kv:.0f}", f"{row.c_exp:.0f}", f"{row.throughput:.6f}"]
            )


# ---------------------------------------------------------------------------
# standalone landscape harness (synthetic tau_load curves, optional noise)


@dataclass(frozen=True)
class LandscapeResult:
    alphas: tuple            # alpha after every iteration
    adjustments: tuple       # (iteration, direction) for every executed change
    reversals: int           # adjacent adjustments in opposite directions
    final_m: int

    @property
    def oscillated(self) -> bool:
        return self.reversals > 0


def run_landscape_loop(
    tau_by_m,
    tau_comp_theory: float,
    planner: PlannerState,
    iterations: int,
    noise_amplitude: float = 0.0,
    seed: int = 0,
    budget: MemoryBudget | None = None,
) -> LandscapeResult:
    """Drive the planner against a synthetic tau_load(alpha) landscape.

    tau_by_m[m] is the deterministic per-iteration loading time with m device
    experts per layer (index 1..L). Measurements fed to the trigger are the
    landscape value perturbed by uniform(+-noise_amplitude) each iteration and
    averaged since the last decision; the descent guard always consults the
    noiseless landscape, mirroring the estimate-driven planner.
    """
    l = planner.experts_per_layer
    if budget is None:
        budget = MemoryBudget(c_gpu=float("inf"), c_kv=0.0, expert_pool_bytes=0.0)
    rng = np.random.default_rng(seed)
    state = planner
    window = []
    alphas = []
    adjustments = []
    since = 0

    def estimator(alpha: float) -> float:
        return compute_rho(tau_comp_theory, tau_by_m[round(alpha * l)])

    for it in range(1, iterations + 1):
        tau = tau_by_m[state.device_experts]
        if noise_amplitude:
            tau *= 1.0 + rng.uniform(-noise_amplitude, noise_amplitude)
        window.append(tau)
        since += 1
        if since >= state.cooldown:
            rho = compute_rho(tau_comp_theory, sum(window) / len(window))
            new_state = plan_step(state, rho, budget, estimator)
            if new_state.device_experts != state.device_experts:
                direction = 1 if new_state.device_experts > state.device_experts else -1
                adjustments.append((it, direction))
                state = new_state
            window.clear()
            since = 0
        alphas.append(state.alpha)

    reversals = sum(
        1
        for (_, a), (_, b) in zip(adjustments, adjustments[1:])
        if a != b
    )
    return LandscapeResult(
        alphas=tuple(alphas),
        adjustments=tuple(adjustments),
        reversals=reversals,
        final_m=state.device_experts,
    )
