"""Operator CLI: generate models, compress/verify containers, run the
streamed pipeline against its resident baseline, and drive the simulator
and planner to CSV artifacts.

Exit codes: 0 success, 1 validation error, 2 correctness failure
(mismatch or ordering violation), 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import codec, pipeline, planner, simulate, storage
from .config import RunConfig, default_config, load_config
from .errors import ConfigError, TruncatedStreamError, XpgError
from .model import WeightContainer, generate_synthetic_model

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_CORRECTNESS = 2
EXIT_IO = 3


def _load(args) -> RunConfig:
    if args.config:
        return load_config(args.config)
    return default_config()


def _require_out(path, force: bool) -> None:
    if Path(path).exists() and not force:
        raise ConfigError(f"{path} exists; pass --force to overwrite")


def cmd_generate(args) -> int:
    cfg = _load(args)
    _require_out(args.out, args.force)
    seed = args.seed if args.seed is not None else cfg.model.seed
    container = generate_synthetic_model(cfg.spec(), seed)
    container.write(args.out)
    print(f"wrote {args.out}: {len(container.to_bytes())} bytes (seed={seed})")
    return EXIT_OK


def cmd_compress(args) -> int:
    container = WeightContainer.read(args.infile)
    _require_out(args.out, args.force)
    compressed = codec.CompressedModel.from_container(container)
    compressed.write(args.out)
    raw = container.spec.total_bytes
    print(
        f"wrote {args.out}: payload ratio {compressed.ratio:.4f} "
        f"({compressed.compressed_payload_bytes}/{raw} bytes)"
    )
    return EXIT_OK


def cmd_verify(args) -> int:
    container = WeightContainer.read(args.infile)
    compressed = codec.CompressedModel.read(args.compressed)
    from .model import iter_tensor_ids

    for tid in iter_tensor_ids(container.spec):
        original = container.tensor_bytes(tid)
        restored = compressed.tensor_bytes(tid)
        if original != restored:
            print(f"MISMATCH at {tid}", file=sys.stderr)
            return EXIT_CORRECTNESS
    print(f"identical; payload ratio {compressed.ratio:.4f}")
    return EXIT_OK


def _hashed_delay(range_ms, seed, salt):
    """Deterministic per-key delay in seconds; stateless, so thread-safe."""
    lo, hi = range_ms
    if hi <= 0:
        return None

    def fn(*key):
        h = pipeline._splitmix64(hash((seed, salt) + key) & 0xFFFFFFFFFFFFFFFF)
        return (lo + (h / 2**64) * (hi - lo)) * 1e-3

    return fn


def _run_once(cfg: RunConfig, seed: int, sabotage=None) -> tuple[int, dict]:
    spec = cfg.spec()
    container = generate_synthetic_model(spec, seed)
    compressed = codec.CompressedModel.from_container(container)
    backends = cfg.backend_list()
    plan = storage.plan_placement(spec, backends, alpha=cfg.pipeline.alpha)
    fetch_delay = _hashed_delay(cfg.pipeline.fetch_delay_ms, seed, 0x1)
    mode = cfg.pipeline.mode
    if sabotage is not None:
        # slow the sabotaged layer's loads so the skipped RAW wait is always racy
        mode = "threaded"
        base = fetch_delay

        def fetch_delay(tid, _base=base):
            slow = 0.02 if tid.layer == sabotage[1] else 0.0
            return slow + (_base(tid) if _base else 0.0)

    hierarchy = storage.StorageHierarchy(
        container, compressed, plan, backends,
        delay_fn=(lambda tid: fetch_delay(tid)) if fetch_delay else None,
    )
    fwd = pipeline.ForwardSpec(
        tokens_per_step=cfg.pipeline.tokens_per_step,
        top_k=cfg.pipeline.top_k,
        router_seed=seed,
    )
    acts0 = pipeline.initial_activations(spec, fwd, seed)
    compute_delay = _hashed_delay(cfg.pipeline.compute_delay_ms, seed, 0x2)
    report = pipeline.run_iterations(
        cfg.pipeline.iterations, spec, hierarchy, fwd,
        mode=mode, acts=acts0.copy(),
        compute_delay_fn=compute_delay,
        sabotage_skip_raw=sabotage,
    )
    baseline = pipeline.resident_baseline(
        cfg.pipeline.iterations, spec, container, fwd, acts=acts0.copy()
    )
    identical = (
        report.page_fault is None
        and report.final_activations.tobytes() == baseline.tobytes()
    )
    ok = identical and not report.violations
    summary = {
        "seed": seed,
        "bit_identical": identical,
        "violations": len(report.violations),
        "page_fault": report.page_fault,
        "arena_peak_bytes": report.arena_peak_bytes,
        "expected_peak_bytes": 2 * spec.experts_per_layer * spec.expert_bytes,
        "stall_ms": report.stall_seconds * 1e3,
        "checksum": report.checksum,
    }
    return (EXIT_OK if ok else EXIT_CORRECTNESS), summary


def cmd_run(args) -> int:
    cfg = _load(args)
    base_seed = args.seed if args.seed is not None else cfg.model.seed
    sabotage = None
    if args.sabotage_skip_raw:
        # test-only negative control: drop one RAW wait; its loads get slowed
        sabotage = (1, min(3, cfg.spec().num_layers))
    worst = EXIT_OK
    results = []
    for k in range(args.seeds):
        code, summary = _run_once(cfg, base_seed + k, sabotage=sabotage)
        results.append(summary)
        worst = max(worst, code)
    doc = {"runs": results, "passed": worst == EXIT_OK}
    text = json.dumps(doc, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return worst


def cmd_simulate(args) -> int:
    cfg = _load(args)
    sim = cfg.sim_config()
    alpha = args.alpha if args.alpha is not None else cfg.planner.alpha0
    samples = simulate.simulate_decode(sim, alpha)
    simulate.write_samples_csv(samples, args.out)
    print(f"wrote {args.out}: {len(samples)} iterations at alpha={alpha}")
    return EXIT_OK


def cmd_sweep_alpha(args) -> int:
    cfg = _load(args)
    sim = cfg.sim_config()
    l = cfg.model.experts_per_layer
    grid = [m / l for m in range(1, l + 1)] if args.grid is None else [
        float(x) for x in args.grid.split(",")
    ]
    rows = simulate.sweep_alpha(sim, grid)
    simulate.write_sweep_csv(rows, args.out)
    knee = simulate.knee_alpha(sim)
    print(f"wrote {args.out}: {len(rows)} grid points, closed-form knee alpha*={knee:.4f}")
    return EXIT_OK


def cmd_plan(args) -> int:
    cfg = _load(args)
    sim = cfg.sim_config()
    state = cfg.planner.planner_state(cfg.model.experts_per_layer)
    if args.io_balance is not None:
        from dataclasses import replace

        state = replace(state, io_balance=args.io_balance == "on")
    samples, trace = planner.run_control_loop(sim, state)
    planner.check_trace_safety(sim, trace)
    planner.write_trace_csv(trace, args.out)
    adjustments = sum(1 for row in trace if row.adjusted)
    print(
        f"wrote {args.out}: {len(trace)} iterations, {adjustments} adjustments, "
        f"final alpha={trace[-1].alpha:.4f}"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xpg", description=__doc__)
    p.add_argument("--config", help="JSON run configuration; defaults are built in")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic bf16 weight container")
    g.add_argument("out")
    g.add_argument("--seed", type=int)
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_generate)

    c = sub.add_parser("compress", help="compress a weight container")
    c.add_argument("infile")
    c.add_argument("out")
    c.add_argument("--force", action="store_true")
    c.set_defaults(fn=cmd_compress)

    v = sub.add_parser("verify", help="byte-compare a compressed container against the raw one")
    v.add_argument("infile", help="raw .xpgw container")
    v.add_argument("compressed", help=".xpgc container")
    v.set_defaults(fn=cmd_verify)

    r = sub.add_parser("run", help="streamed run vs resident baseline with ordering validation")
    r.add_argument("--seed", type=int)
    r.add_argument("--seeds", type=int, default=1, help="batch mode: run this many seeds")
    r.add_argument("--out", help="write the JSON report here as well")
    r.add_argument("--sabotage-skip-raw", action="store_true", help=argparse.SUPPRESS)
    r.set_defaults(fn=cmd_run)

    s = sub.add_parser("simulate", help="decode-loop timing model at a fixed residency")
    s.add_argument("out")
    s.add_argument("--alpha", type=float)
    s.set_defaults(fn=cmd_simulate)

    w = sub.add_parser("sweep-alpha", help="steady-state load/compute over a residency grid")
    w.add_argument("out")
    w.add_argument("--grid", help="comma-separated alpha values")
    w.set_defaults(fn=cmd_sweep_alpha)

    pl = sub.add_parser("plan", help="closed-loop residency adaptation trace")
    pl.add_argument("out")
    pl.add_argument("--io-balance", choices=["on", "off"])
    pl.set_defaults(fn=cmd_plan)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except TruncatedStreamError as exc:
        where = f" (tensor {exc.tensor_id}, byte offset {exc.byte_offset})"
        print(f"corrupt container: {exc}{where}", file=sys.stderr)
        return EXIT_IO
    except (OSError, XpgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
