"""Command-line entry point.

Subcommands: generate, fit, align, predict, evaluate, export-plot, config.
Validation problems exit with code 1 and a single ``ERROR:<code>: message``
line on stderr; runtime divergence exits with code 2.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .alignment import align_cohort, write_placements
from .checkpoint import load_checkpoint, save_checkpoint
from .cohort import (generate_synthetic, read_cohort_jsonl, write_cohort_jsonl,
                     write_ground_truth)
from .config import (dump_defaults, gen_config_from, load_config,
                     model_config_from, train_config_from)
from .errors import Diverged, EngineError, NonFiniteState, UsageError
from .graph import build_operators, load_connectome, write_connectome
from .metrics import (collect_pairs, pearson_summary, read_error_map_csv,
                      regional_error_map, sse, write_error_map_csv)
from .moe import (eval_gate, integrate, read_gate_csv, read_trajectory_csv,
                  states_at, write_gate_csv, write_trajectory_csv)
from .svgplot import heatmap, line_plot
from .training import fit


class _Parser(argparse.ArgumentParser):
    """argparse that reports bad flags through the engine's error channel
    (exit 1) instead of argparse's exit 2."""

    def error(self, message):
        raise UsageError(message)


def _cmd_generate(args) -> int:
    cfg = load_config(args.spec)
    gcfg = gen_config_from(cfg)
    graph, subjects, truth = generate_synthetic(gcfg, args.seed)
    write_cohort_jsonl(args.out_cohort, subjects)
    write_ground_truth(args.out_truth, truth)
    if args.out_connectome:
        write_connectome(args.out_connectome, graph)
    print(f"wrote {len(subjects)} subjects to {args.out_cohort}")
    return 0


def _cmd_fit(args) -> int:
    conn = load_connectome(args.connectome)
    subjects = read_cohort_jsonl(args.cohort, n=conn.n)
    cfg = load_config(args.config)
    tcfg = train_config_from(cfg)
    if args.seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=args.seed)
    mcfg = model_config_from(cfg, conn.n)
    model, report = fit(subjects, conn, mcfg, tcfg)

    os.makedirs(args.out_dir, exist_ok=True)
    rng_state = np.random.default_rng(tcfg.seed).bit_generator.state
    save_checkpoint(os.path.join(args.out_dir, "checkpoint.json"), model, conn,
                    rng_state=rng_state, train_config=tcfg.to_dict())
    with open(os.path.join(args.out_dir, "report.json"), "w") as fh:
        fh.write(report.to_json() + "\n")
    write_gate_csv(os.path.join(args.out_dir, "gate.csv"),
                   report.gate_times, report.gate_betas)
    all_pl = (report.placements["train"] + report.placements["val"]
              + report.placements["test"])
    write_placements(os.path.join(args.out_dir, "placements.csv"), all_pl)
    from .metrics import ErrorMap
    em = ErrorMap(edges=report.error_map_edges, mse=report.error_map_mse,
                  counts=report.error_map_counts)
    write_error_map_csv(os.path.join(args.out_dir, "error_map.csv"),
                        report.region_names, em)
    ops = build_operators(conn)
    traj = integrate(model, ops)
    write_trajectory_csv(os.path.join(args.out_dir, "trajectory.csv"),
                         report.region_names, traj.times, traj.states)
    status = "converged" if report.converged else "max iterations"
    test_part = ("test sse n/a" if report.test_sse is None
                 else f"test sse {report.test_sse:.6g}")
    print(f"fit finished after {report.n_outer} outer iteration(s) ({status}); "
          f"{test_part}; artifacts in {args.out_dir}")
    return 0


def _cmd_align(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    ops = build_operators(meta.connectome)
    subjects = read_cohort_jsonl(args.cohort, n=meta.connectome.n)
    traj = integrate(model, ops)
    placements = align_cohort(traj, subjects)
    write_placements(args.out, placements)
    print(f"aligned {len(placements)} subject(s) -> {args.out}")
    return 0


def _cmd_predict(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    if args.t_horizon is not None or args.step is not None:
        cfg = dataclasses.replace(
            model.config,
            t_horizon=args.t_horizon if args.t_horizon is not None else model.config.t_horizon,
            step=args.step if args.step is not None else model.config.step)
        model = dataclasses.replace(model, config=cfg)
    ops = build_operators(meta.connectome)
    traj = integrate(model, ops)
    if args.t is not None:
        times = np.array([float(v) for v in args.t.split(",")])
        states = states_at(traj, times)
    else:
        times, states = traj.times, traj.states
    write_trajectory_csv(args.out, model.region_names, times, states)
    print(f"wrote {len(times)} trajectory row(s) -> {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    ops = build_operators(meta.connectome)
    subjects = read_cohort_jsonl(args.cohort, n=meta.connectome.n)
    traj = integrate(model, ops)
    placements = align_cohort(traj, subjects)
    pred, obs, _ = collect_pairs(traj, placements, subjects)
    psum = pearson_summary(pred, obs)
    doc = {
        "sse": float(sse(pred, obs)),
        "mean_pearson": None if not np.isfinite(psum.mean_r) else float(psum.mean_r),
        "n_used": psum.n_used,
        "n_skipped": psum.n_skipped,
        "n_subjects": len(subjects),
        "n_observations": int(obs.shape[0]),
    }
    text = json.dumps(doc, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def _cmd_export_plot(args) -> int:
    if args.kind == "trajectory":
        names, times, states = read_trajectory_csv(args.input)
        series = {name: states[:, j] for j, name in enumerate(names)}
        line_plot(args.out, times, series, title="Cohort trajectory",
                  xlabel="t", ylabel="concentration")
    elif args.kind == "gate":
        times, betas = read_gate_csv(args.input)
        series = {f"beta{j + 1}": betas[:, j] for j in range(betas.shape[1])}
        line_plot(args.out, times, series, title="Gate mixture weights",
                  xlabel="t", ylabel="beta")
    else:
        names, em = read_error_map_csv(args.input)
        rows = [f"[{em.edges[b]:.3g}, {em.edges[b + 1]:.3g})"
                for b in range(em.bins)]
        heatmap(args.out, em.mse, rows, names, title="Regional error map")
    print(f"wrote {args.out}")
    return 0


def _cmd_config(args) -> int:
    if not args.dump:
        raise UsageError("config: nothing to do (use --dump)")
    sys.stdout.write(dump_defaults())
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="trajmoe",
                description="Cohort-level disease-progression trajectories from "
                            "longitudinal snapshots.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesize a cohort from known dynamics")
    g.add_argument("--spec", default=None, help="generator config file (default: built-in defaults)")
    g.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    g.add_argument("--out-cohort", default="cohort.jsonl", help="cohort JSONL output (default cohort.jsonl)")
    g.add_argument("--out-truth", default="ground_truth.json", help="ground-truth JSON output (default ground_truth.json)")
    g.add_argument("--out-connectome", default=None, help="also write the generator graph as a connectome CSV")
    g.set_defaults(func=_cmd_generate)

    f = sub.add_parser("fit", help="fit the mixture model to a cohort")
    f.add_argument("--cohort", required=True, help="cohort JSONL")
    f.add_argument("--connectome", required=True, help="connectome CSV")
    f.add_argument("--config", default=None, help="key=value config file")
    f.add_argument("--out-dir", required=True, help="directory for checkpoint/report/CSV artifacts")
    f.add_argument("--seed", type=int, default=None, help="override train.seed")
    f.add_argument("--threads", type=int, default=1,
                   help="worker threads (reserved; execution is sequential, default 1)")
    f.add_argument("--deterministic", action="store_true",
                   help="force sequential execution for bit-exact runs (already the default)")
    f.set_defaults(func=_cmd_fit)

    a = sub.add_parser("align", help="place subjects on a fitted trajectory")
    a.add_argument("--checkpoint", required=True, help="checkpoint JSON")
    a.add_argument("--cohort", required=True, help="cohort JSONL")
    a.add_argument("--out", required=True, help="placements CSV output")
    a.set_defaults(func=_cmd_align)

    pr = sub.add_parser("predict", help="emit the dense trajectory from a checkpoint")
    pr.add_argument("--checkpoint", required=True, help="checkpoint JSON")
    pr.add_argument("--out", required=True, help="trajectory CSV output")
    pr.add_argument("--t", default=None, help="comma-separated times (default: full grid)")
    pr.add_argument("--t-horizon", type=float, default=None, help="override the checkpoint horizon")
    pr.add_argument("--step", type=float, default=None, help="override the checkpoint step")
    pr.set_defaults(func=_cmd_predict)

    e = sub.add_parser("evaluate", help="align a cohort and report SSE / mean Pearson")
    e.add_argument("--checkpoint", required=True, help="checkpoint JSON")
    e.add_argument("--cohort", required=True, help="cohort JSONL")
    e.add_argument("--out", default=None, help="metrics JSON output (also printed)")
    e.set_defaults(func=_cmd_evaluate)

    x = sub.add_parser("export-plot", help="render a CSV artifact as a static SVG")
    x.add_argument("--kind", required=True, choices=["trajectory", "gate", "error-map"])
    x.add_argument("--in", dest="input", required=True, help="input CSV")
    x.add_argument("--out", required=True, help="output SVG")
    x.set_defaults(func=_cmd_export_plot)

    c = sub.add_parser("config", help="print configuration defaults")
    c.add_argument("--dump", action="store_true", help="print all keys with defaults")
    c.set_defaults(func=_cmd_config)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (Diverged, NonFiniteState) as e:
        print(f"ERROR:{e.code}: {e.message}", file=sys.stderr)
        return 2
    except EngineError as e:
        print(f"ERROR:{e.code}: {e.message}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(run(sys.argv[1:]))
