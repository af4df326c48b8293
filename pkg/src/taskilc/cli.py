"""Experiment command line.

Subcommands mirror the pipeline stages:

    taskilc demo inspect <capture.csv> <annotation.json>
    taskilc ilc run --config <file>
    taskilc ilc transfer --configs <dir> [--jobs N]
    taskilc ilc sweep --config <file> --grid <file> [--jobs N]
    taskilc export rollout <log> --format jsonl|csv [--out FILE]

Exit codes: 0 success, 1 learning failure (iteration budget exhausted or a
run aborted), 2 usage or configuration errors. All randomness flows from
the config seed through counter-based splitting, and artifacts carry the
seed in their headers with no wall-clock data, so outputs are reproducible
byte for byte.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .artifacts import (
    RolloutTable,
    atomic_write,
    command_json,
    run_log_jsonl,
    summary_csv,
    with_seed_header,
)
from .config import ConfigError, ExperimentConfig, load_config
from .demoio import DemoIngestError, RawCapture, build_demonstration, timing_details
from .ilc import IlcAborted, run_ilc, sensitivity_sweep, transfer_experiment
from .tracking import track_demonstration


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


# ---------------------------------------------------------------------------
# demo inspect


def _gap_report(raw: RawCapture) -> list:
    """Per-marker dropout statistics: (missing samples, longest run)."""
    missing = np.any(np.isnan(raw.markers), axis=2)  # (n, N)
    out = []
    for j in range(missing.shape[1]):
        col = missing[:, j]
        longest = run = 0
        for flag in col:
            run = run + 1 if flag else 0
            longest = max(longest, run)
        out.append((int(col.sum()), longest))
    return out


def _cmd_demo_inspect(args) -> int:
    for path in (args.capture, args.annotation):
        if not os.path.isfile(path):
            return _fail(f"no such file: {path}", 2)
    try:
        raw = RawCapture.load(args.capture, args.annotation)
        res = timing_details(raw)
        demo = build_demonstration(raw, res.t0, res.t_f, raw.t_c)
    except (DemoIngestError, ValueError) as err:
        return _fail(str(err), 2)

    print(f"samples        {len(raw.times)} at {1.0 / np.median(np.diff(raw.times)):.1f} Hz")
    print(f"markers        {raw.markers.shape[1]}")
    print(f"t_peak         {res.t_peak:.6f} s (hand speed {res.peak_speed:.3f} m/s)")
    print(f"t_slow         {res.t_slow:.6f} s")
    print(f"t0             {res.t0:.6f} s")
    print(f"t_c            {raw.t_c:.6f} s")
    print(f"t_f            {res.t_f:.6f} s (t_c + {res.t_f - raw.t_c:.3f})")
    print(f"T              {res.t_f - res.t0:.6f} s")
    print(f"trial samples  {len(demo.times)}, rope samples {len(demo.marker_times)}")
    gaps = _gap_report(raw)
    worst = max(g[1] for g in gaps)
    print(f"dropout        {sum(g[0] for g in gaps)} samples total, longest run {worst}")
    for j, (count, longest) in enumerate(gaps):
        if count:
            print(f"  marker {j}: {count} missing, longest run {longest}")
    return 0


# ---------------------------------------------------------------------------
# ilc run


def _load_demo(cfg: ExperimentConfig):
    raw = RawCapture.load(cfg.capture_path, cfg.annotation_path)
    res = timing_details(raw)
    return build_demonstration(raw, res.t0, res.t_f, raw.t_c)


def _write_run_artifacts(out_dir: str, records, seed: int, ilc_cfg) -> None:
    atomic_write(os.path.join(out_dir, "run_log.jsonl"), run_log_jsonl(records, seed, ilc_cfg))
    atomic_write(os.path.join(out_dir, "summary.csv"), summary_csv(records, seed))
    if records:
        atomic_write(
            os.path.join(out_dir, "command.json"), command_json(records[-1].command, seed)
        )
        for idx, record in enumerate(records):
            table = RolloutTable.from_measured(record.measured)
            atomic_write(os.path.join(out_dir, f"rollout_{idx:03d}.jsonl"), table.to_jsonl())


def _first_success(records):
    for r in records:
        if r.success:
            return r
    return None


def _cmd_ilc_run(args) -> int:
    try:
        cfg = load_config(args.config)
        demo = _load_demo(cfg)
    except (ConfigError, DemoIngestError, ValueError, OSError) as err:
        return _fail(str(err), 2)

    chain = cfg.build_chain()
    plant = cfg.build_plant()

    def progress(record):
        print(
            f"iteration {record.iteration}: cost {record.objective:.6g}"
            f"{'  success' if record.success else ''}"
        )

    try:
        records = run_ilc(
            demo, chain, cfg.rope, plant, cfg.ilc,
            limits=cfg.limits, weights=cfg.weights, seed=cfg.seed,
            on_iteration=progress,
        )
        aborted = None
    except IlcAborted as err:
        records, aborted = err.records, err

    _write_run_artifacts(cfg.output_dir, records, cfg.seed, cfg.ilc)
    print(f"artifacts written to {cfg.output_dir}")
    if aborted is not None:
        return _fail(str(aborted), 1)
    hit = _first_success(records)
    if hit is None:
        return _fail(
            f"no success within {cfg.ilc.max_iterations} iterations "
            f"(best cost {min(r.objective for r in records):.6g})",
            1,
        )
    print(f"success at iteration {hit.iteration} (trial {hit.iteration + 1})")
    return 0


# ---------------------------------------------------------------------------
# ilc transfer


def _cmd_ilc_transfer(args) -> int:
    try:
        names = sorted(
            f for f in os.listdir(args.configs)
            if f.endswith(".cfg") and os.path.isfile(os.path.join(args.configs, f))
        )
    except OSError as err:
        return _fail(str(err), 2)
    if len(names) < 2:
        return _fail(f"need at least two .cfg files in {args.configs}", 2)

    # Learner-side settings (model, weights, limits, loop, seed) come from
    # the first config; the others contribute their demo and plant.
    try:
        configs = {os.path.splitext(n)[0]: load_config(os.path.join(args.configs, n))
                   for n in names}
        demos = {key: _load_demo(c) for key, c in configs.items()}
    except (ConfigError, DemoIngestError, ValueError, OSError) as err:
        return _fail(str(err), 2)

    lead = configs[next(iter(configs))]
    chain = lead.build_chain()
    plants = {key: c.build_plant() for key, c in configs.items()}

    commands = {}
    for key, c in configs.items():
        print(f"learning on preset {key} ...")
        try:
            records = run_ilc(
                demos[key], chain, lead.rope, plants[key], lead.ilc,
                limits=lead.limits, weights=lead.weights, seed=c.seed,
            )
        except IlcAborted as err:
            return _fail(f"preset {key}: {err}", 1)
        hit = _first_success(records)
        if hit is None:
            return _fail(
                f"preset {key}: no success within {lead.ilc.max_iterations} iterations", 1
            )
        commands[key] = hit.command
        print(f"  learned in {hit.iteration + 1} trials")

    result = transfer_experiment(
        demos, commands, plants, lead.ilc,
        rope_params=lead.rope, chain=chain, limits=lead.limits,
        weights=lead.weights, seed=lead.seed, jobs=args.jobs,
    )
    out_path = os.path.join(lead.output_dir, "transfer_matrix.csv")
    atomic_write(out_path, with_seed_header(result.to_csv(), lead.seed))
    sys.stdout.write(result.to_csv())
    print(f"matrix written to {out_path}")
    return 0


# ---------------------------------------------------------------------------
# ilc sweep


def parse_grid(text: str) -> list:
    """Grid rows '<stiffness>, <end_mass>'; '#' comments and an optional
    header row are allowed. Errors name the offending line."""
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        parts = [p for p in body.replace(",", " ").split() if p]
        if lineno == 1 and [p.lower() for p in parts] == ["stiffness", "end_mass"]:
            continue  # header row
        if len(parts) != 2 or not all(_is_number(p) for p in parts):
            raise ConfigError(
                f"grid line {lineno}: expected '<stiffness>, <end_mass>', got {line.strip()!r}"
            )
        rows.append((float(parts[0]), float(parts[1])))
    if not rows:
        raise ConfigError("grid file contains no parameter rows")
    return rows


def _is_number(token: str) -> bool:
    try:
        float(token)
        return True
    except ValueError:
        return False


def _cmd_ilc_sweep(args) -> int:
    try:
        cfg = load_config(args.config)
        with open(args.grid) as f:
            grid = parse_grid(f.read())
        demo = _load_demo(cfg)
    except (ConfigError, DemoIngestError, ValueError, OSError) as err:
        return _fail(str(err), 2)

    chain = cfg.build_chain()
    plant = cfg.build_plant()
    print(f"sweeping {len(grid)} model parameter points ...")
    initial = track_demonstration(demo, chain, cfg.limits)
    result = sensitivity_sweep(
        demo, plant, grid, cfg.ilc,
        base_params=cfg.rope, chain=chain, limits=cfg.limits,
        weights=cfg.weights, seed=cfg.seed, initial_command=initial, jobs=args.jobs,
    )
    out_path = os.path.join(cfg.output_dir, "sweep_table.csv")
    atomic_write(out_path, with_seed_header(result.to_csv(), cfg.seed))
    sys.stdout.write(result.to_csv())
    print(f"table written to {out_path}")
    return 0


# ---------------------------------------------------------------------------
# export rollout


def _cmd_export_rollout(args) -> int:
    try:
        with open(args.log) as f:
            text = f.read()
    except OSError as err:
        return _fail(str(err), 2)
    try:
        if text.lstrip().startswith("{"):
            table = RolloutTable.from_jsonl(text)
        else:
            table = RolloutTable.from_csv(text)
    except (ValueError, KeyError) as err:
        return _fail(f"{args.log}: {err}", 2)

    out = args.out
    if out is None:
        stem = os.path.splitext(args.log)[0]
        out = f"{stem}.{args.format}"
    rendered = table.to_jsonl() if args.format == "jsonl" else table.to_csv()
    atomic_write(out, rendered)
    print(f"{len(table.times)} frames -> {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="taskilc",
        description="Task-level iterative learning on a simulated rope plant.",
    )
    groups = parser.add_subparsers(dest="group", required=True)

    demo = groups.add_parser("demo", help="demonstration utilities")
    demo_cmds = demo.add_subparsers(dest="cmd", required=True)
    inspect = demo_cmds.add_parser("inspect", help="report timing selection for a capture")
    inspect.add_argument("capture", help="capture CSV path")
    inspect.add_argument("annotation", help="annotation JSON path")
    inspect.set_defaults(func=_cmd_demo_inspect)

    ilc = groups.add_parser("ilc", help="learning experiments")
    ilc_cmds = ilc.add_subparsers(dest="cmd", required=True)

    run = ilc_cmds.add_parser("run", help="run the learning loop from a config file")
    run.add_argument("--config", required=True, help="experiment config path")
    run.set_defaults(func=_cmd_ilc_run)

    transfer = ilc_cmds.add_parser(
        "transfer",
        help="learn on every preset config in a directory, then transfer each "
        "learned command to every other plant (learner settings come from "
        "the first config in name order)",
    )
    transfer.add_argument("--configs", required=True, help="directory of per-preset .cfg files")
    transfer.add_argument("--jobs", type=int, default=1, help="parallel cells (default 1)")
    transfer.set_defaults(func=_cmd_ilc_transfer)

    sweep = ilc_cmds.add_parser(
        "sweep", help="trials-to-success over a grid of learner model parameters"
    )
    sweep.add_argument("--config", required=True, help="experiment config path")
    sweep.add_argument("--grid", required=True, help="grid file: '<stiffness>, <end_mass>' rows")
    sweep.add_argument("--jobs", type=int, default=1, help="parallel grid points (default 1)")
    sweep.set_defaults(func=_cmd_ilc_sweep)

    export = groups.add_parser("export", help="artifact conversion")
    export_cmds = export.add_subparsers(dest="cmd", required=True)
    rollout = export_cmds.add_parser("rollout", help="convert a rollout log between formats")
    rollout.add_argument("log", help="rollout file (jsonl or csv)")
    rollout.add_argument("--format", required=True, choices=("jsonl", "csv"))
    rollout.add_argument("--out", help="output path (default: input with new extension)")
    rollout.set_defaults(func=_cmd_export_rollout)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
