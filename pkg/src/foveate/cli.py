"""Command-line entry points.

Subcommands: simulate, invert, sweep, render, atlas, validate-weights.
Flags override values from an optional JSON config file. Outputs are
written atomically (temp file, rename) and are byte-reproducible for a
fixed seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import inversion as inv
from .dynamics import EngineConfig, PrecisionConfig
from .priority import build_atlas, load_atlas, save_atlas
from .render import render_trace
from .vae import WeightFormatError, load_weights, elbo_terms

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_MISSING_INPUT = 2
EXIT_USAGE = 64

SUBCOMMANDS = ("simulate", "invert", "sweep", "render", "atlas", "validate-weights")

CSV_HEADER = "param_c,param_beta,accuracy,mean_saccades,mean_fixation_ms,pct_pixels"


@dataclass
class RunConfig:
    weights: str = ""
    atlas: str = ""
    trials_per_class: int = 100
    c_pref: float = 6.0
    beta: float = 1.0
    seed: int = 0
    outdir: str = "out"
    mode: str = "sample"
    data_dir: str = ""
    precisions: dict = field(default_factory=dict)  # overrides, e.g. {"pi_e": 40.0}

    def engine(self) -> EngineConfig:
        return EngineConfig(precisions=PrecisionConfig(**{
            **dict(pi_p=float(np.exp(8.0)), pi_e=float(np.exp(4.0)),
                   pi_x=float(np.exp(4.0)), pi_a=float(np.exp(4.0))),
            **self.precisions}))


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _load_inputs(config: RunConfig):
    if not Path(config.weights).exists():
        print(f"error: weight file not found: {config.weights}", file=sys.stderr)
        return None
    if not Path(config.atlas).exists():
        print(f"error: atlas file not found: {config.atlas}", file=sys.stderr)
        return None
    try:
        weights = load_weights(config.weights)
        atlas = load_atlas(config.atlas)
    except (WeightFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return None
    root = config.data_dir or None
    train, test = ds.ensure_dataset(root)
    return weights, atlas, train, test


def _metrics_row(c: float, beta: float, metrics: dict) -> str:
    return (f"{c:.6f},{beta:.6f},{metrics['accuracy']:.6f},"
            f"{metrics['mean_saccades']:.6f},{metrics['mean_fixation_ms']:.6f},"
            f"{metrics['pct_unique_pixels']:.6f}")


def run_trials(config: RunConfig):
    """Simulate, then write the trace TSV and the metrics CSV.

    Returns (trace_path, csv_path) or None when inputs are missing.
    """
    loaded = _load_inputs(config)
    if loaded is None:
        return None
    weights, atlas, _train, test = loaded
    stimuli = inv.stimuli_per_class(test, config.trials_per_class, seed=config.seed)
    params = inv.SubjectiveParams(c_pref=config.c_pref, beta=config.beta)
    traces = inv.simulate_subject(params, stimuli, config.seed, atlas=atlas,
                                  weights=weights, engine=config.engine(),
                                  mode=config.mode)
    metrics = inv.behavioral_metrics(traces)

    outdir = Path(config.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    trace_path = outdir / "traces.tsv"
    csv_path = outdir / "metrics.csv"
    _atomic_write(trace_path, "".join(inv.format_trace(t) + "\n" for t in traces))
    _atomic_write(csv_path, CSV_HEADER + "\n"
                  + _metrics_row(config.c_pref, config.beta, metrics) + "\n")
    return trace_path, csv_path


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _add_io_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--weights", help="VAEW weight file")
    p.add_argument("--atlas", help="PATL atlas file")
    p.add_argument("--data-dir", help="dataset root (default FOVEATE_DATA_DIR or ./data)")
    p.add_argument("--outdir", default=None)
    p.add_argument("--seed", type=int, default=None)


def _merge_config(args) -> RunConfig:
    base = {}
    if getattr(args, "config", None):
        with open(args.config) as f:
            base = json.load(f)
    config = RunConfig(**{k: v for k, v in base.items() if k in RunConfig.__dataclass_fields__})
    for name, attr in (("weights", "weights"), ("atlas", "atlas"),
                       ("data_dir", "data_dir"), ("outdir", "outdir"),
                       ("seed", "seed"), ("mode", "mode"),
                       ("trials_per_class", "trials"), ("c_pref", "c"),
                       ("beta", "beta")):
        val = getattr(args, attr, None)
        if val is not None:
            setattr(config, name, val)
    return config


def cmd_simulate(args) -> int:
    config = _merge_config(args)
    result = run_trials(config)
    if result is None:
        return EXIT_MISSING_INPUT
    trace_path, csv_path = result
    print(f"wrote {trace_path} and {csv_path}")
    return EXIT_OK


def cmd_invert(args) -> int:
    config = _merge_config(args)
    loaded = _load_inputs(config)
    if loaded is None:
        return EXIT_MISSING_INPUT
    weights, atlas, _train, test = loaded
    if not Path(args.traces).exists():
        print(f"error: trace file not found: {args.traces}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    traces = inv.read_traces(args.traces)
    stimuli = {i: (test.image_float(i), int(test.labels[i])) for i in range(len(test))}
    opts = inv.InvertOptions(atlas=atlas, weights=weights, engine=config.engine(),
                             stimuli=stimuli)
    result = inv.invert(traces, inv.GaussianPriors(), opts)
    report = {
        "c_pref": result.c_pref,
        "beta": result.beta,
        "mean": result.mean.tolist(),
        "covariance": result.covariance.tolist(),
        "free_energy": result.free_energy,
        "iterations": result.iterations,
        "reliable": result.reliable,
    }
    out = Path(config.outdir or "out")
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "posterior.json", json.dumps(report, indent=2) + "\n")
    print(f"c_pref = {result.c_pref:.3f}, beta = {result.beta:.3f} "
          f"({result.iterations} iterations), saved {out / 'posterior.json'}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _merge_config(args)
    loaded = _load_inputs(config)
    if loaded is None:
        return EXIT_MISSING_INPUT
    weights, atlas, _train, test = loaded
    betas = [float(x) for x in args.beta.split(",")] if args.beta else [config.beta]
    cs = [float(x) for x in args.c_grid.split(",")] if args.c_grid else [config.c_pref]
    grid = [(c, b) for c in cs for b in betas]
    stimuli = inv.stimuli_per_class(test, args.trials or 200, seed=config.seed)
    rows = inv.sweep(grid, stimuli, config.seed, atlas=atlas, weights=weights,
                     engine=config.engine())
    out = Path(config.outdir or "out")
    out.mkdir(parents=True, exist_ok=True)
    lines = [CSV_HEADER] + [_metrics_row(r["param_c"], r["param_beta"], r) for r in rows]
    _atomic_write(out / "sweep.csv", "\n".join(lines) + "\n")
    print(f"wrote {out / 'sweep.csv'} ({len(rows)} rows)")
    return EXIT_OK


def cmd_render(args) -> int:
    config = _merge_config(args)
    loaded = _load_inputs(config)
    if loaded is None:
        return EXIT_MISSING_INPUT
    weights, atlas, _train, test = loaded
    traces = inv.read_traces(args.traces)
    matches = [t for t in traces if t.trial_id == args.trial_id]
    if not matches:
        print(f"error: trial {args.trial_id} not in trace file", file=sys.stderr)
        return EXIT_MISSING_INPUT
    trace = matches[0]
    stimulus = test.image_float(trace.stimulus_id)
    setup = inv.make_setup(inv.SubjectiveParams(), atlas, weights, config.engine())
    render_trace(trace, stimulus, setup, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_atlas(args) -> int:
    config = _merge_config(args)
    root = config.data_dir or None
    train, _test = ds.ensure_dataset(root)
    per_class = args.per_class
    exemplars = {}
    for d in range(10):
        imgs = train.images[train.labels == d][:per_class]
        exemplars[d] = imgs.astype(np.float64) / 255.0
    atlas = build_atlas(exemplars)
    save_atlas(args.out, atlas)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_validate_weights(args) -> int:
    config = _merge_config(args)
    if not Path(config.weights).exists():
        print(f"error: weight file not found: {config.weights}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    try:
        weights = load_weights(config.weights)
    except WeightFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    train, _test = ds.ensure_dataset(config.data_dir or None)
    rng = np.random.default_rng(config.seed or 0)
    losses = []
    for i in rng.integers(0, len(train), size=8):
        recon, kl_c, kl_d, loss = elbo_terms(train.image_float(int(i)), weights, rng)
        losses.append(loss)
    print(f"weights ok: {len(weights.encoder)}+{len(weights.decoder)} layers, "
          f"mean validation loss {np.mean(losses):.2f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="foveate",
                                     description="Gaze-contingent digit search simulator")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("simulate", help="run trials, write traces and metrics")
    _add_io_flags(p)
    p.add_argument("--trials", type=int, default=None, help="trials per class")
    p.add_argument("--c", type=float, default=None, help="preference scalar")
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--mode", choices=("sample", "argmax"), default=None)

    p = sub.add_parser("invert", help="recover (c, beta) from a trace file")
    _add_io_flags(p)
    p.add_argument("--traces", required=True)

    p = sub.add_parser("sweep", help="metrics over a parameter grid")
    _add_io_flags(p)
    p.add_argument("--beta", help="comma-separated beta values")
    p.add_argument("--c-grid", help="comma-separated c values")
    p.add_argument("--trials", type=int, default=None, help="trials per class per point")

    p = sub.add_parser("render", help="render one trial as a 6-panel raster")
    _add_io_flags(p)
    p.add_argument("--traces", required=True)
    p.add_argument("--trial-id", type=int, required=True)
    p.add_argument("--out", default="trial.pgm")

    p = sub.add_parser("atlas", help="build the priority atlas from the dataset")
    _add_io_flags(p)
    p.add_argument("--out", default="atlas.patl")
    p.add_argument("--per-class", type=int, default=500)

    p = sub.add_parser("validate-weights", help="load weights and sanity-check them")
    _add_io_flags(p)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] not in SUBCOMMANDS and argv[0] not in ("-h", "--help"):
        print(f"unknown subcommand: {argv[0]}", file=sys.stderr)
        build_parser().print_usage(sys.stderr)
        return EXIT_USAGE
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    handlers = {
        "simulate": cmd_simulate,
        "invert": cmd_invert,
        "sweep": cmd_sweep,
        "render": cmd_render,
        "atlas": cmd_atlas,
        "validate-weights": cmd_validate_weights,
    }
    try:
        return handlers[args.command](args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
