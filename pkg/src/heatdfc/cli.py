"""Command-line entry point.

Every subcommand takes ``--config`` (JSON) and flags that override it. Stage
subcommands after ``dyncorr`` pick up ``<out>/config.json`` when no config is
given, so a run can be driven one stage at a time::

    heatdfc simulate --out data
    heatdfc dyncorr --manifest data/manifest.json --out run --method heat sw
    heatdfc states --out run --k auto
    heatdfc heritability --out run --steps 50000
    heatdfc report --out run

or all at once with ``heatdfc run``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from heatdfc import pipeline
from heatdfc.errors import ConfigError, HeatDFCError, IncompleteRun, StageError
from heatdfc.signal import Manifest, SubjectEntry, write_manifest, write_roi_csv
from heatdfc.synth import CohortSpec, simulate_cohort

EXIT_CONFIG = 2
EXIT_STAGE = 3


def _k_value(text):
    if text == "auto":
        return text
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("expected 'auto' or an integer") from None


def _edge_list(text):
    if text == "all":
        return text
    try:
        pairs = [tuple(int(v) for v in item.split("-")) for item in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError("edges look like 1-2,3-4 or 'all'") from None
    if any(len(p) != 2 for p in pairs):
        raise argparse.ArgumentTypeError("edges look like 1-2,3-4 or 'all'")
    return [list(p) for p in pairs]


def _common(p):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--out", dest="out_dir", help="run directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, help="worker threads")
    p.add_argument("--manifest")
    p.add_argument("--method", dest="methods", nargs="+", choices=("sw", "tsw", "heat"))
    p.add_argument("-v", "--verbose", action="store_true")


def _dyncorr_flags(p):
    p.add_argument("--fwhm", dest="fwhm_tr", type=float, help="smoothing FWHM in TRs")
    p.add_argument("--taper-bandwidth", type=float)
    p.add_argument("--degree", type=int, help="cosine basis degree (default T-1)")
    p.add_argument("--edges", type=_edge_list, help="region pairs, e.g. 1-2,3-4 (1-based)")
    p.add_argument("--trace-edges", type=_edge_list, help="edges exported to the trace table")
    p.add_argument("--format", choices=("csv", "bin"))


def _states_flags(p):
    p.add_argument("--k", type=_k_value, help="'auto' or a fixed number of states")
    p.add_argument("--k-min", type=int)
    p.add_argument("--k-max", type=int)
    p.add_argument("--restarts", type=int)


def _heritability_flags(p):
    p.add_argument("--steps", type=int, help="transpositions per walk")
    p.add_argument("--repeats", type=int)
    p.add_argument("--clamp", action="store_true", default=None, help="clamp displayed HI to [0, 1]")
    p.add_argument("--top-n", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="heatdfc", description="Dynamic functional connectivity of twin cohorts")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="write a synthetic twin cohort with a manifest")
    sim.add_argument("--out", dest="out_dir", required=True)
    sim.add_argument("--spec", help="JSON cohort description")
    sim.add_argument("--seed", type=int)
    sim.add_argument("--n-mz", type=int)
    sim.add_argument("--n-dz", type=int)
    sim.add_argument("--n-unpaired", type=int)
    sim.add_argument("--n-time", type=int)
    sim.add_argument("--n-regions", type=int)
    sim.add_argument("--noise-sd", type=float)
    sim.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("dyncorr", help="dynamic correlations for every subject")
    _common(p)
    _dyncorr_flags(p)
    p = sub.add_parser("states", help="cluster correlations into states")
    _common(p)
    _states_flags(p)
    p = sub.add_parser("heritability", help="heritability index per state and edge")
    _common(p)
    _heritability_flags(p)
    p = sub.add_parser("report", help="plot-ready tables for a finished run")
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    p = sub.add_parser("run", help="every stage in sequence")
    _common(p)
    _dyncorr_flags(p)
    _states_flags(p)
    _heritability_flags(p)
    return parser


def resolve_config(args) -> pipeline.RunConfig:
    """Config file (or the run directory's saved config), then flag overrides."""
    raw = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        raw = json.loads(path.read_text())
    elif args.out_dir and (Path(args.out_dir) / "config.json").is_file():
        raw = json.loads((Path(args.out_dir) / "config.json").read_text())
    skip = {"config", "command", "verbose"}
    for key, value in vars(args).items():
        if key not in skip and value is not None:
            raw[key] = value
    cfg = pipeline.RunConfig.from_dict(raw)
    if cfg.manifest and args.config and not Path(cfg.manifest).is_absolute():
        # manifest paths in a config file are relative to the config
        candidate = Path(args.config).parent / cfg.manifest
        if candidate.is_file() and "manifest" not in {k for k, v in vars(args).items() if v is not None}:
            cfg.manifest = str(candidate)
    return cfg


def cmd_simulate(args):
    raw = {}
    if args.spec:
        raw = json.loads(Path(args.spec).read_text())
    for key in ("seed", "n_mz", "n_dz", "n_unpaired", "n_time", "n_regions", "noise_sd"):
        value = getattr(args, key)
        if value is not None:
            raw[key] = value
    try:
        spec = CohortSpec.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(f"bad cohort description: {exc}") from None
    out = Path(args.out_dir)
    (out / "subjects").mkdir(parents=True, exist_ok=True)
    subjects = simulate_cohort(spec)
    entries = []
    with (out / "truth_states.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subject_id", "t", "state"])
        for sub in subjects:
            sid = sub.roi.subject_id
            write_roi_csv(out / "subjects" / f"{sid}.csv", sub.roi)
            entries.append(SubjectEntry(sid, f"subjects/{sid}.csv", sub.zygosity, sub.pair_id, sub.twin))
            for t, lab in enumerate(sub.truth):
                writer.writerow([sid, t, int(lab)])
    write_manifest(out / "manifest.json", Manifest(entries, spec.tr_seconds))
    (out / "cohort_spec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    print(f"wrote {len(subjects)} subjects to {out}")


def cmd_stage(args):
    cfg = resolve_config(args)
    if args.command == "dyncorr":
        cfg.validate()
        pipeline.save_config(cfg)
        pipeline.stage_dyncorr(cfg)
    elif args.command == "states":
        cfg.validate(check_files=False)
        pipeline.save_config(cfg)
        pipeline.stage_states(cfg)
    elif args.command == "heritability":
        cfg.validate(check_files=False)
        pipeline.save_config(cfg)
        herit = pipeline.stage_heritability(cfg)
        pipeline.write_summary(cfg, heritability=herit)
    elif args.command == "run":
        summary = pipeline.run_pipeline(cfg)
        print(f"run complete: k={summary['chosen_k']} config {summary['config_hash'][:12]}")


def cmd_report(args):
    tables = pipeline.report(args.out_dir)
    print(f"wrote {len(tables)} tables to {Path(args.out_dir) / 'report'}")


_STAGE_OF = {"dyncorr": "dyncorr", "states": "states", "heritability": "heritability", "report": "report"}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "simulate":
            cmd_simulate(args)
        elif args.command == "report":
            cmd_report(args)
        else:
            cmd_stage(args)
    except ConfigError as exc:
        print(f"[config] {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_STAGE
    except (IncompleteRun, HeatDFCError, ValueError, OSError) as exc:
        stage = _STAGE_OF.get(args.command, args.command)
        print(f"[{stage}] {exc}", file=sys.stderr)
        return EXIT_STAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
