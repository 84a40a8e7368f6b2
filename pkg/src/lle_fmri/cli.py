"""Command-line entry point: ``lle-fmri <subcommand> [options]``."""
from __future__ import annotations

import argparse
import logging
from pathlib import Path
import sys

import numpy as np

from .classify import SelectionResult
from .config import DEFAULT_R, ConfigError, RunConfig, load_config
from .evaluation import (ModeCache, holdout_evaluate, stratified_split, sweep,
                         training_report)
from .grid import GridDims, ScanVolume
from .io import FormatError, ManifestError, load_manifest, write_raw_volume
from .pipeline import PipelineError, RunWriter, run_pipeline
from .statmaps import build_map, write_statmap
from .synthetic import SyntheticSpec, centered_block, generate_synthetic, write_cohort


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    sup = argparse.SUPPRESS
    g.add_argument("--config", default=sup, help="key=value run configuration file")
    g.add_argument("--seed", type=int, default=sup, help="unsigned 64-bit seed")
    g.add_argument("--threads", type=int, default=sup, help="worker threads for per-subject work")
    g.add_argument("--out", default=sup, help="output directory")
    g.add_argument("-v", "--verbose", action="store_true", default=sup)
    return p


def build_parser() -> argparse.ArgumentParser:
    flags = _global_flags()
    parser = argparse.ArgumentParser(
        prog="lle-fmri", parents=[flags],
        description="Locally linear embedding of fMRI scans with volume selection and LDA.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, manifest=True):
        sp = sub.add_parser(name, parents=[flags], help=help_text)
        if manifest:
            sp.add_argument("--manifest", required=True, help="dataset manifest")
            sp.add_argument("--method", choices=("lle", "pca", "original"))
            sp.add_argument("--r", type=int, help="neighbourhood radius")
        return sp

    add("synth", "write a synthetic planted cohort and its manifest", manifest=False)
    sp = add("embed", "reconstruct every subject at a fixed d")
    sp.add_argument("--d", type=int, required=True)
    sp.add_argument("--partition", choices=("training", "holdout", "all"), default="all")
    add("sweep", "choose d and the diagnostic volumes on the training partition")
    for name, text in (("train", "LOOCV report on training at fixed settings"),
                       ("eval", "fit on training, score the holdout once"),
                       ("maps", "voxelwise t-maps at the selected volumes")):
        sp = add(name, text)
        sp.add_argument("--selection", help="selection.txt from a sweep (supplies d and volumes)")
        sp.add_argument("--d", type=int)
        sp.add_argument("--volumes", help="comma-separated volume indices")
    add("run", "full pipeline: sweep, reports, holdout, maps")
    return parser


def _resolve_config(args) -> RunConfig:
    config = RunConfig()
    if getattr(args, "config", None):
        config = load_config(args.config, config)
    overrides = {k: getattr(args, k, None) for k in ("seed", "threads", "method", "r")}
    if getattr(args, "manifest", None):
        overrides["manifest"] = args.manifest
    return config.with_overrides(**overrides).validate()


def _fixed_settings(args):
    if args.selection:
        sel = SelectionResult.from_text(Path(args.selection).read_text(encoding="utf-8"))
        d = args.d if args.d is not None else sel.d
        volumes = sel.volumes
    else:
        d = args.d
        volumes = [int(v) for v in (args.volumes or "").split(",") if v.strip()]
    if d is None or not volumes:
        raise ConfigError("need --selection, or both --d and --volumes")
    return d, volumes


def _labels(scans):
    return np.array([s.label for s in scans], dtype=int)


def cmd_synth(config: RunConfig, out: Path) -> None:
    dims = GridDims(*config.synth_dims)
    spec = SyntheticSpec(dims, config.n_patients, config.n_controls,
                         centered_block(dims, config.block_size), config.planted_volumes,
                         config.effect, config.sigma, config.seed)
    scans = generate_synthetic(spec)
    holdout = []
    if config.n_holdout:
        _, hold = stratified_split(_labels(scans), config.n_holdout, config.seed)
        holdout = [scans[k].subject_id for k in hold]
    path = write_cohort(scans, out, "synthetic", holdout,
                        config.r or None, list(config.d_grid) or None)
    print(path)


def cmd_embed(config, manifest, args, out: Path) -> None:
    which = None if args.partition == "all" else args.partition
    scans = manifest.load(which)
    r = config.r or manifest.r or DEFAULT_R
    cache = ModeCache(scans, config.method, r, config.lle_options(), config.threads)
    stack = cache.stack(args.d)
    out.mkdir(parents=True, exist_ok=True)
    for scan, modes in zip(scans, stack):
        write_raw_volume(ScanVolume(scan.dims.with_T(args.d), modes, scan.subject_id),
                         out / f"{scan.subject_id}.rawvol")


def cmd_fixed(command, config, manifest, args, out: Path) -> None:
    d, volumes = _fixed_settings(args)
    r = config.r or manifest.r or DEFAULT_R
    options = config.lle_options()
    writer = RunWriter(out)
    train = manifest.load("training")
    cache = ModeCache(train, config.method, r, options, config.threads)
    if command == "train":
        rep = training_report(train, d, volumes, config.method, r, options, cache)
        writer.write_text("report_training.txt", rep.to_text())
        return
    holdout = manifest.load("holdout")
    if command == "eval":
        rep, _ = holdout_evaluate(train, holdout, d, volumes, config.method, r,
                                  options, config.threads, cache)
        writer.write_text("report_holdout.txt", rep.to_text())
        return
    scans = train + holdout
    stack = np.concatenate([cache.stack(d)] + (
        [ModeCache(holdout, config.method, r, options, config.threads).stack(d)]
        if holdout else []))
    labels = _labels(scans)
    for vol in volumes:
        smap = build_map([ScanVolume(manifest.dims.with_T(d), m) for m in stack[labels == 1]],
                         [ScanVolume(manifest.dims.with_T(d), m) for m in stack[labels == 0]],
                         vol, config.alpha, config.welch)
        write_statmap(smap, writer.path(f"maps/statmap_v{vol:03d}.bin"))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(getattr(args, "out", None) or ("synthetic" if args.command == "synth" else "run"))
    try:
        config = _resolve_config(args)
        if args.command == "synth":
            cmd_synth(config, out)
            return 0
        if args.command == "run":
            run_pipeline(args.manifest, config=config, out_dir=out)
            return 0
        manifest = load_manifest(args.manifest)
        if args.command == "embed":
            cmd_embed(config, manifest, args, out)
        elif args.command == "sweep":
            r = config.r or manifest.r or DEFAULT_R
            grid = list(config.d_grid) or manifest.d_grid
            res = sweep(manifest.load("training"), config.method, r, grid,
                        config.lle_options(), config.n_points, config.threads)
            writer = RunWriter(out)
            writer.write_text("sweep.tsv", res.to_text())
            writer.write_text("selection.txt", res.selection.to_text())
        else:
            cmd_fixed(args.command, config, manifest, args, out)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, ManifestError, FormatError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
