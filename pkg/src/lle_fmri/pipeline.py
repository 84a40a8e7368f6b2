"""Stage-by-stage orchestration of a full run and its on-disk outputs."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classify import SelectionResult
from .config import DEFAULT_R, RunConfig
from .evaluation import (ModeCache, SweepResult, chance_report, holdout_evaluate,
                         metrics_table, sweep, training_report)
from .grid import validate_scan
from .io import DatasetManifest, load_manifest
from .statmaps import build_map, threshold_map, write_statmap


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage} failed: {message}")
        self.stage = stage


class RunWriter:
    """The single writer for one run directory.

    Log lines carry no timestamps so reruns produce identical files.
    """

    def __init__(self, out_dir):
        self.root = Path(out_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        for stale in ("FAILED", "run.log"):
            (self.root / stale).unlink(missing_ok=True)
        self._log = self.root / "run.log"

    def log(self, message: str) -> None:
        with open(self._log, "a", encoding="utf-8") as fh:
            fh.write(message.rstrip("\n") + "\n")

    def write_text(self, name: str, text: str) -> Path:
        path = self.root / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        return path

    def path(self, name: str) -> Path:
        path = self.root / name
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def fail(self, stage: str, exc: BaseException) -> None:
        message = str(exc).replace("\n", " ")
        self.log(f"FAILED stage={stage} error={type(exc).__name__}: {message}")
        self.write_text("FAILED", f"stage={stage}\nerror={type(exc).__name__}: {message}\n")


@dataclass
class RunResult:
    out_dir: Path
    sweep: SweepResult
    selection: SelectionResult
    d: int
    training: object
    holdout: object = None
    maps: dict = field(default_factory=dict)


def _labels(scans):
    return np.array([s.label for s in scans], dtype=int)


def run_pipeline(manifest: DatasetManifest | str | Path, method: str | None = None,
                 config: RunConfig | None = None, out_dir=None) -> RunResult:
    """Sweep on training, refit, score the holdout once, then map the volumes.

    Every artefact lands in ``out_dir``; on failure a ``FAILED`` file names
    the stage and :class:`PipelineError` is raised.
    """
    config = (config or RunConfig()).validate()
    if method is not None:
        config = config.with_overrides(method=method).validate()
    writer = RunWriter(out_dir or "run")
    stage = "manifest"

    def begin(name, detail=""):
        nonlocal stage
        stage = name
        writer.log(f"stage {name}" + (f" {detail}" if detail else ""))

    if not isinstance(manifest, DatasetManifest):
        config = config.with_overrides(manifest=str(manifest))
        try:
            manifest = load_manifest(manifest)
        except Exception as exc:
            writer.fail(stage, exc)
            raise PipelineError(stage, str(exc)) from exc
    method = config.method
    r = config.r or manifest.r or DEFAULT_R
    grid = list(config.d_grid) or manifest.d_grid
    config = config.with_overrides(r=r, d_grid=tuple(grid) if grid else None)
    writer.write_text("resolved_config.txt", config.to_text())
    options = config.lle_options()

    try:
        begin("load", f"dataset={manifest.name} subjects={len(manifest.subjects)}")
        train = manifest.load("training")
        holdout = manifest.load("holdout")
        for s in train + holdout:
            for w in validate_scan(s).warnings:
                writer.log(f"warning subject={s.subject_id} {w}")
        writer.log(f"partition training={len(train)} holdout={len(holdout)}")

        train_cache = ModeCache(train, method, r, options, config.threads)
        if method == "original":
            writer.log(f"passthrough d=T={manifest.dims.T}")
        else:
            begin("reconstruct", f"method={method} r={r}" if method == "lle" else f"method={method}")
        begin("sweep", f"method={method}")
        result = sweep(train, method, r, grid, options, config.n_points,
                       config.threads, train_cache)
        for d in result.grid:
            if d in result.errors:
                writer.log(f"sweep d={d} error={result.errors[d]}")
            else:
                writer.log(f"sweep d={d} accuracy={result.accuracies[d]!r} "
                           f"volumes={result.selections[d].volumes}")
        d = result.chosen_d
        selection = result.selection
        writer.log(f"chosen d={d} volumes={selection.volumes}")
        writer.write_text("sweep.tsv", result.to_text())
        writer.write_text("selection.txt", selection.to_text())

        begin("train")
        y_train = _labels(train)
        train_rep = training_report(train, d, selection.volumes, method, r, options, train_cache)
        writer.write_text("report_training.txt", train_rep.to_text())
        reports = {"training": {"chance": chance_report(y_train, "training"), method: train_rep}}

        hold_rep = None
        hold_cache = None
        if holdout:
            begin("holdout")
            hold_cache = ModeCache(holdout, method, r, options, config.threads)
            hold_rep, _ = holdout_evaluate(train, holdout, d, selection.volumes, method, r,
                                           options, config.threads, train_cache, hold_cache)
            writer.write_text("report_holdout.txt", hold_rep.to_text())
            reports["holdout"] = {"chance": chance_report(_labels(holdout), "holdout"),
                                  method: hold_rep}
        writer.write_text("metrics.tsv", metrics_table(manifest.name, reports))

        begin("maps", f"alpha={config.alpha!r}")
        modes = train_cache.stack(d)
        labels = y_train
        if holdout:
            modes = np.concatenate([modes, hold_cache.stack(d)])
            labels = np.concatenate([labels, _labels(holdout)])
        maps = {}
        rows = ["volume\tsignificant\tmin_p\tdegenerate"]
        for vol in selection.volumes:
            smap = build_map(_ModeView.wrap(modes[labels == 1], manifest.dims),
                             _ModeView.wrap(modes[labels == 0], manifest.dims),
                             vol, config.alpha, config.welch)
            write_statmap(smap, writer.path(f"maps/statmap_v{vol:03d}.bin"))
            _, count = threshold_map(smap)
            rows.append(f"{vol}\t{count}\t{float(smap.p.min())!r}\t{int(smap.degenerate.sum())}")
            writer.log(f"map volume={vol} significant={count}")
            maps[vol] = smap
        writer.write_text("maps.tsv", "\n".join(rows) + "\n")
        begin("done")
    except Exception as exc:
        writer.fail(stage, exc)
        raise PipelineError(stage, str(exc)) from exc
    return RunResult(writer.root, result, selection, d, train_rep, hold_rep, maps)


@dataclass
class _ModeView:
    dims: object
    modes: np.ndarray

    @classmethod
    def wrap(cls, stack, dims):
        return [cls(dims, m) for m in stack]
