"""Synthetic two-group cohorts with a planted mean shift."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import GridDims, ScanVolume, linear_index
from .io import DatasetManifest, SubjectEntry, write_raw_volume


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian-noise cohort description.

    ``effect`` is the shift added to patients, in units of ``sigma``, at
    every (voxel, volume) pair of ``planted_voxels`` x ``planted_volumes``.
    """

    dims: GridDims
    n_patients: int = 10
    n_controls: int = 10
    planted_voxels: tuple = ()
    planted_volumes: tuple = ()
    effect: float = 2.0
    sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_patients < 0 or self.n_controls < 0:
            raise ValueError("group sizes must be non-negative")
        if self.effect < 0:
            raise ValueError(f"effect size must be >= 0, got {self.effect}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        for v in self.planted_voxels:
            if not 0 <= v < self.dims.V:
                raise ValueError(f"planted voxel {v} outside [0, {self.dims.V})")
        for t in self.planted_volumes:
            if not 0 <= t < self.dims.T:
                raise ValueError(f"planted volume {t} outside [0, {self.dims.T})")


def block_voxels(dims: GridDims, corner, size: int) -> tuple:
    """Indices of the ``size``-sided cube whose lowest corner is ``corner``."""
    x0, y0, z0 = corner
    out = []
    for z in range(z0, z0 + size):
        for y in range(y0, y0 + size):
            for x in range(x0, x0 + size):
                out.append(linear_index((x, y, z), dims))
    return tuple(sorted(out))


def centered_block(dims: GridDims, size: int) -> tuple:
    corner = tuple((n - size) // 2 for n in dims.shape3)
    return block_voxels(dims, corner, size)


def generate_synthetic(spec: SyntheticSpec) -> list[ScanVolume]:
    """Patients first (label 1) then controls (label 0), ids ``sub-000``...

    Every subject draws its own noise from a child of ``SeedSequence(seed)``,
    so the cohort is a pure function of the spec.
    """
    n = spec.n_patients + spec.n_controls
    children = np.random.SeedSequence(spec.seed).spawn(n)
    vox = np.asarray(spec.planted_voxels, dtype=np.intp)
    vols = np.asarray(spec.planted_volumes, dtype=np.intp)
    shift = spec.effect * spec.sigma
    scans = []
    for k in range(n):
        label = 1 if k < spec.n_patients else 0
        rng = np.random.default_rng(children[k])
        data = rng.normal(0.0, spec.sigma, size=(spec.dims.V, spec.dims.T))
        if label == 1 and vox.size and vols.size:
            data[np.ix_(vox, vols)] += shift
        scans.append(ScanVolume(spec.dims, data, f"sub-{k:03d}", label))
    return scans


def write_cohort(scans, out_dir, name: str = "synthetic", holdout_ids=(),
                 r: int | None = None, d_grid=None) -> Path:
    """Write each scan as ``<id>.rawvol`` plus a ``manifest.txt``; returns its path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    holdout_ids = set(holdout_ids)
    entries = []
    for s in scans:
        path = out / f"{s.subject_id}.rawvol"
        write_raw_volume(s, path)
        part = "holdout" if s.subject_id in holdout_ids else "training"
        entries.append(SubjectEntry(s.subject_id, path, int(s.label), part))
    manifest = DatasetManifest(name, scans[0].dims, entries, r, d_grid, out)
    mpath = out / "manifest.txt"
    mpath.write_text(manifest.to_text(), encoding="utf-8")
    return mpath
