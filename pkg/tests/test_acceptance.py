"""Acceptance battery: one PASS/FAIL line per criterion, at the stated tolerances.

Run with ``pytest -s tests/test_acceptance.py`` to see the lines as they are
produced; they are also repeated in the terminal summary.
"""
import dataclasses
import math
import time

import numpy as np
import pytest
import scipy.linalg as sla
from scipy import stats

from conftest import ACCEPTANCE_LINES
from lle_fmri.classify import lda_fit, lda_predict, sfs_select
from lle_fmri.config import RunConfig
from lle_fmri.evaluation import binomial_error, chance_baseline, stratified_split
from lle_fmri.grid import GridDims, NeighborhoodSpec, ScanVolume, interior_count, linear_index
from lle_fmri.io import load_manifest
from lle_fmri.lle import (alignment_matrix, bottom_eigenpairs, compute_weights, local_spectra,
                          reconstruct_scan)
from lle_fmri.pca import fit_pca
from lle_fmri.pipeline import run_pipeline
from lle_fmri.statmaps import ttest_columns, voxel_ttest
from lle_fmri.synthetic import SyntheticSpec, centered_block, generate_synthetic, write_cohort


def record(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


# -- 1. binomial half-widths ---------------------------------------------------

def test_criterion_01_binomial_error():
    t0 = time.perf_counter()
    a = 100 * binomial_error(26 / 30, 30)
    b = 100 * binomial_error(46 / 51, 51)
    ms = 1e3 * (time.perf_counter() - t0) / 2
    ok = abs(a - 12.2) <= 0.05 and abs(b - 8.2) <= 0.05 and ms < 1.0
    assert record(1, ok, f"26/30 -> {a:.3f}%, 46/51 -> {b:.3f}% "
                         f"(targets 12.2, 8.2 +/- 0.05), {ms:.3f} ms per call")


# -- 2. neighbourhoods -----------------------------------------------------------

def test_criterion_02_neighbourhoods():
    t0 = time.perf_counter()
    dims = GridDims(8, 8, 8, 1)
    centre = linear_index((4, 4, 4), dims)
    counts = {}
    asym = 0
    for r in (1, 2):
        nb = NeighborhoodSpec.build(dims, r)
        counts[r] = (interior_count(r), len(nb[centre]))
        members = [set(map(int, nb[i])) for i in range(dims.V)]
        asym += sum(i not in members[j] for i in range(dims.V) for j in members[i])
        asym += sum(i in members[i] for i in range(dims.V))
    secs = time.perf_counter() - t0
    ok = counts[1] == (26, 26) and counts[2] == (124, 124) and asym == 0 and secs < 1.0
    assert record(2, ok, f"interior counts r=1 {counts[1]}, r=2 {counts[2]}; "
                         f"asymmetric or self pairs on 8x8x8: {asym}; {secs:.3f} s")


# -- 3. iterative eigensolver against a dense decomposition ----------------------

def test_criterion_03_iterative_matches_dense():
    t0 = time.perf_counter()
    worst_angle = worst_trace = 0.0
    dims = GridDims(5, 5, 5, 20)
    for seed in range(20):
        rng = np.random.default_rng(seed)
        scan = ScanVolume(dims, rng.standard_normal((dims.V, dims.T)))
        r = 1 + seed % 2
        d = 1 + seed % 10
        nb = NeighborhoodSpec.build(dims, r)
        Phi = alignment_matrix(compute_weights(local_spectra(scan, nb), d), nb)
        vals, vecs = bottom_eigenpairs(Phi, d + 1)
        ev, U = np.linalg.eigh(Phi.toarray())
        worst_angle = max(worst_angle, float(sla.subspace_angles(vecs, U[:, :d + 1]).max()))
        ref = ev[:d + 1].sum()
        worst_trace = max(worst_trace, abs(vals.sum() - ref) / max(abs(ref), 1e-300))
    secs = time.perf_counter() - t0
    ok = worst_angle < 1e-6 and worst_trace < 1e-6 and secs < 30
    assert record(3, ok, f"20 scans 5x5x5x20: max principal angle {worst_angle:.2e}, "
                         f"max relative trace error {worst_trace:.2e}; {secs:.2f} s")


# -- 4. MLLE invariants over a fuzz battery ----------------------------------------

def test_criterion_04_mlle_fuzz():
    sums = orth = colsum = shift = 0.0
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        dims = GridDims(*(int(v) for v in rng.integers(3, 7, size=3)), int(rng.integers(4, 16)))
        r = int(rng.integers(1, 3))
        d = int(rng.integers(1, dims.T + 1))
        scan = ScanVolume(dims, rng.normal(size=(dims.V, dims.T)) * rng.uniform(0.1, 10))
        nb = NeighborhoodSpec.build(dims, r)
        spectra = local_spectra(scan, nb)
        sums = max(sums, max(abs(w.sum() - 1.0) for w in spectra.base))
        Z = reconstruct_scan(scan, r, d, neighborhoods=nb, spectra=spectra).modes
        orth = max(orth, float(np.abs(Z.T @ Z - np.eye(d)).max()))
        colsum = max(colsum, float(np.abs(Z.sum(axis=0)).max() / math.sqrt(dims.V)))
        moved = ScanVolume(dims, scan.data + rng.normal(scale=10.0, size=dims.T))
        base = local_spectra(moved, nb).base
        shift = max(shift, max(float(np.abs(p - q).max()) for p, q in zip(spectra.base, base)))
    ok = sums <= 1e-8 and orth <= 1e-6 and colsum <= 1e-6 and shift <= 1e-10
    assert record(4, ok, f"50 seeds: max |sum w - 1| {sums:.1e}, max |Z'Z - I| {orth:.1e}, "
                         f"max |col sum|/sqrt(V) {colsum:.1e}, translation drift {shift:.1e}")


# -- 5. PCA baseline ------------------------------------------------------------------

def test_criterion_05_pca():
    t0 = time.perf_counter()
    recon = agree = 0.0
    for seed in range(20):
        X = np.random.default_rng(seed).normal(size=(50, 10))
        model = fit_pca(X)
        recon = max(recon, float(np.abs(model.reconstruct(model.scores(X)) - X).max()))
        Xc = X - X.mean(axis=0)
        evals, evecs = np.linalg.eigh(Xc.T @ Xc)
        evecs = evecs[:, ::-1]
        for k in range(10):
            a, b = model.rotation[:, k], evecs[:, k]
            agree = max(agree, min(np.abs(a - b).max(), np.abs(a + b).max()))
    secs = time.perf_counter() - t0
    ok = recon < 1e-6 and agree < 1e-8 and secs < 5
    assert record(5, ok, f"d=T reconstruction error {recon:.1e}, covariance-oracle "
                         f"disagreement up to sign {agree:.1e} on 20 50x10; {secs:.2f} s")


# -- 6. classifier and selection --------------------------------------------------------

def test_criterion_06_classifier_and_selection():
    t0 = time.perf_counter()
    gap_err = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n0, n1, p = int(rng.integers(2, 8)), int(rng.integers(2, 8)), int(rng.integers(1, 6))
        X = rng.normal(size=(n0 + n1, p)) * rng.uniform(0.5, 3, size=p)
        y = np.array([0] * n0 + [1] * n1)
        model = lda_fit(X, y)
        z = rng.normal(size=p) * 2
        sd = np.sqrt(model.variances)
        exact = (stats.norm.logpdf(z, model.means[1], sd).sum() + math.log(model.priors[1])
                 - stats.norm.logpdf(z, model.means[0], sd).sum() - math.log(model.priors[0]))
        gap_err = max(gap_err, abs(lda_predict(model, z)[1] - exact))
    recovered = increasing = 0
    for seed in range(40):
        rng = np.random.default_rng(500 + seed)
        vol = int(rng.integers(10))
        stack = rng.normal(size=(20, 125, 10))
        y = np.array([1] * 10 + [0] * 10)
        stack[y == 1, :, vol] += 2.0
        sel = sfs_select(stack, y)
        recovered += sel.volumes[0] == vol
        increasing += all(b > a for a, b in zip(sel.trace, sel.trace[1:]))
    secs = time.perf_counter() - t0
    ok = gap_err <= 1e-10 and recovered >= 38 and increasing == 40 and secs < 120
    assert record(6, ok, f"LDA gap max error {gap_err:.1e} on 100; planted volume "
                         f"recovered {recovered}/40; strictly increasing trace {increasing}/40; "
                         f"{secs:.1f} s")


# -- 7. voxelwise statistics -------------------------------------------------------------

def test_criterion_07_statistics():
    t0 = time.perf_counter()
    t_err = p_err = 0.0
    rng = np.random.default_rng(7)
    for _ in range(1000):
        n1, n0 = int(rng.integers(2, 15)), int(rng.integers(2, 15))
        a = rng.normal(rng.normal(), rng.uniform(0.2, 3), n1)
        b = rng.normal(0.0, rng.uniform(0.2, 3), n0)
        t, p, _ = voxel_ttest(a, b)
        sp2 = (((a - a.mean()) ** 2).sum() + ((b - b.mean()) ** 2).sum()) / (n1 + n0 - 2)
        t_hand = (a.mean() - b.mean()) / math.sqrt(sp2 * (1 / n1 + 1 / n0))
        p_ref = 2 * stats.t.sf(abs(t_hand), n1 + n0 - 2)
        t_err = max(t_err, abs(t - t_hand) / max(1.0, abs(t_hand)))
        p_err = max(p_err, abs(p - p_ref))
    V = 100_000
    A = rng.normal(size=(10, V))
    B = rng.normal(size=(10, V))
    _, p, _ = ttest_columns(A, B)
    frac = float((p < 0.05).mean())
    band = 3 * math.sqrt(0.05 * 0.95 / V)
    secs = time.perf_counter() - t0
    ok = t_err <= 1e-9 and p_err <= 1e-9 and abs(frac - 0.05) <= band and secs < 60
    assert record(7, ok, f"1000 pairs: t error {t_err:.1e}, p error {p_err:.1e}; null "
                         f"significant fraction {frac:.5f} (0.05 +/- {band:.5f}); {secs:.1f} s")


# -- 8 to 10. end-to-end runs on synthetic cohorts -----------------------------------------

SEEDS = range(20)


def _cohort(seed, root):
    config = RunConfig(seed=seed, r=1)
    dims = GridDims(*config.synth_dims)
    spec = SyntheticSpec(dims, config.n_patients, config.n_controls,
                         centered_block(dims, config.block_size), config.planted_volumes,
                         config.effect, config.sigma, seed)
    scans = generate_synthetic(spec)
    labels = np.array([s.label for s in scans])
    _, hold = stratified_split(labels, config.n_holdout, seed)
    path = write_cohort(scans, root / f"data{seed}", "synthetic",
                        [scans[k].subject_id for k in hold], r=1)
    return config, load_manifest(path)


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    t0 = time.perf_counter()
    out = {}
    for seed in SEEDS:
        config, manifest = _cohort(seed, root)
        out[seed] = (config, manifest, run_pipeline(manifest, "lle", config, root / f"run{seed}"))
    return root, out, time.perf_counter() - t0


def test_criterion_08_end_to_end(runs):
    _, results, secs = runs
    good = 0
    worst = []
    for seed, (_, manifest, res) in results.items():
        train_y = [s.label for s in manifest.partition("training")]
        hold_y = [s.label for s in manifest.partition("holdout")]
        chance = chance_baseline(train_y)
        bar = chance + binomial_error(chance, len(train_y))
        passed = res.training.accuracy > bar and res.holdout.accuracy >= chance_baseline(hold_y)
        good += passed
        worst.append((res.training.accuracy, res.holdout.accuracy))
    tr = min(a for a, _ in worst)
    ho = min(b for _, b in worst)
    ok = good >= 18 and secs < 600
    assert record(8, ok, f"{good}/20 seeds above bar (min training LOOCV {tr:.3f}, "
                         f"min holdout {ho:.3f}); {secs:.0f} s for 20 runs")


def test_criterion_09_holdout_labels_do_not_leak(runs):
    root, results, _ = runs
    unchanged = 0
    for seed in range(10):
        config, manifest, base = results[seed]
        rng = np.random.default_rng(10_000 + seed)
        hold = [k for k, s in enumerate(manifest.subjects) if s.partition == "holdout"]
        labels = [manifest.subjects[k].label for k in hold]
        perm = list(labels)
        while perm == labels:
            perm = list(rng.permutation(labels))
        subjects = list(manifest.subjects)
        for k, lab in zip(hold, perm):
            subjects[k] = dataclasses.replace(subjects[k], label=int(lab))
        permuted = dataclasses.replace(manifest, subjects=subjects)
        out = root / f"perm{seed}"
        res = run_pipeline(permuted, "lle", config, out)
        same = (res.sweep.to_text() == base.sweep.to_text()
                and res.selection == base.selection
                and (out / "sweep.tsv").read_bytes() == (base.out_dir / "sweep.tsv").read_bytes()
                and (out / "selection.txt").read_bytes()
                == (base.out_dir / "selection.txt").read_bytes())
        unchanged += same
    assert record(9, unchanged == 10, f"sweep and selection unchanged under holdout label "
                                      f"permutation in {unchanged}/10 seeds")


def _snapshot(out):
    return {p.relative_to(out).as_posix(): p.read_bytes()
            for p in sorted(out.rglob("*")) if p.is_file()}


def test_criterion_10_determinism(runs):
    root, results, _ = runs
    config, manifest, base = results[0]
    again = run_pipeline(manifest, "lle", config, root / "rerun0")
    a, b = _snapshot(base.out_dir), _snapshot(again.out_dir)
    diff = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    n_maps = sum(k.startswith("maps/") for k in a)
    assert record(10, not diff and n_maps > 0,
                  f"rerun of seed 0 byte-identical across {len(a)} files "
                  f"({n_maps} maps); differing: {diff or 'none'}")
