import math

import numpy as np
import pytest
from scipy import stats
from scipy.special import betainc

from lle_fmri.grid import GridDims, ScanVolume
from lle_fmri.statmaps import (betainc_reg, build_map, read_statmap, t_sf2, threshold_map,
                               ttest_columns, voxel_ttest, write_statmap)


def test_voxel_ttest_by_hand():
    t, p, deg = voxel_ttest([1, 2, 3], [4, 5, 6])
    # pooled variance 1, se = sqrt(2/3)
    assert t == pytest.approx(-3 / math.sqrt(2 / 3), abs=1e-12)
    assert p == pytest.approx(0.021311641128756, abs=1e-9)
    assert not deg


def test_zero_variance_cases():
    assert voxel_ttest([2, 2, 2], [2, 2, 2]) == (0.0, 1.0, False)
    t, p, deg = voxel_ttest([3, 3, 3], [1, 1, 1])
    assert t == math.inf and p == 0.0 and deg


def test_needs_two_per_group():
    with pytest.raises(ValueError):
        voxel_ttest([1.0], [1.0, 2.0])


@pytest.mark.parametrize("seed", range(5))
def test_matches_scipy_pooled_and_welch(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(0.3, 1.0, size=(7, 50))
    B = rng.normal(0.0, 2.0, size=(5, 50))
    for welch in (False, True):
        t, p, _ = ttest_columns(A, B, welch)
        ref = stats.ttest_ind(A, B, equal_var=not welch)
        assert np.allclose(t, ref.statistic, atol=1e-10)
        assert np.allclose(p, ref.pvalue, atol=1e-10)


@pytest.mark.parametrize("a, b", [(0.5, 0.5), (2.0, 3.0), (50.0, 0.5), (0.5, 400.0)])
def test_incomplete_beta_against_scipy(a, b):
    x = np.linspace(0.0, 1.0, 101)
    assert np.allclose(betainc_reg(a, b, x), betainc(a, b, x), atol=1e-12)


def test_t_tail_extremes():
    p = t_sf2(np.array([0.0, 1e200, -np.inf, 2.0]), 5)
    assert p[0] == 1.0 and p[1] == 0.0 and p[2] == 0.0
    assert p[3] == pytest.approx(2 * stats.t.sf(2.0, 5), abs=1e-13)


def _cohorts(seed, dims=GridDims(3, 3, 2, 4)):
    rng = np.random.default_rng(seed)
    make = lambda n, shift: [ScanVolume(dims, rng.normal(size=(dims.V, dims.T)) + shift)
                             for _ in range(n)]
    return make(6, 0.0), make(5, 0.0), dims


def test_build_map_and_threshold():
    a, b, dims = _cohorts(0)
    for s in a:
        s.data[:4, 1] += 10.0
    m = build_map(a, b, volume=1)
    assert m.t.shape == (dims.V,) and (m.n1, m.n0) == (6, 5)
    mask, count = threshold_map(m)
    assert mask[:4].all() and count >= 4
    full, n_all = threshold_map(m, 1.0)
    assert full.all() and n_all == dims.V
    with pytest.raises(ValueError):
        threshold_map(m, 0.0)


def test_build_map_rejects_mixed_grids():
    a, b, _ = _cohorts(1)
    other = ScanVolume(GridDims(2, 2, 2, 4), np.zeros((8, 4)))
    with pytest.raises(ValueError):
        build_map(a + [other], b, 0)


def test_statmap_file_roundtrip(tmp_path):
    a, b, dims = _cohorts(2)
    m = build_map(a, b, volume=2, alpha=0.01)
    path = tmp_path / "map.bin"
    write_statmap(m, path)
    raw = path.read_bytes()
    assert raw.startswith(b"statmap v1 3 3 2 2 6 5 0.01\n")
    back = read_statmap(path)
    assert back.dims.shape3 == dims.shape3 and back.volume == 2 and back.alpha == 0.01
    assert np.array_equal(back.t, m.t.astype(np.float32))
    assert np.array_equal(back.p, m.p.astype(np.float32))
    path.write_bytes(raw[:-1])
    with pytest.raises(ValueError):
        read_statmap(path)
