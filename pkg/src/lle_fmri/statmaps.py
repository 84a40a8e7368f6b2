"""Voxelwise two-sample t-tests on selected volumes, thresholding and export."""
from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .grid import GridDims

MAX_CF_ITER = 500
CF_EPS = 1e-16
TINY = 1e-300


def _betacf(a, b, x):
    """Continued fraction for the incomplete beta (modified Lentz), vectorised in x."""
    x = np.asarray(x, dtype=np.float64)
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = np.ones_like(x)
    d = 1.0 - qab * x / qap
    d = np.where(np.abs(d) < TINY, TINY, d)
    d = 1.0 / d
    h = d.copy()
    active = np.ones(x.shape, dtype=bool)
    for m in range(1, MAX_CF_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = np.where(np.abs(d) < TINY, TINY, d)
        c = 1.0 + aa / c
        c = np.where(np.abs(c) < TINY, TINY, c)
        d = 1.0 / d
        h = np.where(active, h * d * c, h)
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = np.where(np.abs(d) < TINY, TINY, d)
        c = 1.0 + aa / c
        c = np.where(np.abs(c) < TINY, TINY, c)
        d = 1.0 / d
        delta = d * c
        h = np.where(active, h * delta, h)
        active &= np.abs(delta - 1.0) > CF_EPS
        if not active.any():
            break
    return h


def betainc_reg(a: float, b: float, x, xc=None) -> np.ndarray:
    """Regularised incomplete beta ``I_x(a, b)`` for scalar ``a, b > 0``.

    ``xc`` optionally supplies ``1 - x`` computed without cancellation.
    """
    x = np.asarray(x, dtype=np.float64)
    xc = 1.0 - x if xc is None else np.asarray(xc, dtype=np.float64)
    out = np.empty_like(x)
    lo = x <= 0.0
    hi = xc <= 0.0
    mid = ~(lo | hi)
    out[lo] = 0.0
    out[hi] = 1.0
    if mid.any():
        xm, xcm = x[mid], xc[mid]
        lbeta = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        front = np.exp(lbeta + a * np.log(xm) + b * np.log(xcm))
        direct = xm < (a + 1.0) / (a + b + 2.0)
        res = np.empty_like(xm)
        if direct.any():
            res[direct] = front[direct] * _betacf(a, b, xm[direct]) / a
        if (~direct).any():
            res[~direct] = 1.0 - front[~direct] * _betacf(b, a, xcm[~direct]) / b
        out[mid] = res
    return out


def t_sf2(t, df) -> np.ndarray:
    """Two-sided tail probability ``P(|T| >= |t|)`` of Student's t."""
    t = np.asarray(t, dtype=np.float64)
    df = float(df) if np.ndim(df) == 0 else np.asarray(df, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        t2 = t * t
        x = df / (df + t2)
        xc = t2 / (df + t2)
    x = np.where(np.isinf(t2), 0.0, x)
    xc = np.where(np.isinf(t2), 1.0, xc)
    if np.ndim(df) == 0:
        return betainc_reg(0.5 * df, 0.5, x, xc)
    out = np.empty_like(x)
    for value in np.unique(df):
        sel = df == value
        out[sel] = betainc_reg(0.5 * value, 0.5, x[sel], xc[sel])
    return out


def ttest_columns(A, B, welch: bool = False):
    """Two-sample t-test on every column of ``A`` (n1 x V) against ``B`` (n0 x V).

    Returns ``(t, p, degenerate)``. Columns with zero variance in both groups
    get ``t=0, p=1`` when the means agree and ``t=+-inf, p=0`` (flagged
    degenerate) otherwise.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    n1, n0 = A.shape[0], B.shape[0]
    if n1 < 2 or n0 < 2:
        raise ValueError(f"each group needs >= 2 subjects, got {n1} and {n0}")
    if A.shape[1:] != B.shape[1:]:
        raise ValueError(f"group shapes differ: {A.shape} vs {B.shape}")
    m1, m0 = A.mean(axis=0), B.mean(axis=0)
    v1, v0 = A.var(axis=0, ddof=1), B.var(axis=0, ddof=1)
    diff = m1 - m0
    if welch:
        se2 = v1 / n1 + v0 / n0
        with np.errstate(divide="ignore", invalid="ignore"):
            df = se2**2 / ((v1 / n1) ** 2 / (n1 - 1) + (v0 / n0) ** 2 / (n0 - 1))
        df = np.where(np.isfinite(df), df, n1 + n0 - 2.0)
    else:
        pooled = ((n1 - 1) * v1 + (n0 - 1) * v0) / (n1 + n0 - 2)
        se2 = pooled * (1.0 / n1 + 1.0 / n0)
        df = np.full(diff.shape, n1 + n0 - 2.0)
    scale = np.maximum(np.abs(A).max(axis=0), np.abs(B).max(axis=0))
    flat = se2 <= (1e-14 * scale) ** 2
    same = flat & (np.abs(diff) <= 1e-14 * scale)
    degenerate = flat & ~same
    with np.errstate(divide="ignore", invalid="ignore"):
        t = diff / np.sqrt(se2)
    t = np.where(same, 0.0, t)
    t = np.where(degenerate, np.copysign(np.inf, diff), t)
    p = t_sf2(t, df if welch else n1 + n0 - 2.0)
    p = np.where(same, 1.0, np.where(degenerate, 0.0, p))
    return t, np.clip(p, 0.0, 1.0), degenerate


def voxel_ttest(group_a, group_b, welch: bool = False):
    """Pooled-variance (or Welch) two-sample t-test for one voxel.

    Returns ``(t, p, degenerate)`` with ``t`` signed as mean(a) - mean(b).
    """
    a = np.asarray(group_a, dtype=np.float64).reshape(-1, 1)
    b = np.asarray(group_b, dtype=np.float64).reshape(-1, 1)
    t, p, deg = ttest_columns(a, b, welch)
    return float(t[0]), float(p[0]), bool(deg[0])


@dataclass
class StatMap:
    dims: GridDims
    t: np.ndarray = field(repr=False)
    p: np.ndarray = field(repr=False)
    volume: int = 0
    n1: int = 0
    n0: int = 0
    alpha: float = 0.05
    degenerate: np.ndarray | None = field(default=None, repr=False)


def _volume_values(scans, volume):
    rows = []
    for s in scans:
        data = getattr(s, "modes", None)
        if data is None:
            data = s.data
        rows.append(np.asarray(data)[:, volume])
    return np.stack(rows)


def build_map(cohort_a, cohort_b, volume: int, alpha: float = 0.05,
              welch: bool = False) -> StatMap:
    """Voxelwise test of patients (``cohort_a``) against controls (``cohort_b``)."""
    cohort_a, cohort_b = list(cohort_a), list(cohort_b)
    dims = cohort_a[0].dims
    for s in cohort_a + cohort_b:
        if s.dims.shape3 != dims.shape3:
            raise ValueError(f"grid {s.dims.shape3} does not match {dims.shape3}")
    t, p, deg = ttest_columns(_volume_values(cohort_a, volume),
                              _volume_values(cohort_b, volume), welch)
    return StatMap(dims, t, p, int(volume), len(cohort_a), len(cohort_b), alpha, deg)


def threshold_map(statmap: StatMap, alpha: float | None = None):
    """Mask of voxels with ``p < alpha`` and its size.

    ``alpha = 1`` keeps every voxel, including those with ``p = 1``.
    """
    alpha = statmap.alpha if alpha is None else alpha
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    mask = statmap.p < alpha if alpha < 1.0 else np.ones(statmap.p.shape, dtype=bool)
    return mask, int(mask.sum())


def write_statmap(statmap: StatMap, path) -> None:
    d = statmap.dims
    header = (f"statmap v1 {d.L} {d.W} {d.H} {statmap.volume} "
              f"{statmap.n1} {statmap.n0} {statmap.alpha!r}\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.asarray(statmap.t, dtype="<f4").tobytes())
        fh.write(np.asarray(statmap.p, dtype="<f4").tobytes())


def read_statmap(path) -> StatMap:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    parts = raw[:nl].decode("ascii").split() if nl >= 0 else []
    if len(parts) != 9 or parts[:2] != ["statmap", "v1"]:
        raise ValueError(f"{path}: not a statmap v1 file")
    L, W, H, vol, n1, n0 = (int(v) for v in parts[2:8])
    dims = GridDims(L, W, H, 1)
    payload = raw[nl + 1:]
    if len(payload) != 8 * dims.V:
        raise ValueError(f"{path}: expected {8 * dims.V} payload bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return StatMap(dims, arr[:dims.V], arr[dims.V:], vol, n1, n0, float(parts[8]))
