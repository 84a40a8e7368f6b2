"""Spatially constrained (modified) locally linear embedding of voxel waveforms.

Each voxel is reconstructed from its cube neighbourhood; the reconstruction
weights are assembled into a sparse alignment matrix whose bottom
eigenvectors (minus the constant one) form the embedded spatial modes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import logging
import math

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .grid import GridDims, NeighborhoodSpec, ScanVolume

log = logging.getLogger(__name__)

DEGENERATE_SUM = 1e-12
HOUSEHOLDER_TOL = 1e-12
CONSTANT_CORR = 0.99


class EmbeddingError(RuntimeError):
    """Eigensolver failure; ``residual`` holds the worst residual norm seen."""

    def __init__(self, message, residual=float("nan"), stage="embed"):
        super().__init__(message)
        self.residual = residual
        self.stage = stage


def center_neighbors(data, i, neighbors) -> np.ndarray:
    """``T x |N(i)|`` matrix whose column ``j`` is ``x_j - x_i``.

    ``data`` is a ``(V, T)`` waveform matrix or a :class:`ScanVolume`.
    """
    if isinstance(data, ScanVolume):
        data = data.data
    data = np.asarray(data, dtype=np.float64)
    return (data[np.asarray(neighbors)] - data[i]).T


def local_gram(C, xi: float = 0.0) -> np.ndarray:
    if xi < 0:
        raise ValueError(f"regulariser must be non-negative, got {xi}")
    C = np.asarray(C, dtype=np.float64)
    G = C.T @ C
    if xi:
        G = G + xi * np.eye(G.shape[0])
    return G


def _eigh_desc(G):
    evals, evecs = np.linalg.eigh(G)
    return evals[..., ::-1], evecs[..., ::-1]


def _pinv_cutoff(evals):
    K = evals.shape[-1]
    top = np.max(np.abs(evals), axis=-1, keepdims=True)
    return top * K * np.finfo(np.float64).eps


def lle_weights(G, spectrum=None) -> np.ndarray:
    """Minimum-norm solution of ``G w = 1``, rescaled to sum to one.

    Falls back to uniform weights when the raw solution sums to (almost)
    zero, which covers ``G = 0``. ``spectrum`` may pass a precomputed
    ``(evals, evecs)`` pair to avoid a second eigendecomposition.
    """
    G = np.asarray(G, dtype=np.float64)
    evals, evecs = spectrum if spectrum is not None else _eigh_desc(G)
    K = evals.shape[-1]
    keep = evals > _pinv_cutoff(evals)
    inv = np.where(keep, 1.0 / np.where(keep, evals, 1.0), 0.0)
    proj = evecs.sum(axis=0)  # Q^T 1
    raw = evecs @ (inv * proj)
    total = raw.sum()
    if abs(total) < DEGENERATE_SUM:
        return np.full(K, 1.0 / K)
    return raw / total


def _tail_ratios(evals, upto):
    """Ratios sum(smallest l) / sum(remaining) for l = 1..upto (evals descending)."""
    lam = np.clip(np.asarray(evals, dtype=np.float64), 0.0, None)
    K = lam.size
    ell = np.arange(1, upto + 1)
    num = np.cumsum(lam[::-1])[ell - 1]
    den = np.concatenate([[0.0], np.cumsum(lam)])[K - ell]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = num / den
    out[den <= 0.0] = math.inf
    out[num <= 0.0] = 0.0
    return out


def rho_hat(evals, d: int) -> float:
    """Residual-to-principal variance ratio of one local spectrum (descending)."""
    lam = np.clip(np.asarray(evals, dtype=np.float64), 0.0, None)
    den = lam[:d].sum()
    if den <= 0.0:
        return math.inf
    return float(lam[d:].sum() / den)


def _rho_batch(evals, d: int) -> np.ndarray:
    lam = np.clip(np.asarray(evals, dtype=np.float64), 0.0, None)
    den = lam[:, :d].sum(axis=1)
    num = lam[:, d:].sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = num / den
    out[den <= 0.0] = math.inf
    return out


def compute_eta(spectra, d: int) -> float:
    """The ``ceil(V/2)``-th smallest local ratio over all voxels."""
    rho = np.sort([rho_hat(ev, d) for ev in spectra])
    if rho.size == 0:
        raise ValueError("need at least one voxel spectrum")
    return float(rho[math.ceil(rho.size / 2) - 1])


def select_s(evals, d: int, eta: float) -> int:
    K = len(evals)
    if K <= d:
        return 1
    ratios = _tail_ratios(evals, K - d)
    ok = np.flatnonzero(ratios < eta)
    return int(ok[-1] + 1) if ok.size else 1


def mlle_weights(G, d: int, eta: float, base=None, spectrum=None,
                 alpha_rule: str = "norm", eig_order: str = "ascending"):
    """Multiple local weight vectors for one voxel.

    Returns ``(s, W, alpha)`` with ``W`` of shape ``(K, s)``; column ``l`` is
    ``(1 - alpha) w + V_s H[:, l]`` where ``V_s`` holds the ``s`` selected
    eigenvectors of ``G`` and ``H`` is a Householder reflection.

    ``alpha_rule="norm"`` uses ``||V_s^T 1|| / sqrt(s)``, which makes every
    column sum to one; ``"squared"`` uses the squared norm instead.
    ``eig_order="ascending"`` takes the eigenvectors of the ``s`` smallest
    eigenvalues, ``"descending"`` the ``s`` largest.
    """
    G = np.asarray(G, dtype=np.float64)
    evals, evecs = spectrum if spectrum is not None else _eigh_desc(G)
    K = evals.shape[-1]
    if base is None:
        base = lle_weights(G, (evals, evecs))
    if K <= d:
        log.debug("neighbourhood size %d <= d=%d: single weight vector", K, d)
    s = select_s(evals, d, eta)
    if eig_order == "ascending":
        Vs = evecs[:, K - s:]
    elif eig_order == "descending":
        Vs = evecs[:, :s]
    else:
        raise ValueError(f"unknown eig_order {eig_order!r}")
    proj = Vs.sum(axis=0)  # V_s^T 1_K
    norm = float(np.linalg.norm(proj))
    if alpha_rule == "norm":
        alpha = norm / math.sqrt(s)
    elif alpha_rule == "squared":
        alpha = norm**2 / math.sqrt(s)
    else:
        raise ValueError(f"unknown alpha_rule {alpha_rule!r}")
    h = alpha * np.ones(s) - proj
    hn = float(np.linalg.norm(h))
    h = h / hn if hn > HOUSEHOLDER_TOL else np.zeros(s)
    H = np.eye(s) - 2.0 * np.outer(h, h)
    W = (1.0 - alpha) * base[:, None] + Vs @ H
    return s, W, alpha


def _select_s_batch(evals, d, eta):
    n, K = evals.shape
    if K <= d:
        return np.ones(n, dtype=int)
    lam = np.clip(evals, 0.0, None)
    ell = np.arange(1, K - d + 1)
    num = np.cumsum(lam[:, ::-1], axis=1)[:, ell - 1]
    den = np.concatenate([np.zeros((n, 1)), np.cumsum(lam, axis=1)], axis=1)[:, K - ell]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = num / den
    ratios[den <= 0.0] = math.inf
    ratios[num <= 0.0] = 0.0
    ok = ratios < eta
    # ratios are non-decreasing in l, so the feasible set is a prefix
    return np.maximum(ok.sum(axis=1), 1)


def _mlle_batch(evals, evecs, base, d, eta, alpha_rule, eig_order):
    """Vectorised :func:`mlle_weights` over voxels sharing one ``K``."""
    n, K = evals.shape
    s_all = _select_s_batch(evals, d, eta)
    W_out = [None] * n
    alpha_out = np.empty(n)
    for s in np.unique(s_all):
        rows = np.flatnonzero(s_all == s)
        if eig_order == "ascending":
            Vs = evecs[rows][:, :, K - s:]
        elif eig_order == "descending":
            Vs = evecs[rows][:, :, :s]
        else:
            raise ValueError(f"unknown eig_order {eig_order!r}")
        proj = Vs.sum(axis=1)  # (m, s)
        norm = np.linalg.norm(proj, axis=1)
        if alpha_rule == "norm":
            alpha = norm / math.sqrt(s)
        elif alpha_rule == "squared":
            alpha = norm**2 / math.sqrt(s)
        else:
            raise ValueError(f"unknown alpha_rule {alpha_rule!r}")
        h = alpha[:, None] - proj
        hn = np.linalg.norm(h, axis=1)
        big = hn > HOUSEHOLDER_TOL
        h = np.where(big[:, None], h / np.where(big, hn, 1.0)[:, None], 0.0)
        H = np.eye(s) - 2.0 * h[:, :, None] * h[:, None, :]
        W = (1.0 - alpha)[:, None, None] * base[rows][:, :, None] + Vs @ H
        for m, r in enumerate(rows):
            W_out[r] = W[m]
        alpha_out[rows] = alpha
    return s_all, W_out, alpha_out


@dataclass
class SpectrumGroup:
    """Voxels sharing one neighbourhood size ``K``, stacked."""

    voxels: np.ndarray
    evals: np.ndarray = field(repr=False)  # (n, K), descending
    evecs: np.ndarray = field(repr=False)  # (n, K, K), columns match evals
    base: np.ndarray = field(repr=False)  # (n, K)


@dataclass
class LocalSpectra:
    """Per-voxel Gram eigendecompositions and base weights of one scan.

    Independent of the target dimension, so it can be reused across a
    sweep over ``d``.
    """

    neighborhoods: NeighborhoodSpec
    xi: float
    groups: list = field(repr=False)

    def _per_voxel(self, attr):
        out = [None] * len(self.neighborhoods)
        for g in self.groups:
            arr = getattr(g, attr)
            for n, i in enumerate(g.voxels):
                out[i] = arr[n]
        return out

    @property
    def evals(self) -> list:
        return self._per_voxel("evals")

    @property
    def evecs(self) -> list:
        return self._per_voxel("evecs")

    @property
    def base(self) -> list:
        return self._per_voxel("base")


def _base_batch(evals, evecs):
    K = evals.shape[1]
    keep = evals > _pinv_cutoff(evals)
    inv = np.where(keep, 1.0 / np.where(keep, evals, 1.0), 0.0)
    proj = evecs.sum(axis=1)
    raw = np.einsum("nij,nj->ni", evecs, inv * proj)
    total = raw.sum(axis=1)
    degenerate = np.abs(total) < DEGENERATE_SUM
    safe = np.where(degenerate, 1.0, total)
    return np.where(degenerate[:, None], 1.0 / K, raw / safe[:, None])


def local_spectra(scan, neighborhoods: NeighborhoodSpec, xi: float = 0.0) -> LocalSpectra:
    """Gram spectra and base weights for every voxel.

    Voxels are batched by neighbourhood size so that each batch is a single
    stacked ``eigh`` call.
    """
    if xi < 0:
        raise ValueError(f"regulariser must be non-negative, got {xi}")
    data = scan.data if isinstance(scan, ScanVolume) else np.asarray(scan, dtype=np.float64)
    sizes = neighborhoods.sizes
    groups = []
    for K in np.unique(sizes):
        idx = np.flatnonzero(sizes == K)
        nb = np.stack([neighborhoods[i] for i in idx])
        C = data[nb] - data[idx][:, None, :]  # (n, K, T)
        G = C @ C.transpose(0, 2, 1)
        if xi:
            G = G + xi * np.eye(K)
        ev, vec = _eigh_desc(G)
        groups.append(SpectrumGroup(idx, ev, vec, _base_batch(ev, vec)))
    return LocalSpectra(neighborhoods, xi, groups)


@dataclass
class WeightSet:
    """Per-voxel weight matrices ``(|N(i)|, s_i)`` plus base LLE weights."""

    neighborhoods: NeighborhoodSpec
    base: list = field(repr=False)
    multi: list = field(repr=False)
    s: np.ndarray = None
    alpha: np.ndarray = None
    eta: float = float("nan")

    @classmethod
    def from_base(cls, neighborhoods, base) -> "WeightSet":
        """Plain LLE: one weight vector per voxel."""
        base = [np.asarray(w, dtype=np.float64) for w in base]
        return cls(
            neighborhoods, base, [w[:, None] for w in base],
            s=np.ones(len(base), dtype=int), alpha=np.zeros(len(base)),
        )


def compute_weights(spectra: LocalSpectra, d: int, alpha_rule="norm",
                    eig_order="ascending", s_rule="ratio") -> WeightSet:
    """MLLE weight sets for target dimension ``d``.

    ``s_rule="widest"`` chooses ``s_i`` (and the threshold) as if ``d=1``,
    spanning the widest basis; the requested ``d`` is still used downstream.
    """
    if s_rule not in ("ratio", "widest"):
        raise ValueError(f"unknown s_rule {s_rule!r}")
    d_sel = 1 if s_rule == "widest" else d
    rho = np.concatenate([_rho_batch(g.evals, d_sel) for g in spectra.groups])
    rho.sort()
    eta = float(rho[math.ceil(rho.size / 2) - 1])
    V = len(spectra.neighborhoods)
    multi, s, alpha = [None] * V, np.empty(V, dtype=int), np.empty(V)
    forced = 0
    for g in spectra.groups:
        if g.evals.shape[1] <= d_sel:
            forced += len(g.voxels)
        gs, gW, ga = _mlle_batch(g.evals, g.evecs, g.base, d_sel, eta, alpha_rule, eig_order)
        s[g.voxels] = gs
        alpha[g.voxels] = ga
        for n, i in enumerate(g.voxels):
            multi[i] = gW[n]
    if forced:
        log.info("%d voxel(s) have |N(i)| <= d=%d; using one weight vector there",
                    forced, d_sel)
    return WeightSet(spectra.neighborhoods, spectra.base, multi, s, alpha, eta)


def alignment_matrix(weights: WeightSet, neighborhoods: NeighborhoodSpec | None = None):
    """Sparse ``sum_i What_i What_i^T`` as a CSR matrix.

    ``What_i`` has rows ``N(i)`` equal to the voxel's weight vectors, row
    ``i`` equal to ``-1`` and zeros elsewhere. Voxels with equally shaped
    weight matrices are processed as one stacked batch.
    """
    nbhd = neighborhoods if neighborhoods is not None else weights.neighborhoods
    V = len(nbhd)
    by_shape = {}
    for i in range(V):
        W = np.asarray(weights.multi[i], dtype=np.float64)
        if W.ndim == 1:
            W = W[:, None]
        if W.shape[0] != len(nbhd[i]):
            raise ValueError(f"voxel {i}: {W.shape[0]} weights for {len(nbhd[i])} neighbours")
        by_shape.setdefault(W.shape, []).append((i, W))
    offsets, inverse, indptr, indices = nbhd.pair_pattern
    vals = np.empty(offsets[-1])
    for (K, s), items in sorted(by_shape.items()):
        vox = np.array([i for i, _ in items])
        W = np.stack([w for _, w in items])
        Wh = np.concatenate([W, -np.ones((len(items), 1, s))], axis=1)
        block = Wh @ Wh.transpose(0, 2, 1)  # (n, K+1, K+1)
        pos = offsets[vox][:, None] + np.arange((K + 1) ** 2)
        vals[pos] = block.reshape(len(items), -1)
    data = np.bincount(inverse, weights=vals, minlength=indices.size)
    return sp.csr_matrix((data, indices, indptr), shape=(V, V))


def write_triplets(Phi, path) -> None:
    """Dump a sparse matrix as ``row col value`` lines, row-major, 0-based."""
    coo = sp.csr_matrix(Phi).tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", encoding="utf-8") as fh:
        for k in order:
            fh.write(f"{coo.row[k]} {coo.col[k]} {float(coo.data[k])!r}\n")


def read_triplets(path, shape) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                r, c, v = line.split()
                rows.append(int(r))
                cols.append(int(c))
                vals.append(float(v))
    return sp.coo_matrix((vals, (rows, cols)), shape=shape).tocsr()


def _fix_signs(Z):
    """Flip columns so each one's largest-magnitude entry is positive."""
    pivot = np.argmax(np.abs(Z), axis=0)
    signs = np.sign(Z[pivot, np.arange(Z.shape[1])])
    signs[signs == 0] = 1.0
    return Z * signs


def _residuals(Phi, vecs, vals):
    return np.linalg.norm(Phi @ vecs - vecs * vals, axis=0)


def bottom_eigenpairs(Phi, k: int, tol: float = 1e-8, maxiter: int | None = None,
                      seed: int = 0):
    """``k`` algebraically smallest eigenpairs of a sparse symmetric PSD matrix.

    Uses ARPACK in shift-invert mode around a small negative shift, so the
    singular alignment matrix never has to be factorised. Returns
    ``(vals, vecs)`` sorted ascending.
    """
    Phi = sp.csr_matrix(Phi)
    V = Phi.shape[0]
    if k > V:
        raise ValueError(f"cannot compute {k} eigenpairs of a {V}x{V} matrix")
    scale = max(float(abs(Phi).sum(axis=1).max()), 1.0)
    if k >= V - 1:
        # ARPACK needs k < V - 1; tiny problems are solved densely
        vals, vecs = np.linalg.eigh(Phi.toarray())
        vals, vecs = vals[:k], vecs[:, :k]
    else:
        v0 = np.random.default_rng(seed).standard_normal(V)
        sigma = -1e-3 * scale / V
        try:
            vals, vecs = eigsh(Phi, k=k, sigma=sigma, which="LM", v0=v0,
                               tol=0.0, maxiter=maxiter)
        except ArpackNoConvergence as exc:
            res = _residuals(Phi, exc.eigenvectors, exc.eigenvalues) if len(exc.eigenvalues) else [np.inf]
            raise EmbeddingError(
                f"eigensolver did not converge for {k} eigenpairs "
                f"({len(exc.eigenvalues)} converged)", float(np.max(res)),
            ) from exc
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]
    res = _residuals(Phi, vecs, vals)
    worst = float(res.max())
    if worst > tol * scale:
        raise EmbeddingError(
            f"eigenpair residual {worst:.3e} exceeds tolerance {tol:g}", worst
        )
    return vals, vecs


def embed(Phi, d: int, tol: float = 1e-8, maxiter: int | None = None, seed: int = 0):
    """Bottom ``d`` non-constant eigenvectors of the alignment matrix.

    Returns ``(Z, eigenvalues)`` where ``Z`` is ``(V, d)`` with orthonormal,
    zero-sum columns and ``eigenvalues`` are the ``d + 1`` computed values.

    When the constant vector is an exact null vector of ``Phi`` it is
    deflated from the computed subspace and the rest is re-diagonalised
    (Rayleigh-Ritz), which keeps the modes centred even when the bottom of
    the spectrum is degenerate. Otherwise the eigenvector most correlated
    with the constant vector is dropped.
    """
    Phi = sp.csr_matrix(Phi)
    V = Phi.shape[0]
    if d < 1 or d + 1 > V:
        raise ValueError(f"need 1 <= d and d + 1 <= V, got d={d}, V={V}")
    vals, vecs = bottom_eigenpairs(Phi, d + 1, tol=tol, maxiter=maxiter, seed=seed)
    vals = np.maximum(vals, 0.0) if vals.min() > -1e-10 else vals
    ones = np.full(V, 1.0 / math.sqrt(V))
    scale = max(float(abs(Phi).sum(axis=1).max()), 1.0)
    null_res = float(np.linalg.norm(Phi @ ones))
    coverage = float(np.linalg.norm(vecs.T @ ones))
    if null_res <= tol * scale and coverage > CONSTANT_CORR:
        B = vecs - np.outer(ones, ones @ vecs)
        U, _, _ = np.linalg.svd(B, full_matrices=False)
        B = U[:, :d]
        B = B - np.outer(ones, ones @ B)
        B, _ = np.linalg.qr(B)
        ritz, rot = np.linalg.eigh(B.T @ (Phi @ B))
        Z = B @ rot
        vals = np.concatenate([[0.0], np.maximum(ritz, 0.0) if ritz.min() > -1e-10 else ritz])
    else:
        corr = np.abs(vecs.T @ ones)
        drop = 0
        if corr[0] <= CONSTANT_CORR:
            drop = int(np.argmax(corr))
            log.warning("smallest eigenvector is not constant (corr %.3f); "
                        "dropping eigenvector %d (corr %.3f)", corr[0], drop, corr[drop])
        keep = [j for j in range(d + 1) if j != drop]
        Z = vecs[:, keep]
    Z = Z / np.linalg.norm(Z, axis=0)
    return _fix_signs(Z), vals


@dataclass
class EmbeddedScan:
    """``d`` spatial modes of one subject, stored as a ``(V, d)`` matrix."""

    dims: GridDims
    modes: np.ndarray = field(repr=False)
    subject_id: str = ""
    label: int | None = None
    eigenvalues: np.ndarray | None = field(default=None, repr=False)
    provenance: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.modes.shape[1]

    def to_array4d(self) -> np.ndarray:
        g = self.dims
        return self.modes.reshape(g.L, g.W, g.H, self.d, order="F")

    def as_scan(self) -> ScanVolume:
        return ScanVolume(self.dims.with_T(self.d), self.modes, self.subject_id, self.label)


@dataclass
class LleOptions:
    xi: float = 0.0
    alpha_rule: str = "norm"
    eig_order: str = "ascending"
    s_rule: str = "ratio"
    tol: float = 1e-8
    maxiter: int | None = None
    seed: int = 0


def reconstruct_scan(scan: ScanVolume, r: int, d: int, xi: float = 0.0,
                     options: LleOptions | None = None,
                     neighborhoods: NeighborhoodSpec | None = None,
                     spectra: LocalSpectra | None = None) -> EmbeddedScan:
    """Full chain: neighbourhoods, local Grams, MLLE weights, alignment, embed.

    ``neighborhoods`` and ``spectra`` may be passed in to reuse work across
    calls with different ``d``.
    """
    opts = options or LleOptions(xi=xi)
    if not 1 <= d <= scan.dims.T:
        raise ValueError(f"d must lie in [1, T={scan.dims.T}], got {d}")
    nbhd = neighborhoods or NeighborhoodSpec.build(scan.dims, r)
    if spectra is None:
        spectra = local_spectra(scan, nbhd, opts.xi)
    weights = compute_weights(spectra, d, opts.alpha_rule, opts.eig_order, opts.s_rule)
    Phi = alignment_matrix(weights, nbhd)
    try:
        Z, vals = embed(Phi, d, tol=opts.tol, maxiter=opts.maxiter, seed=opts.seed)
    except EmbeddingError as exc:
        raise EmbeddingError(
            f"subject {scan.subject_id or '?'}: {exc}", exc.residual, stage="embed"
        ) from exc
    prov = {"method": "lle", "r": r, "d": d, "xi": opts.xi, "tol": opts.tol,
            "eta": weights.eta, "alpha_rule": opts.alpha_rule,
            "eig_order": opts.eig_order, "s_rule": opts.s_rule}
    return EmbeddedScan(scan.dims.with_T(d), Z, scan.subject_id, scan.label, vals, prov)
