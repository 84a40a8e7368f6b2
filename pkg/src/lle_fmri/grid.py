"""Voxel grid, linear indexing and cube neighbourhoods.

Voxels are ordered x-fastest: ``index = x + L * (y + W * z)``.
Scan samples are held as a ``(V, T)`` array, one row per voxel waveform.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
import itertools

import numpy as np


class GridError(ValueError):
    """Raised for out-of-range coordinates or malformed grids."""


class ScanValidationError(ValueError):
    """Raised when a scan holds non-finite samples or has the wrong size."""

    def __init__(self, message, coord=None):
        super().__init__(message)
        self.coord = coord


@dataclass(frozen=True)
class GridDims:
    L: int
    W: int
    H: int
    T: int = 1

    def __post_init__(self):
        for name in ("L", "W", "H", "T"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise GridError(f"{name} must be a positive integer, got {value!r}")

    @property
    def V(self) -> int:
        return self.L * self.W * self.H

    @property
    def shape3(self) -> tuple[int, int, int]:
        return (self.L, self.W, self.H)

    def with_T(self, T: int) -> "GridDims":
        return GridDims(self.L, self.W, self.H, T)


def linear_index(coord, dims: GridDims) -> int:
    x, y, z = (int(c) for c in coord)
    if not (0 <= x < dims.L and 0 <= y < dims.W and 0 <= z < dims.H):
        raise GridError(f"coordinate {(x, y, z)} outside grid {dims.shape3}")
    return x + dims.L * (y + dims.W * z)


def inverse_index(index: int, dims: GridDims) -> tuple[int, int, int]:
    index = int(index)
    if not 0 <= index < dims.V:
        raise GridError(f"voxel index {index} outside [0, {dims.V})")
    x = index % dims.L
    y = (index // dims.L) % dims.W
    z = index // (dims.L * dims.W)
    return x, y, z


def voxel_coords(dims: GridDims) -> np.ndarray:
    """``(V, 3)`` integer coordinates of every voxel in index order."""
    idx = np.arange(dims.V)
    return np.column_stack(
        [idx % dims.L, (idx // dims.L) % dims.W, idx // (dims.L * dims.W)]
    )


def interior_count(r: int) -> int:
    return (1 + 2 * r) ** 3 - 1


def cube_neighborhood(i: int, r: int, dims: GridDims) -> np.ndarray:
    """Indices ``j != i`` within Chebyshev distance ``r`` of voxel ``i``.

    The cube is clipped at the grid faces; the result is sorted ascending.
    """
    if r < 1:
        raise GridError(f"radius must be >= 1, got {r}")
    x, y, z = inverse_index(i, dims)
    xs = range(max(0, x - r), min(dims.L, x + r + 1))
    ys = range(max(0, y - r), min(dims.W, y + r + 1))
    zs = range(max(0, z - r), min(dims.H, z + r + 1))
    out = [
        a + dims.L * (b + dims.W * c)
        for c, b, a in itertools.product(zs, ys, xs)
    ]
    out.remove(i)
    return np.asarray(out, dtype=np.intp)


@dataclass(frozen=True)
class NeighborhoodSpec:
    """Cube-minus-centre neighbourhoods of radius ``r`` for every voxel."""

    dims: GridDims
    r: int
    neighbors: tuple = field(repr=False)

    @classmethod
    def build(cls, dims: GridDims, r: int) -> "NeighborhoodSpec":
        if r < 1:
            raise GridError(f"radius must be >= 1, got {r}")
        coords = voxel_coords(dims)
        offsets = np.array(
            [o for o in itertools.product(range(-r, r + 1), repeat=3) if any(o)]
        )
        # (V, n_offsets, 3) candidate coordinates; invalid ones masked out
        cand = coords[:, None, :] + offsets[None, :, :]
        upper = np.array(dims.shape3)
        valid = np.all((cand >= 0) & (cand < upper), axis=2)
        flat = cand[..., 0] + dims.L * (cand[..., 1] + dims.W * cand[..., 2])
        neighbors = []
        for v in range(dims.V):
            nb = np.sort(flat[v, valid[v]])
            nb.flags.writeable = False
            neighbors.append(nb)
        return cls(dims=dims, r=r, neighbors=tuple(neighbors))

    def __getitem__(self, i: int) -> np.ndarray:
        return self.neighbors[i]

    def __len__(self) -> int:
        return len(self.neighbors)

    @cached_property
    def sizes(self) -> np.ndarray:
        return np.array([len(nb) for nb in self.neighbors])

    @cached_property
    def pair_pattern(self):
        """CSR layout of all ``(j, k)`` pairs inside each closed neighbourhood.

        Closed means ``N(i)`` followed by ``i`` itself. Returns
        ``(offsets, inverse, indptr, indices)``: voxel ``i`` owns entries
        ``offsets[i]:offsets[i+1]`` of the row-major ``(K_i+1)^2`` pair list,
        and ``inverse`` maps every pair to its slot in the CSR structure.
        """
        V = len(self.neighbors)
        closed = [np.append(nb, i) for i, nb in enumerate(self.neighbors)]
        rows = np.concatenate([np.repeat(c, c.size) for c in closed])
        cols = np.concatenate([np.tile(c, c.size) for c in closed])
        sizes = np.array([c.size ** 2 for c in closed])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        keys = rows.astype(np.int64) * V + cols
        uniq, inverse = np.unique(keys, return_inverse=True)
        indptr = np.concatenate([[0], np.cumsum(np.bincount(uniq // V, minlength=V))])
        return offsets, inverse, indptr, (uniq % V).astype(np.int32)

    @property
    def K(self) -> int:
        """Neighbourhood size of an interior voxel."""
        return interior_count(self.r)


@dataclass(frozen=True)
class ScanVolume:
    """One subject's 4D scan, stored as a ``(V, T)`` waveform matrix."""

    dims: GridDims
    data: np.ndarray = field(repr=False)
    subject_id: str = ""
    label: int | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.shape != (self.dims.V, self.dims.T):
            raise ScanValidationError(
                f"expected samples of shape {(self.dims.V, self.dims.T)}, got {data.shape}"
            )
        if self.label is not None and self.label not in (0, 1):
            raise ScanValidationError(f"label must be 0, 1 or None, got {self.label!r}")
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array4d(cls, array, subject_id="", label=None) -> "ScanVolume":
        """Build from an ``(L, W, H, T)`` array indexed ``[x, y, z, t]``."""
        array = np.asarray(array, dtype=np.float64)
        if array.ndim == 3:
            array = array[..., None]
        if array.ndim != 4:
            raise ScanValidationError(f"expected a 4D array, got shape {array.shape}")
        L, W, H, T = array.shape
        # x-fastest flattening is Fortran order over the spatial axes
        data = array.reshape(L * W * H, T, order="F")
        return cls(GridDims(L, W, H, T), data, subject_id, label)

    def to_array4d(self) -> np.ndarray:
        d = self.dims
        return self.data.reshape(d.L, d.W, d.H, d.T, order="F")

    def waveform(self, i: int) -> np.ndarray:
        return self.data[i]


@dataclass
class ValidationResult:
    ok: bool
    constant_voxels: list = field(default_factory=list)

    @property
    def warnings(self) -> list:
        return [f"voxel {v} has a constant waveform" for v in self.constant_voxels]


def validate_scan(scan: ScanVolume) -> ValidationResult:
    """Check sample count and finiteness; list zero-variance voxels.

    Raises :class:`ScanValidationError` naming the ``(x, y, z, t)`` of the
    first non-finite sample.
    """
    dims = scan.dims
    if scan.data.shape != (dims.V, dims.T):
        raise ScanValidationError(
            f"sample count {scan.data.size} != V*T = {dims.V * dims.T}"
        )
    bad = ~np.isfinite(scan.data)
    if bad.any():
        v, t = np.argwhere(bad)[0]
        coord = (*inverse_index(v, dims), int(t))
        raise ScanValidationError(
            f"non-finite sample {scan.data[v, t]} at (x, y, z, t) = {coord}", coord
        )
    constant = np.flatnonzero(np.ptp(scan.data, axis=1) == 0)
    return ValidationResult(ok=True, constant_voxels=[int(v) for v in constant])
