"""Sparse voxel tensors, coordinate indices, and convolution rulebooks.

A SparseTensor stores the active voxel coordinates of a 3D grid together with
one feature row per voxel. Coordinates are kept in canonical lexicographic
(x, y, z) order so that any two construction paths over the same coordinate
set produce bit-identical tensors.

A Rulebook enumerates, per kernel offset, the (input_row, output_row) pairs a
convolution must accumulate. Submanifold rulebooks preserve the active set;
strided rulebooks emit every output site reachable under the kernel window
with output grid dims ceil(n/s).
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil, prod

import numpy as np

from .errors import (
    DuplicateCoordError,
    GridTooLargeError,
    InvalidKernelError,
    ShapeMismatchError,
)

DENSE_CELL_BUDGET = 64**3


def linearize(coords: np.ndarray, grid_dims: tuple[int, int, int]) -> np.ndarray:
    """Map (N, 3) in-bounds coords to scalar ids, monotone with lex order."""
    nx, ny, nz = grid_dims
    return (coords[:, 0] * ny + coords[:, 1]) * nz + coords[:, 2]


class CoordIndex:
    """Exact-membership lookup from voxel coordinate to tensor row."""

    def __init__(self, coords: np.ndarray, grid_dims: tuple[int, int, int]):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        ids = linearize(coords, grid_dims)
        order = np.argsort(ids, kind="stable")
        sorted_ids = ids[order]
        if np.any(sorted_ids[1:] == sorted_ids[:-1]):
            dup = coords[order[np.flatnonzero(sorted_ids[1:] == sorted_ids[:-1])[0]]]
            raise DuplicateCoordError(f"coordinate {tuple(dup)} appears more than once")
        self.grid_dims = grid_dims
        self._sorted_ids = sorted_ids
        self._rows = order

    def __len__(self) -> int:
        return len(self._sorted_ids)

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Row per query coordinate, -1 where absent or out of bounds."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        dims = np.asarray(self.grid_dims, dtype=np.int64)
        in_bounds = np.all((coords >= 0) & (coords < dims), axis=1)
        rows = np.full(coords.shape[0], -1, dtype=np.int64)
        if not in_bounds.any() or len(self._sorted_ids) == 0:
            return rows
        ids = linearize(coords[in_bounds], self.grid_dims)
        pos = np.searchsorted(self._sorted_ids, ids)
        pos = np.minimum(pos, len(self._sorted_ids) - 1)
        hit = self._sorted_ids[pos] == ids
        found = np.full(ids.shape[0], -1, dtype=np.int64)
        found[hit] = self._rows[pos[hit]]
        rows[in_bounds] = found
        return rows


def build_index(coords: np.ndarray, grid_dims: tuple[int, int, int]) -> CoordIndex:
    """Build an exact-membership index; duplicate coordinates are an error."""
    return CoordIndex(coords, grid_dims)


@dataclass
class SparseTensor:
    """Active coordinates plus per-voxel features over a fixed grid."""

    grid_dims: tuple[int, int, int]
    coords: np.ndarray  # (N, 3) int64, canonical lexicographic order
    features: np.ndarray  # (N, C) float64

    def __post_init__(self) -> None:
        self.grid_dims = tuple(int(d) for d in self.grid_dims)
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != self.coords.shape[0]:
            raise ShapeMismatchError(
                f"features {self.features.shape} do not match {self.coords.shape[0]} coords"
            )
        dims = np.asarray(self.grid_dims, dtype=np.int64)
        if self.coords.size and not np.all((self.coords >= 0) & (self.coords < dims)):
            bad = self.coords[~np.all((self.coords >= 0) & (self.coords < dims), axis=1)][0]
            raise ShapeMismatchError(f"coordinate {tuple(bad)} outside grid {self.grid_dims}")

    @property
    def num_active(self) -> int:
        return self.coords.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @classmethod
    def create(
        cls,
        grid_dims: tuple[int, int, int],
        coords: np.ndarray,
        features: np.ndarray,
    ) -> "SparseTensor":
        """Canonicalize row order and reject duplicate coordinates."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != coords.shape[0]:
            raise ShapeMismatchError(
                f"features {features.shape} do not match {coords.shape[0]} coords"
            )
        ids = linearize(coords, tuple(int(d) for d in grid_dims))
        order = np.argsort(ids, kind="stable")
        sorted_ids = ids[order]
        if np.any(sorted_ids[1:] == sorted_ids[:-1]):
            dup = coords[order[np.flatnonzero(sorted_ids[1:] == sorted_ids[:-1])[0]]]
            raise DuplicateCoordError(f"coordinate {tuple(dup)} appears more than once")
        return cls(tuple(int(d) for d in grid_dims), coords[order], features[order])

    @classmethod
    def empty(cls, grid_dims: tuple[int, int, int], channels: int) -> "SparseTensor":
        return cls(grid_dims, np.zeros((0, 3), dtype=np.int64), np.zeros((0, channels)))

    def index(self) -> CoordIndex:
        return CoordIndex(self.coords, self.grid_dims)

    def with_features(self, features: np.ndarray) -> "SparseTensor":
        """Same coordinates, new feature matrix (row count must match)."""
        return SparseTensor(self.grid_dims, self.coords, features)

    def to_json_dict(self) -> dict:
        return {
            "grid_dims": list(self.grid_dims),
            "channels": self.channels,
            "coords": self.coords.tolist(),
            "features": self.features.tolist(),
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "SparseTensor":
        coords = np.asarray(payload["coords"], dtype=np.int64).reshape(-1, 3)
        features = np.asarray(payload["features"], dtype=np.float64)
        if features.size == 0:
            features = features.reshape(0, int(payload["channels"]))
        return cls.create(tuple(payload["grid_dims"]), coords, features)


def to_dense(tensor: SparseTensor, max_cells: int = DENSE_CELL_BUDGET) -> np.ndarray:
    """Materialize as a (nx, ny, nz, C) array; guarded by a cell budget."""
    cells = prod(tensor.grid_dims)
    if cells > max_cells:
        raise GridTooLargeError(f"{tensor.grid_dims} has {cells} cells > budget {max_cells}")
    dense = np.zeros((*tensor.grid_dims, tensor.channels), dtype=np.float64)
    if tensor.num_active:
        dense[tensor.coords[:, 0], tensor.coords[:, 1], tensor.coords[:, 2]] = tensor.features
    return dense


def from_dense(
    dense: np.ndarray, max_cells: int = DENSE_CELL_BUDGET
) -> SparseTensor:
    """Inverse of to_dense: active set = cells with any nonzero channel."""
    if dense.ndim != 4:
        raise ShapeMismatchError(f"expected (nx, ny, nz, C) array, got {dense.shape}")
    cells = prod(dense.shape[:3])
    if cells > max_cells:
        raise GridTooLargeError(f"{dense.shape[:3]} has {cells} cells > budget {max_cells}")
    mask = np.any(dense != 0.0, axis=3)
    coords = np.argwhere(mask).astype(np.int64)
    features = dense[mask]
    return SparseTensor.create(dense.shape[:3], coords, features)


def height_compress(
    tensor: SparseTensor, max_cells: int = 1 << 22
) -> np.ndarray:
    """Collapse z into channels: dense (nx, ny, nz*C) BEV map.

    z-slice iz of channel ch lands at BEV channel iz*C + ch, so the z axis is
    densified and slices are concatenated in increasing z.
    """
    nx, ny, nz = tensor.grid_dims
    c = tensor.channels
    if nx * ny * nz * max(c, 1) > max_cells:
        raise GridTooLargeError(
            f"BEV map {nx}x{ny}x{nz * c} exceeds cell budget {max_cells}"
        )
    bev = np.zeros((nx, ny, nz * c), dtype=np.float64)
    if tensor.num_active:
        ch = tensor.coords[:, 2, None] * c + np.arange(c)[None, :]
        bev[tensor.coords[:, 0, None], tensor.coords[:, 1, None], ch] = tensor.features
    return bev


_KERNEL_MODES = ("submanifold", "strided")


def kernel_offsets(k: int, dilation: int = 1) -> np.ndarray:
    """Lexicographically ordered (k^3, 3) offsets, scaled by dilation."""
    r = (k - 1) // 2
    axis = np.arange(-r, r + 1)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)
    return grid.reshape(-1, 3) * dilation


@dataclass
class Rulebook:
    """Gather/scatter plan for one sparse convolution."""

    mode: str
    kernel_size: int
    dilation: int
    stride: int
    offsets: np.ndarray  # (K, 3) including dilation
    pairs: list[tuple[np.ndarray, np.ndarray]]  # per offset: (in_rows, out_rows)
    num_in: int
    out_coords: np.ndarray
    out_grid_dims: tuple[int, int, int]

    @property
    def num_out(self) -> int:
        return self.out_coords.shape[0]

    @property
    def pair_count(self) -> int:
        return int(sum(len(in_rows) for in_rows, _ in self.pairs))


def _validate_kernel(k: int, dilation: int, stride: int, mode: str) -> None:
    if mode not in _KERNEL_MODES:
        raise InvalidKernelError(f"unknown mode {mode!r}")
    if k < 1 or k % 2 == 0:
        raise InvalidKernelError(f"kernel size must be odd and >= 1, got {k}")
    if dilation < 1 or stride < 1:
        raise InvalidKernelError(f"dilation/stride must be >= 1, got d={dilation} s={stride}")
    if mode == "submanifold" and stride != 1:
        raise InvalidKernelError("submanifold convolutions require stride 1")


def build_rulebook(
    tensor: SparseTensor,
    kernel_size: int,
    dilation: int = 1,
    stride: int = 1,
    mode: str = "submanifold",
) -> Rulebook:
    """Enumerate convolution pairs for the tensor's active set.

    Submanifold: output coords equal input coords; a pair (i -> o, delta)
    exists iff coord(i) = coord(o) + dilation*delta is active.

    Strided: output lives on the ceil(n/s) grid; a pair exists iff
    coord(i) = s*coord(o) + dilation*delta is active and coord(o) in bounds.
    Output sites are exactly those receiving at least one pair.
    """
    _validate_kernel(kernel_size, dilation, stride, mode)
    offsets = kernel_offsets(kernel_size, dilation)
    coords = tensor.coords
    index = tensor.index()
    n = tensor.num_active

    if mode == "submanifold":
        out_coords = coords
        out_dims = tensor.grid_dims
    else:
        out_dims = tuple(ceil(d / stride) for d in tensor.grid_dims)
        if n == 0:
            out_coords = np.zeros((0, 3), dtype=np.int64)
        else:
            candidates = coords[None, :, :] - offsets[:, None, :]  # (K, N, 3)
            candidates = candidates.reshape(-1, 3)
            divisible = np.all(candidates % stride == 0, axis=1)
            sites = candidates[divisible] // stride
            dims = np.asarray(out_dims, dtype=np.int64)
            in_bounds = np.all((sites >= 0) & (sites < dims), axis=1)
            sites = sites[in_bounds]
            if sites.shape[0]:
                ids = np.unique(linearize(sites, out_dims))
                nxo, nyo, nzo = out_dims
                out_coords = np.stack(
                    [ids // (nyo * nzo), (ids // nzo) % nyo, ids % nzo], axis=1
                ).astype(np.int64)
            else:
                out_coords = np.zeros((0, 3), dtype=np.int64)

    pairs: list[tuple[np.ndarray, np.ndarray]] = []
    m = out_coords.shape[0]
    base = out_coords if mode == "submanifold" else out_coords * stride
    for delta in offsets:
        if m == 0:
            empty = np.zeros(0, dtype=np.int64)
            pairs.append((empty, empty))
            continue
        rows = index.lookup(base + delta)
        valid = rows >= 0
        pairs.append((rows[valid], np.flatnonzero(valid).astype(np.int64)))
    return Rulebook(
        mode=mode,
        kernel_size=kernel_size,
        dilation=dilation,
        stride=stride,
        offsets=offsets,
        pairs=pairs,
        num_in=n,
        out_coords=out_coords,
        out_grid_dims=out_dims,
    )
