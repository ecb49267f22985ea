"""Coordinate-indexed sparse voxel tensors.

A :class:`SparseTensor` stores one feature row per active integer (x,y,z)
coordinate on a bounded lattice. Coordinates are kept in canonical order
(sorted by linearised index) so that identical voxel sets always produce
identical row order regardless of how the inputs were permuted; every
downstream reduction then has a fixed summation order.

Feature rows live in an autodiff :class:`~semscene.autodiff.Tensor`, so
gradients flow through sparse operations; coordinates themselves are
non-differentiable structure.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor

__all__ = ["SparseTensor", "sparse_from_points"]


def linearize(coords: np.ndarray, lattice_shape) -> np.ndarray:
    """Map (N,3) integer coords to scalar indices, x-major then y then z."""
    _, w, h = lattice_shape
    return (coords[:, 0] * w + coords[:, 1]) * h + coords[:, 2]


class SparseTensor:
    """Feature rows over unique, in-bounds voxel coordinates.

    ``pair_cache`` memoises kernel-offset pair lists keyed by
    (kernel, mode); operations that preserve the coordinate set propagate
    the same cache object so convolutions at one level compute their
    gathers once.
    """

    __slots__ = ("coords", "features", "lattice_shape", "linear", "pair_cache")

    def __init__(self, coords: np.ndarray, features: Tensor, lattice_shape,
                 _linear=None, _pair_cache=None):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        lattice_shape = tuple(int(s) for s in lattice_shape)
        if len(lattice_shape) != 3 or any(s <= 0 for s in lattice_shape):
            raise ValueError(f"bad lattice shape {lattice_shape}")
        if features.data.ndim != 2 or features.data.shape[0] != coords.shape[0]:
            raise ValueError(
                f"feature rows {features.data.shape} do not match "
                f"{coords.shape[0]} coordinates")
        if coords.size:
            if coords.min() < 0 or np.any(coords >= np.array(lattice_shape)):
                bad = coords[(coords < 0).any(axis=1)
                             | (coords >= np.array(lattice_shape)).any(axis=1)][0]
                raise ValueError(f"coordinate {tuple(bad)} outside lattice "
                                 f"{lattice_shape}")
        self.coords = coords
        self.features = features
        self.lattice_shape = lattice_shape
        if _linear is None:
            _linear = linearize(coords, lattice_shape)
            if _linear.size and np.any(np.diff(_linear) <= 0):
                raise ValueError("coordinates not in canonical sorted order")
        self.linear = _linear
        self.pair_cache = {} if _pair_cache is None else _pair_cache

    @property
    def n_active(self) -> int:
        return self.coords.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.data.shape[1]

    def row_of(self, coord) -> int:
        """Exact lookup: row index of a coordinate, or -1 if inactive."""
        key = linearize(np.asarray([coord], dtype=np.int64), self.lattice_shape)
        pos = np.searchsorted(self.linear, key[0])
        if pos < self.linear.size and self.linear[pos] == key[0]:
            return int(pos)
        return -1

    def rows_of(self, coords: np.ndarray) -> np.ndarray:
        """Vectorised lookup; -1 marks coords not present or out of bounds."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        inside = np.all((coords >= 0) & (coords < np.array(self.lattice_shape)),
                        axis=1)
        out = np.full(coords.shape[0], -1, dtype=np.int64)
        if not inside.any() or self.linear.size == 0:
            return out
        keys = linearize(coords[inside], self.lattice_shape)
        pos = np.minimum(np.searchsorted(self.linear, keys), self.linear.size - 1)
        out[inside] = np.where(self.linear[pos] == keys, pos, -1)
        return out

    def with_features(self, features: Tensor) -> "SparseTensor":
        """Same coordinate set, new feature rows; shares the pair cache."""
        return SparseTensor(self.coords, features, self.lattice_shape,
                            _linear=self.linear, _pair_cache=self.pair_cache)

    def to_dense(self) -> np.ndarray:
        """Dense (C, L, W, H) array: stored rows at their coords, 0 elsewhere."""
        l, w, h = self.lattice_shape
        dense = np.zeros((self.feature_dim, l, w, h))
        if self.n_active:
            dense[:, self.coords[:, 0], self.coords[:, 1], self.coords[:, 2]] = \
                self.features.data.T
        return dense


def sparse_from_points(coords, features, lattice_shape,
                       requires_grad: bool = False) -> SparseTensor:
    """Build a canonical SparseTensor from unsorted unique coordinates.

    Raises on duplicate or out-of-bounds coordinates.
    """
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats.reshape(-1, 1)
    lattice_shape = tuple(int(s) for s in lattice_shape)
    if coords.size:
        if coords.min() < 0 or np.any(coords >= np.array(lattice_shape)):
            bad = coords[((coords < 0) | (coords >= np.array(lattice_shape))).any(axis=1)][0]
            raise ValueError(f"coordinate {tuple(bad)} outside lattice {lattice_shape}")
    lin = linearize(coords, lattice_shape)
    order = np.argsort(lin, kind="stable")
    lin = lin[order]
    if lin.size and np.any(np.diff(lin) == 0):
        dup = coords[order][np.flatnonzero(np.diff(lin) == 0)[0]]
        raise ValueError(f"duplicate coordinate {tuple(dup)}")
    return SparseTensor(coords[order], Tensor(feats[order], requires_grad=requires_grad),
                        lattice_shape, _linear=lin)
