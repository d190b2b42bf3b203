"""Decomposition of the atlas grid into overlapped or abutting tiles.

A grid of ``k = kx * ky * kz`` axis-aligned boxes covers the atlas.  Per
axis the origins are evenly spaced between 0 and ``extent - size``; when
``k_axis * size`` exceeds the extent, adjacent tiles overlap, and when it
equals the extent they abut into an exact partition.  Tile order is fixed:
lexicographic in (z, y, x) grid position with x varying fastest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import (
    AffineTransform,
    IntensityVolume,
    LabelVolume,
    VolumeGeometry,
    compose,
)

__all__ = [
    "TilingError",
    "TileSpec",
    "TileGrid",
    "build_grid",
    "coverage_map",
    "extract_tile",
    "axis_origins",
    "save_grid",
    "load_grid",
]


class TilingError(ValueError):
    """Invalid tile layout or extraction request."""


@dataclass(frozen=True)
class TileSpec:
    """One axis-aligned sub-space: half-open voxel box [origin, origin+size)."""

    origin: tuple
    size: tuple
    index: int

    def __post_init__(self):
        origin = tuple(int(v) for v in self.origin)
        size = tuple(int(v) for v in self.size)
        if len(origin) != 3 or len(size) != 3:
            raise TilingError("origin and size must be integer triples")
        if any(o < 0 for o in origin):
            raise TilingError(f"negative tile origin {origin}")
        if any(s <= 0 for s in size):
            raise TilingError(f"non-positive tile size {size}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "size", size)

    @property
    def stop(self) -> tuple:
        return tuple(o + s for o, s in zip(self.origin, self.size))

    def slices(self) -> tuple:
        return tuple(slice(o, o + s) for o, s in zip(self.origin, self.size))

    def contains_voxel(self, voxel) -> bool:
        return all(o <= v < o + s for v, o, s in zip(voxel, self.origin, self.size))


def axis_origins(extent: int, k: int, size: int) -> list[int]:
    """Evenly spaced tile origins along one axis.

    ``origin_j = round(j * (extent - size) / (k - 1))`` for j in 0..k-1;
    a single tile sits at 0.  Raises when the axis cannot be covered.
    """
    if size > extent:
        raise TilingError(f"tile size {size} exceeds axis extent {extent}")
    if k < 1:
        raise TilingError(f"grid count must be >= 1, got {k}")
    if k * size < extent:
        raise TilingError(
            f"coverage impossible: {k} tiles of size {size} < extent {extent}"
        )
    if k == 1:
        return [0]
    step = (extent - size) / (k - 1)
    origins = [int(round(j * step)) for j in range(k)]
    for a, b in zip(origins, origins[1:]):
        if b > a + size:
            raise TilingError(
                f"gap between tiles at origins {a} and {b} with size {size}"
            )
    return origins


@dataclass(frozen=True)
class TileGrid:
    """An ordered set of tiles covering every voxel of the atlas grid."""

    atlas_dims: tuple
    grid: tuple
    tile_size: tuple
    tiles: tuple

    @property
    def k(self) -> int:
        return len(self.tiles)

    def is_partition(self) -> bool:
        """True when every voxel is covered by exactly one tile."""
        for extent, k, size, origins in self._per_axis():
            if k * size != extent:
                return False
            if origins != [j * size for j in range(k)]:
                return False
        return True

    def _per_axis(self):
        for axis in range(3):
            origins = sorted({t.origin[axis] for t in self.tiles})
            yield self.atlas_dims[axis], self.grid[axis], self.tile_size[axis], origins

    def to_dict(self) -> dict:
        return {
            "atlas_dims": list(self.atlas_dims),
            "grid": list(self.grid),
            "tile_size": list(self.tile_size),
            "origins": [list(t.origin) for t in self.tiles],
        }


def build_grid(atlas_dims, grid, tile_size) -> TileGrid:
    """Lay out ``grid = (kx, ky, kz)`` tiles of ``tile_size`` over ``atlas_dims``."""
    atlas_dims = tuple(int(v) for v in atlas_dims)
    grid = tuple(int(v) for v in grid)
    tile_size = tuple(int(v) for v in tile_size)
    per_axis = [
        axis_origins(atlas_dims[a], grid[a], tile_size[a]) for a in range(3)
    ]
    tiles = []
    n = 0
    for gz in range(grid[2]):          # z-major ordering, x fastest
        for gy in range(grid[1]):
            for gx in range(grid[0]):
                origin = (per_axis[0][gx], per_axis[1][gy], per_axis[2][gz])
                tiles.append(TileSpec(origin, tile_size, n))
                n += 1
    return TileGrid(atlas_dims, grid, tile_size, tuple(tiles))


def coverage_map(grid: TileGrid) -> np.ndarray:
    """Per-voxel count of covering tiles, shape ``atlas_dims``, int32."""
    cov = np.zeros(grid.atlas_dims, dtype=np.int32)
    for tile in grid.tiles:
        cov[tile.slices()] += 1
    return cov


def extract_tile(vol, tile: TileSpec):
    """Copy a tile's sub-volume, preserving world coordinates.

    Works for intensity and label volumes alike; the extracted geometry
    composes the parent affine with the tile-origin offset so voxel (0,0,0)
    of the tile maps to the same world point as the parent voxel at
    ``tile.origin``.
    """
    dims = vol.dims
    if any(o + s > d for o, s, d in zip(tile.origin, tile.size, dims)):
        raise TilingError(f"tile {tile.origin}+{tile.size} exceeds volume dims {dims}")
    sub = vol.data[tile.slices()]
    offset = AffineTransform.translation(tile.origin)
    geometry = VolumeGeometry(
        tile.size,
        vol.geometry.spacing,
        compose(vol.geometry.index_to_world, offset),
    )
    if isinstance(vol, LabelVolume):
        return LabelVolume(geometry, sub, vol.num_labels)
    return IntensityVolume(geometry, sub)


def save_grid(grid: TileGrid, path) -> None:
    Path(path).write_text(json.dumps(grid.to_dict(), indent=1))


def load_grid(path) -> TileGrid:
    doc = json.loads(Path(path).read_text())
    rebuilt = build_grid(doc["atlas_dims"], doc["grid"], doc["tile_size"])
    stored = [tuple(o) for o in doc["origins"]]
    actual = [t.origin for t in rebuilt.tiles]
    if stored != actual:
        raise TilingError("stored tile origins do not match the layout rule")
    return rebuilt
