"""Majority-vote fusion of overlapped tile segmentations.

Every atlas voxel receives one vote from each tile whose box contains it;
the fused label maximizes the vote count, with ties broken toward the
smallest label value (which favors background at uncertain boundaries).
Abutting partitions skip voting entirely and are reassembled by direct
copy.

The vote counts are accumulated per z-stripe with a flat bincount over
``voxel * L + label`` indices, so resident memory stays bounded by the
stripe budget instead of ``atlas_voxels * L``; stripes are disjoint, which
makes parallel execution deterministic.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .geometry import AffineTransform, LabelVolume, VolumeGeometry, compose
from .tiling import TileGrid

__all__ = ["FusionError", "FusionResult", "fuse_majority", "fuse_concatenate"]

# per-stripe bincount buffer budget, bytes
_STRIPE_BYTES = 128 << 20


class FusionError(ValueError):
    """Inconsistent tile segmentations or an invalid fusion request."""


@dataclass(frozen=True)
class FusionResult:
    fused: LabelVolume
    tie_count: int
    coverage_used: np.ndarray  # votes cast per voxel, int32, atlas dims


def _atlas_geometry_from_tiles(tile_segs, grid: TileGrid) -> VolumeGeometry:
    """Recover the atlas geometry the tiles were extracted from."""
    first = tile_segs[0]
    origin = grid.tiles[0].origin
    back = AffineTransform.translation([-o for o in origin])
    atlas_i2w = compose(first.geometry.index_to_world, back)
    geometry = VolumeGeometry(grid.atlas_dims, first.geometry.spacing, atlas_i2w)
    for seg, tile in zip(tile_segs, grid.tiles):
        expected = compose(geometry.index_to_world, AffineTransform.translation(tile.origin))
        if not np.allclose(seg.geometry.index_to_world.matrix, expected.matrix, atol=1e-4):
            raise FusionError(f"tile {tile.index} geometry is inconsistent with the grid")
    return geometry


def _validate(tile_segs, grid: TileGrid, num_labels):
    if len(tile_segs) != grid.k:
        raise FusionError(f"got {len(tile_segs)} tiles for a grid of {grid.k}")
    if num_labels is None:
        num_labels = max(seg.num_labels for seg in tile_segs)
    for seg, tile in zip(tile_segs, grid.tiles):
        if seg.dims != tile.size:
            raise FusionError(
                f"tile {tile.index} dims {seg.dims} do not match size {tile.size}"
            )
        if int(seg.data.max(initial=0)) >= num_labels:
            raise FusionError(f"tile {tile.index} holds labels >= {num_labels}")
    return int(num_labels)


def fuse_majority(
    tile_segs: list[LabelVolume],
    grid: TileGrid,
    num_labels: int | None = None,
    jobs: int = 1,
) -> FusionResult:
    """Per-voxel majority vote over the covering tiles.

    Returns the fused atlas-space label volume, the number of voxels where
    the top vote count was shared by several labels, and the per-voxel vote
    count (equal to the grid's coverage map).
    """
    L = _validate(tile_segs, grid, num_labels)
    geometry = _atlas_geometry_from_tiles(tile_segs, grid)
    nx, ny, nz = grid.atlas_dims

    fused = np.empty(grid.atlas_dims, dtype=np.uint16)
    coverage = np.empty(grid.atlas_dims, dtype=np.int32)
    tie_counts = np.zeros(nz, dtype=np.int64)

    stripe = max(1, int(_STRIPE_BYTES // (nx * ny * L * 8)))

    def process(z0: int) -> None:
        z1 = min(z0 + stripe, nz)
        sz = z1 - z0
        nvox = nx * ny * sz
        chunks = []
        for seg, tile in zip(tile_segs, grid.tiles):
            ox, oy, oz = tile.origin
            dx, dy, dz = tile.size
            lz0, lz1 = max(z0 - oz, 0), min(z1 - oz, dz)
            if lz0 >= lz1:
                continue
            labels = seg.data[:, :, lz0:lz1].astype(np.int64)
            gx = np.arange(ox, ox + dx, dtype=np.int64)[:, None, None]
            gy = np.arange(oy, oy + dy, dtype=np.int64)[None, :, None]
            gz = np.arange(oz + lz0 - z0, oz + lz1 - z0, dtype=np.int64)[None, None, :]
            flat = (gx * ny + gy) * sz + gz
            chunks.append((flat * L + labels).reshape(-1))
        votes = np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64)
        counts = np.bincount(votes, minlength=nvox * L).reshape(nvox, L)
        winners = counts.argmax(axis=1).astype(np.uint16)
        top = counts.max(axis=1)
        ties = ((counts == top[:, None]).sum(axis=1) >= 2) & (top > 0)
        fused[:, :, z0:z1] = winners.reshape(nx, ny, sz)
        coverage[:, :, z0:z1] = counts.sum(axis=1).reshape(nx, ny, sz)
        tie_counts[z0] = int(ties.sum())

    starts = range(0, nz, stripe)
    if jobs <= 1:
        for z0 in starts:
            process(z0)
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(process, starts))

    return FusionResult(
        fused=LabelVolume(geometry, fused, L),
        tie_count=int(tie_counts.sum()),
        coverage_used=coverage,
    )


def fuse_concatenate(tile_segs: list[LabelVolume], grid: TileGrid) -> LabelVolume:
    """Reassemble an exact partition by copying each tile into place."""
    L = _validate(tile_segs, grid, None)
    if not grid.is_partition():
        raise FusionError("concatenation needs a non-overlapped partition grid")
    geometry = _atlas_geometry_from_tiles(tile_segs, grid)
    out = np.empty(grid.atlas_dims, dtype=np.uint16)
    for seg, tile in zip(tile_segs, grid.tiles):
        out[tile.slices()] = seg.data
    return LabelVolume(geometry, out, L)
