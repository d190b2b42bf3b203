"""Core 3D volume types, affine transforms, and resampling.

Conventions used throughout the package:

* Volumes are indexed ``data[x, y, z]`` with shape equal to ``dims``.
  The linear (disk) layout is x-fastest ("Fortran" order), matching the
  de facto layout of single-file medical volumes.
* ``index_to_world`` maps homogeneous voxel indices to world millimetres:
  ``world = M @ [i, j, k, 1]``.
* Resampling is pull-back: we iterate target voxels, map them through the
  given world-to-world transform into the source volume, and interpolate.
  The transform handed to a resampler therefore maps *target* world
  coordinates into *source* world coordinates.
* Nearest-neighbor rounding at exact half-voxel ties rounds half toward
  negative infinity, so results are deterministic across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GeometryError",
    "AffineTransform",
    "VolumeGeometry",
    "IntensityVolume",
    "LabelVolume",
    "atlas_geometry",
    "make_centered_geometry",
    "compose",
    "resample_intensity",
    "resample_labels",
    "estimate_affine_moments",
]

# Canonical atlas grid: 172 x 220 x 156 voxels at 1 mm isotropic.
ATLAS_DIMS = (172, 220, 156)
ATLAS_SPACING = (1.0, 1.0, 1.0)

_DET_EPS = 1e-12


class GeometryError(ValueError):
    """Invalid geometry, transform, or resampling request."""


def _as_triple(value, name: str, kind=int) -> tuple:
    t = tuple(kind(v) for v in value)
    if len(t) != 3:
        raise GeometryError(f"{name} must have exactly 3 components, got {value!r}")
    return t


@dataclass(frozen=True)
class AffineTransform:
    """A 4x4 homogeneous world-coordinate transform.

    The last row must be exactly ``[0, 0, 0, 1]`` and the upper-left 3x3
    block must be invertible.
    """

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise GeometryError(f"affine matrix must be 4x4, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise GeometryError("affine matrix contains non-finite entries")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise GeometryError("affine matrix last row must be [0, 0, 0, 1]")
        if abs(np.linalg.det(m[:3, :3])) <= _DET_EPS:
            raise GeometryError("affine matrix is not invertible")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(4))

    @classmethod
    def from_linear_translation(cls, linear, translation) -> "AffineTransform":
        m = np.eye(4)
        m[:3, :3] = np.asarray(linear, dtype=np.float64)
        m[:3, 3] = np.asarray(translation, dtype=np.float64)
        return cls(m)

    @classmethod
    def translation(cls, offset) -> "AffineTransform":
        return cls.from_linear_translation(np.eye(3), offset)

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def offset(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def inverse(self) -> "AffineTransform":
        return AffineTransform(np.linalg.inv(self.matrix))

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        """Map an (N, 3) array of points through the transform."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.linear.T + self.offset

    def is_identity(self, tol: float = 1e-9) -> bool:
        return bool(np.allclose(self.matrix, np.eye(4), atol=tol))

    def close_to(self, other: "AffineTransform", tol: float = 1e-9) -> bool:
        return bool(np.allclose(self.matrix, other.matrix, atol=tol))


def compose(a: AffineTransform, b: AffineTransform) -> AffineTransform:
    """Composition ``a after b``: ``compose(a, b).apply == a.apply(b.apply(x))``."""
    return AffineTransform(a.matrix @ b.matrix)


@dataclass(frozen=True)
class VolumeGeometry:
    """Grid shape, voxel spacing, and index-to-world mapping of a volume."""

    dims: tuple
    spacing: tuple
    index_to_world: AffineTransform

    def __post_init__(self):
        dims = _as_triple(self.dims, "dims", int)
        spacing = _as_triple(self.spacing, "spacing", float)
        if any(d <= 0 for d in dims):
            raise GeometryError(f"dims must be strictly positive, got {dims}")
        if any(s <= 0 for s in spacing):
            raise GeometryError(f"spacing must be strictly positive, got {spacing}")
        if not isinstance(self.index_to_world, AffineTransform):
            object.__setattr__(
                self, "index_to_world", AffineTransform(self.index_to_world)
            )
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def voxel_count(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def matches(self, other: "VolumeGeometry", tol: float = 1e-4) -> bool:
        """Same grid within tolerance (dims exact, spacing/affine approximate)."""
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=tol)
            and np.allclose(
                self.index_to_world.matrix, other.index_to_world.matrix, atol=tol
            )
        )

    def world_coordinates(self, indices: np.ndarray) -> np.ndarray:
        return self.index_to_world.apply_points(indices)


def make_centered_geometry(dims, spacing=(1.0, 1.0, 1.0)) -> VolumeGeometry:
    """Geometry whose world origin sits at the grid center.

    ``world = (index - (dims - 1) / 2) * spacing``.  This is the package's
    default orientation convention; externally produced affines can be
    supplied wherever a transform is accepted.
    """
    dims = _as_triple(dims, "dims", int)
    spacing = _as_triple(spacing, "spacing", float)
    linear = np.diag(spacing)
    translation = [-(d - 1) / 2.0 * s for d, s in zip(dims, spacing)]
    return VolumeGeometry(
        dims, spacing, AffineTransform.from_linear_translation(linear, translation)
    )


def atlas_geometry() -> VolumeGeometry:
    """The canonical atlas grid: 172x220x156 voxels, 1 mm isotropic, centered."""
    return make_centered_geometry(ATLAS_DIMS, ATLAS_SPACING)


@dataclass(frozen=True)
class IntensityVolume:
    """A scalar 3D image on a :class:`VolumeGeometry`.

    Data is stored as float64, shaped ``dims``, indexed ``[x, y, z]``, and
    frozen after construction; all values must be finite.
    """

    geometry: VolumeGeometry
    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.shape != self.geometry.dims:
            raise GeometryError(
                f"data shape {arr.shape} does not match dims {self.geometry.dims}"
            )
        if not np.all(np.isfinite(arr)):
            raise GeometryError("intensity data contains NaN or Inf")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple:
        return self.geometry.dims

    def with_data(self, data: np.ndarray) -> "IntensityVolume":
        return IntensityVolume(self.geometry, data)


@dataclass(frozen=True)
class LabelVolume:
    """An integer 3D label map on a :class:`VolumeGeometry`.

    Values live in ``[0, num_labels - 1]`` with 0 reserved for background.
    When ``num_labels`` is omitted it is inferred as ``max(data) + 1``
    (never below 2).
    """

    geometry: VolumeGeometry
    data: np.ndarray
    num_labels: int = field(default=0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.shape != self.geometry.dims:
            raise GeometryError(
                f"data shape {arr.shape} does not match dims {self.geometry.dims}"
            )
        if arr.size and arr.min() < 0:
            raise GeometryError("label data contains negative values")
        arr = np.array(arr, dtype=np.uint16)
        n = int(self.num_labels)
        if n == 0:
            n = max(int(arr.max()) + 1 if arr.size else 2, 2)
        if n < 2:
            raise GeometryError(f"num_labels must be at least 2, got {n}")
        if arr.size and int(arr.max()) >= n:
            raise GeometryError(
                f"label value {int(arr.max())} out of range for num_labels={n}"
            )
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "num_labels", n)

    @property
    def dims(self) -> tuple:
        return self.geometry.dims

    def with_data(self, data: np.ndarray) -> "LabelVolume":
        return LabelVolume(self.geometry, data, self.num_labels)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

# z-slab size for chunked resampling; keeps index buffers small at atlas scale
_RESAMPLE_SLAB = 16


def _target_to_source_indices(
    target: VolumeGeometry,
    transform: AffineTransform,
    source: VolumeGeometry,
    z0: int,
    z1: int,
) -> np.ndarray:
    """Continuous source indices for target voxels in z-slab [z0, z1)."""
    nx, ny, _ = target.dims
    # combined map: target index -> target world -> source world -> source index
    m = (
        source.index_to_world.inverse().matrix
        @ transform.matrix
        @ target.index_to_world.matrix
    )
    xi = np.arange(nx, dtype=np.float64)
    yi = np.arange(ny, dtype=np.float64)
    zi = np.arange(z0, z1, dtype=np.float64)
    out = np.empty((nx, ny, z1 - z0, 3))
    for axis in range(3):
        out[..., axis] = (
            m[axis, 0] * xi[:, None, None]
            + m[axis, 1] * yi[None, :, None]
            + m[axis, 2] * zi[None, None, :]
            + m[axis, 3]
        )
    return out


def _validate_resample(src_geometry, transform, target):
    if not isinstance(transform, AffineTransform):
        transform = AffineTransform(transform)
    if not isinstance(target, VolumeGeometry):
        raise GeometryError("target must be a VolumeGeometry")
    return transform


def resample_intensity(
    src: IntensityVolume,
    transform: AffineTransform,
    target: VolumeGeometry,
    background: float = 0.0,
) -> IntensityVolume:
    """Pull-back trilinear resampling of ``src`` onto ``target``.

    ``transform`` maps target world coordinates into source world
    coordinates.  Target voxels that map outside the source grid (continuous
    index beyond ``[0, n-1]`` on any axis) receive ``background``.
    """
    transform = _validate_resample(src.geometry, transform, target)
    nx, ny, nz = target.dims
    sx, sy, sz = src.dims
    out = np.empty(target.dims, dtype=np.float64)
    data = src.data
    for z0 in range(0, nz, _RESAMPLE_SLAB):
        z1 = min(z0 + _RESAMPLE_SLAB, nz)
        idx = _target_to_source_indices(target, transform, src.geometry, z0, z1)
        cx, cy, cz = idx[..., 0], idx[..., 1], idx[..., 2]
        inside = (
            (cx >= 0.0) & (cx <= sx - 1)
            & (cy >= 0.0) & (cy <= sy - 1)
            & (cz >= 0.0) & (cz <= sz - 1)
        )
        x0 = np.clip(np.floor(cx).astype(np.intp), 0, sx - 1)
        y0 = np.clip(np.floor(cy).astype(np.intp), 0, sy - 1)
        z0i = np.clip(np.floor(cz).astype(np.intp), 0, sz - 1)
        x1 = np.minimum(x0 + 1, sx - 1)
        y1 = np.minimum(y0 + 1, sy - 1)
        z1i = np.minimum(z0i + 1, sz - 1)
        fx = np.clip(cx - x0, 0.0, 1.0)
        fy = np.clip(cy - y0, 0.0, 1.0)
        fz = np.clip(cz - z0i, 0.0, 1.0)
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
        val = (
            data[x0, y0, z0i] * gx * gy * gz
            + data[x1, y0, z0i] * fx * gy * gz
            + data[x0, y1, z0i] * gx * fy * gz
            + data[x0, y0, z1i] * gx * gy * fz
            + data[x1, y1, z0i] * fx * fy * gz
            + data[x1, y0, z1i] * fx * gy * fz
            + data[x0, y1, z1i] * gx * fy * fz
            + data[x1, y1, z1i] * fx * fy * fz
        )
        out[:, :, z0:z1] = np.where(inside, val, background)
    return IntensityVolume(target, out)


def resample_labels(
    src: LabelVolume,
    transform: AffineTransform,
    target: VolumeGeometry,
    background: int = 0,
) -> LabelVolume:
    """Pull-back nearest-neighbor resampling of a label map onto ``target``.

    Half-voxel ties round toward negative infinity.  Voxels whose rounded
    source index falls outside the grid receive ``background``.
    """
    transform = _validate_resample(src.geometry, transform, target)
    if not 0 <= background < src.num_labels:
        raise GeometryError(f"background {background} out of label range")
    nx, ny, nz = target.dims
    sx, sy, sz = src.dims
    out = np.empty(target.dims, dtype=np.uint16)
    data = src.data
    for z0 in range(0, nz, _RESAMPLE_SLAB):
        z1 = min(z0 + _RESAMPLE_SLAB, nz)
        idx = _target_to_source_indices(target, transform, src.geometry, z0, z1)
        # round half toward -inf: ceil(x - 0.5)
        rx = np.ceil(idx[..., 0] - 0.5).astype(np.intp)
        ry = np.ceil(idx[..., 1] - 0.5).astype(np.intp)
        rz = np.ceil(idx[..., 2] - 0.5).astype(np.intp)
        inside = (
            (rx >= 0) & (rx < sx)
            & (ry >= 0) & (ry < sy)
            & (rz >= 0) & (rz < sz)
        )
        rx = np.clip(rx, 0, sx - 1)
        ry = np.clip(ry, 0, sy - 1)
        rz = np.clip(rz, 0, sz - 1)
        out[:, :, z0:z1] = np.where(inside, data[rx, ry, rz], background)
    return LabelVolume(target, out, src.num_labels)


# ---------------------------------------------------------------------------
# Moments-based affine estimation
# ---------------------------------------------------------------------------


def _intensity_moments(vol: IntensityVolume):
    """Intensity-weighted world centroid and per-world-axis std."""
    w = vol.data.reshape(-1)
    mass = float(w.sum())
    if not mass > _DET_EPS:
        raise GeometryError("volume has (near-)zero total intensity")
    nx, ny, nz = vol.dims
    m = vol.geometry.index_to_world.matrix
    # world coordinate per axis is affine in the index triple; accumulate
    # moments slab-wise to avoid materializing full coordinate grids
    sums = np.zeros(3)
    sq_sums = np.zeros(3)
    for z0 in range(0, nz, _RESAMPLE_SLAB):
        z1 = min(z0 + _RESAMPLE_SLAB, nz)
        xi = np.arange(nx, dtype=np.float64)[:, None, None]
        yi = np.arange(ny, dtype=np.float64)[None, :, None]
        zi = np.arange(z0, z1, dtype=np.float64)[None, None, :]
        wv = vol.data[:, :, z0:z1]
        for axis in range(3):
            world = m[axis, 0] * xi + m[axis, 1] * yi + m[axis, 2] * zi + m[axis, 3]
            sums[axis] += float((wv * world).sum())
            sq_sums[axis] += float((wv * world * world).sum())
    centroid = sums / mass
    var = sq_sums / mass - centroid**2
    var = np.maximum(var, 0.0)
    return centroid, np.sqrt(var)


def estimate_affine_moments(
    moving: IntensityVolume, fixed: IntensityVolume
) -> AffineTransform:
    """Approximate registration from intensity moments.

    Aligns the intensity centroid and per-axis second central moments:
    translation plus anisotropic scaling, no rotation or shear.  The result
    maps fixed-space world coordinates into moving-space world coordinates,
    ready for pull-back resampling of ``moving`` onto ``fixed``'s grid.

    This is a deliberately weak substitute for a real registration tool;
    supply a precomputed affine for production alignment.
    """
    c_mov, s_mov = _intensity_moments(moving)
    c_fix, s_fix = _intensity_moments(fixed)
    if np.any(s_fix <= _DET_EPS) or np.any(s_mov <= _DET_EPS):
        raise GeometryError("degenerate intensity spread; cannot estimate scaling")
    scale = s_mov / s_fix
    linear = np.diag(scale)
    translation = c_mov - scale * c_fix
    return AffineTransform.from_linear_translation(linear, translation)
