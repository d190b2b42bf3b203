"""End-to-end orchestration: native scan in, native-space labels out.

Stage order is fixed: read, register (resample onto the atlas grid),
harmonize (optional), tile, segment, fuse, map back to native space,
write.  Every merge point is a deterministic reduction, so outputs are
bitwise identical for any parallelism degree.

The affine convention matches the resamplers: the "forward" transform is
the pull-back map used when resampling the native scan onto the atlas
grid, i.e. it takes atlas world coordinates into native world
coordinates.  Mapping the fused labels back uses its inverse.

Bias-field correction is an external preprocessing expectation, not a
stage; feed corrected scans in.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .harmonize import HarmonizeError, harmonize as apply_harmonization, load_model
from . import io as tio
from .fusion import fuse_concatenate, fuse_majority
from .geometry import (
    ATLAS_DIMS,
    AffineTransform,
    IntensityVolume,
    LabelVolume,
    VolumeGeometry,
    estimate_affine_moments,
    make_centered_geometry,
    resample_intensity,
    resample_labels,
)
from .segmenter import SegmenterBackend, parse_backend_spec, segment_all
from .tiling import TileGrid, build_grid, save_grid

__all__ = [
    "ConfigError",
    "PipelineConfig",
    "RunResult",
    "load_config",
    "save_affine",
    "load_affine",
    "inverse_transform_labels",
    "run",
]


class ConfigError(ValueError):
    """Invalid pipeline configuration."""


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a full run needs besides the input scan.

    ``affine`` selects how the forward transform is obtained: the literal
    ``"identity"``, ``"estimate"`` (moments-based, needs ``reference``, an
    atlas-space intensity volume), or a path to a 4x4 whitespace-separated
    matrix file.  ``backend`` is a spec string (``constant:...``,
    ``prior:...``, ``external:...``) or a SegmenterBackend instance.
    """

    grid: tuple = (3, 3, 3)
    tile_size: tuple = (96, 128, 88)
    atlas_dims: tuple = ATLAS_DIMS
    atlas_spacing: tuple = (1.0, 1.0, 1.0)
    harmonization_model: str | None = None
    backend: object = "constant:0"
    affine: str = "identity"
    reference: str | None = None
    fusion_mode: str = "majority"
    num_labels: int = 133
    jobs: int = 1
    on_tile_failure: str = "abort"
    background_fill: float = 0.0
    resume: bool = False
    output_dir: str = "tileseg_out"

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(v) for v in self.grid))
        object.__setattr__(self, "tile_size", tuple(int(v) for v in self.tile_size))
        object.__setattr__(self, "atlas_dims", tuple(int(v) for v in self.atlas_dims))
        object.__setattr__(
            self, "atlas_spacing", tuple(float(v) for v in self.atlas_spacing)
        )
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.fusion_mode not in ("majority", "concat"):
            raise ConfigError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.num_labels < 2:
            raise ConfigError("num_labels must be >= 2")
        if self.affine == "estimate" and not self.reference:
            raise ConfigError("affine=estimate needs a reference volume path")

    def atlas_geometry(self) -> VolumeGeometry:
        return make_centered_geometry(self.atlas_dims, self.atlas_spacing)

    def build_grid(self) -> TileGrid:
        grid = build_grid(self.atlas_dims, self.grid, self.tile_size)
        if self.fusion_mode == "concat" and not grid.is_partition():
            raise ConfigError(
                "fusion mode 'concat' requires a non-overlapped partition grid"
            )
        return grid

    def resolve_backend(self) -> SegmenterBackend:
        if isinstance(self.backend, SegmenterBackend):
            return self.backend
        return parse_backend_spec(str(self.backend), self.num_labels)


_CONFIG_KEYS = {
    "grid", "tile_size", "atlas_dims", "atlas_spacing", "harmonization_model",
    "backend", "affine", "reference", "fusion_mode", "num_labels", "jobs",
    "on_tile_failure", "background_fill", "resume", "output_dir",
}


def load_config(path, **overrides) -> PipelineConfig:
    """Load a JSON config file mirroring PipelineConfig; kwargs override."""
    doc = json.loads(Path(path).read_text())
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    doc.update({k: v for k, v in overrides.items() if v is not None})
    return PipelineConfig(**doc)


def save_affine(transform: AffineTransform, path) -> None:
    np.savetxt(path, transform.matrix, fmt="%.17g")


def load_affine(path) -> AffineTransform:
    m = np.loadtxt(path)
    if m.shape != (4, 4):
        raise ConfigError(f"affine file must hold a 4x4 matrix, got {m.shape}")
    return AffineTransform(m)


def inverse_transform_labels(
    fused: LabelVolume,
    forward_affine: AffineTransform,
    native_geometry: VolumeGeometry,
) -> LabelVolume:
    """Map atlas-space labels back onto the native grid.

    Nearest-neighbor resampling under the inverse of the forward transform.
    """
    return resample_labels(fused, forward_affine.inverse(), native_geometry)


@dataclass
class RunResult:
    native_labels_path: str
    atlas_labels_path: str
    report: dict
    fused: LabelVolume
    native_labels: LabelVolume


class _StageClock:
    def __init__(self):
        self.stages = []

    def time(self, name):
        clock = self

        class _Ctx:
            def __enter__(self_inner):
                self_inner.t0 = time.perf_counter()
                return self_inner

            def __exit__(self_inner, exc_type, exc, tb):
                clock.stages.append(
                    {"name": name, "seconds": time.perf_counter() - self_inner.t0}
                )
                return False

        return _Ctx()


def _forward_transform(config: PipelineConfig, scan: IntensityVolume):
    if config.affine == "identity":
        return AffineTransform.identity()
    if config.affine == "estimate":
        reference, _ = tio.read_nifti(config.reference)
        return estimate_affine_moments(scan, reference)
    return load_affine(config.affine)


def _segment_with_cache(config, backend, atlas_input, grid, work_dir):
    """Per-tile content-addressed cache so interrupted runs can resume."""
    from .segmenter import SegmentationError, segment_tile
    from .tiling import extract_tile

    if not config.resume:
        return segment_all(
            backend, atlas_input, grid,
            jobs=config.jobs, on_tile_failure=config.on_tile_failure,
        )

    cache = Path(work_dir) / "tiles"
    cache.mkdir(parents=True, exist_ok=True)

    def run_one(tile):
        tile_input = extract_tile(atlas_input, tile)
        key = hashlib.sha256()
        key.update(tile_input.data.tobytes())
        key.update(backend.descriptor().encode())
        key.update(json.dumps([tile.origin, tile.size, tile.index]).encode())
        entry = cache / key.hexdigest()
        if entry.exists():
            return tio.read_raw(entry)
        try:
            out = segment_tile(backend, tile_input, tile)
        except Exception as exc:
            raise SegmentationError(f"tile {tile.index}: {exc}") from exc
        tio.write_raw(out, entry)
        return out

    if config.jobs <= 1:
        return [run_one(t) for t in grid.tiles]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=config.jobs) as pool:
        return list(pool.map(run_one, grid.tiles))


def run(config: PipelineConfig, input_scan) -> RunResult:
    """Execute the full pipeline on one scan.

    Writes ``atlas_labels.nii``, ``native_labels.nii``, ``grid.json`` and
    ``report.json`` into ``config.output_dir``; on failure, partial outputs
    are removed and a ``FAILED`` marker names the broken stage.
    """
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    atlas_path = out_dir / "atlas_labels.nii"
    native_path = out_dir / "native_labels.nii"
    marker = out_dir / "FAILED"
    clock = _StageClock()
    stage = "setup"
    try:
        if marker.exists():
            marker.unlink()
        atlas_geom = config.atlas_geometry()
        grid = config.build_grid()
        backend = config.resolve_backend()

        stage = "read"
        with clock.time(stage):
            scan, _ = tio.read_nifti(input_scan)

        stage = "register"
        with clock.time(stage):
            forward = _forward_transform(config, scan)
            atlas_input = resample_intensity(
                scan, forward, atlas_geom, background=config.background_fill
            )

        stage = "harmonize"
        fit = None
        with clock.time(stage):
            if config.harmonization_model:
                model = load_model(config.harmonization_model)
                if not model.mask.geometry.matches(atlas_geom, tol=1e-3):
                    raise HarmonizeError(
                        "harmonization model is not on the configured atlas grid"
                    )
                atlas_input, fit = apply_harmonization(atlas_input, model)

        stage = "segment"
        with clock.time(stage):
            tile_segs = _segment_with_cache(
                config, backend, atlas_input, grid, out_dir / "work"
            )

        stage = "fuse"
        with clock.time(stage):
            if config.fusion_mode == "majority":
                result = fuse_majority(
                    tile_segs, grid, num_labels=backend.num_labels, jobs=config.jobs
                )
                fused = result.fused
                tie_count = result.tie_count
                coverage = result.coverage_used
            else:
                fused = fuse_concatenate(tile_segs, grid)
                tie_count = 0
                coverage = np.ones(grid.atlas_dims, dtype=np.int32)

        stage = "unregister"
        with clock.time(stage):
            native_labels = inverse_transform_labels(fused, forward, scan.geometry)

        stage = "write"
        with clock.time(stage):
            tio.write_nifti(fused, atlas_path)
            tio.write_nifti(native_labels, native_path)
            save_grid(grid, out_dir / "grid.json")
        report = {
            "input": str(input_scan),
            "stages": clock.stages,
            "harmonization": None
            if fit is None
            else {
                "beta1": fit.beta1,
                "beta0": fit.beta0,
                "residual_rms": fit.residual_rms,
            },
            "fusion": {
                "mode": config.fusion_mode,
                "tie_count": int(tie_count),
                "coverage_min": int(coverage.min()),
                "coverage_max": int(coverage.max()),
                "coverage_mean": float(coverage.mean()),
            },
            "grid": grid.to_dict(),
            "num_labels": backend.num_labels,
            "outputs": {
                "atlas_labels": str(atlas_path),
                "native_labels": str(native_path),
            },
        }
        (out_dir / "report.json").write_text(json.dumps(report, indent=1))
    except Exception as exc:
        for path in (atlas_path, native_path, out_dir / "report.json"):
            if path.exists():
                path.unlink()
        marker.write_text(f"stage: {stage}\nerror: {exc}\n")
        raise
    return RunResult(
        native_labels_path=str(native_path),
        atlas_labels_path=str(atlas_path),
        report=report,
        fused=fused,
        native_labels=native_labels,
    )
