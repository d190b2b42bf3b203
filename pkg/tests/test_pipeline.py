import json

import numpy as np
import numpy.testing as npt
import pytest

from tileseg import io as tio
from tileseg.fusion import fuse_majority
from tileseg.geometry import (
    AffineTransform,
    GeometryError,
    make_centered_geometry,
    resample_labels,
)
from tileseg.harmonize import fit_model, save_model
from tileseg.phantom import intensity_from_labels, make_blob_phantom
from tileseg.pipeline import (
    ConfigError,
    PipelineConfig,
    inverse_transform_labels,
    load_affine,
    load_config,
    run,
    save_affine,
)
from tileseg.segmenter import AtlasPriorOracle, CorruptingWrapper, segment_all
from tileseg.tiling import build_grid, coverage_map
from conftest import random_labels


# --- configuration ---


def test_config_rejects_bad_jobs():
    with pytest.raises(ConfigError, match="jobs"):
        PipelineConfig(jobs=0)


def test_config_rejects_unknown_fusion_mode():
    with pytest.raises(ConfigError, match="fusion mode"):
        PipelineConfig(fusion_mode="vote")


def test_config_rejects_tiny_label_count():
    with pytest.raises(ConfigError, match="num_labels"):
        PipelineConfig(num_labels=1)


def test_config_estimate_needs_reference():
    with pytest.raises(ConfigError, match="reference"):
        PipelineConfig(affine="estimate")


def test_config_concat_needs_partition_grid():
    config = PipelineConfig(
        atlas_dims=(10, 10, 10), grid=(2, 2, 2), tile_size=(6, 6, 6),
        fusion_mode="concat",
    )
    with pytest.raises(ConfigError, match="partition"):
        config.build_grid()


def test_load_config_rejects_unknown_keys(tmp_path):
    p = tmp_path / "config.json"
    p.write_text(json.dumps({"jobs": 2, "tile_shape": [8, 8, 8]}))
    with pytest.raises(ConfigError, match="tile_shape"):
        load_config(p)


def test_load_config_applies_overrides(tmp_path):
    p = tmp_path / "config.json"
    p.write_text(json.dumps({"jobs": 2, "num_labels": 10}))
    config = load_config(p, jobs=5, backend="constant:1")
    assert config.jobs == 5
    assert config.num_labels == 10
    assert config.backend == "constant:1"
    # None overrides fall back to the file values
    assert load_config(p, jobs=None).jobs == 2


# --- affine persistence ---


def test_affine_file_round_trip(tmp_path):
    t = AffineTransform.from_linear_translation(
        np.array([[0.9, 0.1, 0.0], [-0.1, 0.9, 0.0], [0.0, 0.0, 1.1]]),
        (3.5, -2.25, 0.125),
    )
    p = tmp_path / "affine.txt"
    save_affine(t, p)
    npt.assert_array_equal(load_affine(p).matrix, t.matrix)  # %.17g is lossless


def test_load_affine_rejects_wrong_shape(tmp_path):
    p = tmp_path / "affine.txt"
    p.write_text("1 0 0\n0 1 0\n0 0 1\n")
    with pytest.raises(ConfigError, match="4x4"):
        load_affine(p)


def test_load_affine_rejects_invalid_matrix(tmp_path):
    p = tmp_path / "affine.txt"
    m = np.eye(4)
    m[3, 3] = 2.0
    np.savetxt(p, m)
    with pytest.raises(GeometryError):
        load_affine(p)


# --- inverse mapping to native space ---


def test_inverse_transform_identity_is_bitwise():
    lab = random_labels((8, 8, 8), 5, seed=1)
    out = inverse_transform_labels(lab, AffineTransform.identity(), lab.geometry)
    npt.assert_array_equal(out.data, lab.data)


def test_inverse_transform_undoes_integer_shift():
    native = random_labels((8, 8, 8), 5, seed=2)
    atlas_geom = native.geometry
    forward = AffineTransform.translation((2.0, 0.0, 0.0))
    atlas = resample_labels(native, forward, atlas_geom)
    # forward reads source at index + 2, so atlas[i] = native[i + 2]
    npt.assert_array_equal(atlas.data[:6], native.data[2:])
    back = inverse_transform_labels(atlas, forward, native.geometry)
    # voxels that stayed in bounds both ways return exactly
    npt.assert_array_equal(back.data[2:], native.data[2:])
    assert np.all(back.data[:2] == 0)


def _label_boundary(data):
    edge = np.zeros(data.shape, dtype=bool)
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        diff = data[tuple(lo)] != data[tuple(hi)]
        edge[tuple(lo)] |= diff
        edge[tuple(hi)] |= diff
    return edge


def _dilate(mask, steps):
    out = mask.copy()
    for _ in range(steps):
        grown = out.copy()
        for axis in range(3):
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[axis] = slice(0, -1)
            hi[axis] = slice(1, None)
            grown[tuple(lo)] |= out[tuple(hi)]
            grown[tuple(hi)] |= out[tuple(lo)]
        out = grown
    return out


def test_round_trip_errors_confined_to_label_boundaries():
    geom = make_centered_geometry((20, 20, 20))
    native = make_blob_phantom(geom, num_labels=4, seed=3)
    atlas_geom = make_centered_geometry((24, 24, 24))
    forward = AffineTransform.from_linear_translation(
        np.array(
            [
                [np.cos(0.09), -np.sin(0.09), 0.0],
                [np.sin(0.09), np.cos(0.09), 0.0],
                [0.0, 0.0, 1.0],
            ]
        ),
        (0.3, -0.2, 0.1),
    )
    atlas = resample_labels(native, forward, atlas_geom)
    back = inverse_transform_labels(atlas, forward, native.geometry)
    diff = back.data != native.data
    # two nearest-neighbor roundings displace by under 2 voxels, so flips
    # can only happen near a label boundary; uniform interiors are stable
    allowed = _dilate(_label_boundary(native.data), 2)
    interior = np.zeros(native.dims, dtype=bool)
    interior[2:-2, 2:-2, 2:-2] = True
    assert not np.any(diff & interior & ~allowed)


# --- end-to-end runs on synthetic scans ---

DIMS = (24, 24, 24)


def _phantom_case(tmp_path, num_labels=5, seed=4):
    geom = make_centered_geometry(DIMS)
    truth = make_blob_phantom(geom, num_labels=num_labels, seed=seed)
    scan = intensity_from_labels(truth, seed=seed)
    scan_path = tmp_path / "scan.nii"
    tio.write_nifti(scan, scan_path)
    return truth, scan_path


def _base_config(tmp_path, truth, **kw):
    defaults = dict(
        atlas_dims=DIMS,
        grid=(2, 2, 2),
        tile_size=(14, 14, 14),
        backend=AtlasPriorOracle(truth),
        affine="identity",
        num_labels=truth.num_labels,
        output_dir=str(tmp_path / "out"),
    )
    defaults.update(kw)
    return PipelineConfig(**defaults)


def test_run_identity_phantom_reproduces_truth(tmp_path):
    truth, scan_path = _phantom_case(tmp_path)
    config = _base_config(tmp_path, truth)
    result = run(config, scan_path)
    npt.assert_array_equal(result.fused.data, truth.data)
    npt.assert_array_equal(result.native_labels.data, truth.data)

    out_dir = tmp_path / "out"
    for name in ("atlas_labels.nii", "native_labels.nii", "grid.json", "report.json"):
        assert (out_dir / name).exists()
    written, _ = tio.read_nifti(out_dir / "native_labels.nii", as_labels=True)
    npt.assert_array_equal(written.data, truth.data)
    report = json.loads((out_dir / "report.json").read_text())
    assert [s["name"] for s in report["stages"]] == [
        "read", "register", "harmonize", "segment", "fuse", "unregister", "write",
    ]
    assert report["fusion"]["tie_count"] == 0


def test_run_corrupted_tile_is_outvoted_in_deep_coverage(tmp_path):
    truth, scan_path = _phantom_case(tmp_path)
    backend = CorruptingWrapper(AtlasPriorOracle(truth), target_index=13, corruption_label=1)
    config = _base_config(
        tmp_path, truth, backend=backend, grid=(3, 3, 3), tile_size=(12, 12, 12)
    )
    result = run(config, scan_path)
    cov = coverage_map(config.build_grid())
    deep = cov >= 3
    npt.assert_array_equal(result.fused.data[deep], truth.data[deep])
    diff = result.fused.data != truth.data
    assert np.all(cov[diff] <= 2)


def test_run_concat_mode_on_partition(tmp_path):
    truth, scan_path = _phantom_case(tmp_path)
    config = _base_config(
        tmp_path, truth, fusion_mode="concat", grid=(2, 2, 2), tile_size=(12, 12, 12)
    )
    result = run(config, scan_path)
    npt.assert_array_equal(result.fused.data, truth.data)
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["fusion"]["mode"] == "concat"
    assert report["fusion"]["coverage_max"] == 1


def test_run_with_saved_affine_round_trips(tmp_path):
    truth, scan_path = _phantom_case(tmp_path)
    forward = AffineTransform.translation((2.0, -1.0, 0.0))
    affine_path = tmp_path / "fwd.txt"
    save_affine(forward, affine_path)
    config = _base_config(tmp_path, truth, affine=str(affine_path))
    result = run(config, scan_path)
    expected_native = inverse_transform_labels(
        result.fused, forward, truth.geometry
    )
    npt.assert_array_equal(result.native_labels.data, expected_native.data)


def test_run_harmonization_self_model_is_neutral(tmp_path):
    truth, scan_path = _phantom_case(tmp_path)
    scan, _ = tio.read_nifti(scan_path)
    model = fit_model(
        [scan],
        [random_labels(DIMS, 2, seed=0).with_data(np.ones(DIMS, dtype=np.uint16))],
        quantile_count=64,
    )
    model_dir = tmp_path / "model"
    save_model(model, model_dir)
    config = _base_config(tmp_path, truth, harmonization_model=str(model_dir))
    result = run(config, scan_path)
    h = json.loads((tmp_path / "out" / "report.json").read_text())["harmonization"]
    assert abs(h["beta1"] - 1.0) <= 1e-6
    assert abs(h["beta0"]) <= 1e-6
    npt.assert_array_equal(result.fused.data, truth.data)


def test_run_is_deterministic_across_parallelism(tmp_path):
    truth, scan_path = _phantom_case(tmp_path)
    backend = CorruptingWrapper(AtlasPriorOracle(truth), target_index=2, corruption_label=1)
    blobs = {}
    for jobs in (1, 8):
        config = _base_config(
            tmp_path, truth, backend=backend, jobs=jobs,
            output_dir=str(tmp_path / f"out_j{jobs}"),
        )
        run(config, scan_path)
        blobs[jobs] = {
            name: (tmp_path / f"out_j{jobs}" / name).read_bytes()
            for name in ("atlas_labels.nii", "native_labels.nii")
        }
    assert blobs[1] == blobs[8]


def test_run_failure_removes_partials_and_names_the_stage(tmp_path):
    truth, scan_path = _phantom_case(tmp_path)
    config = _base_config(tmp_path, truth, backend="external:false {input} {output}")
    with pytest.raises(Exception):
        run(config, scan_path)
    out_dir = tmp_path / "out"
    marker = out_dir / "FAILED"
    assert marker.exists()
    assert marker.read_text().startswith("stage: segment")
    for name in ("atlas_labels.nii", "native_labels.nii", "report.json"):
        assert not (out_dir / name).exists()
    # a subsequent successful run clears the marker
    ok = _base_config(tmp_path, truth)
    run(ok, scan_path)
    assert not marker.exists()


def test_resume_reuses_cached_tiles(tmp_path):
    truth, scan_path = _phantom_case(tmp_path)
    # partition grid: each voxel belongs to exactly one tile, so a poisoned
    # cache entry must show through if and only if the cache is honored
    config = _base_config(
        tmp_path, truth, grid=(2, 2, 2), tile_size=(12, 12, 12), resume=True
    )
    first = run(config, scan_path)
    npt.assert_array_equal(first.fused.data, truth.data)
    cache = tmp_path / "out" / "work" / "tiles"
    entries = sorted(p for p in cache.iterdir() if not p.name.endswith(".json"))
    assert len(entries) == 8

    poisoned = tio.read_raw(entries[0])
    tio.write_raw(poisoned.with_data(np.full(poisoned.dims, 1, dtype=np.uint16)), entries[0])
    second = run(config, scan_path)
    assert np.any(second.fused.data != truth.data)  # cache was read, not recomputed


def test_run_estimated_affine_on_translated_phantom(tmp_path):
    # scan grid sits 3 voxels off the atlas in world space; moments-based
    # estimation must recover the offset and the phantom exactly
    truth, _ = _phantom_case(tmp_path)
    shifted_geom = make_centered_geometry(DIMS)
    shifted_i2w = AffineTransform.from_linear_translation(
        np.eye(3), np.array(shifted_geom.index_to_world.offset) + (3.0, 0.0, 0.0)
    )
    from tileseg.geometry import IntensityVolume, VolumeGeometry

    native_geom = VolumeGeometry(DIMS, (1.0, 1.0, 1.0), shifted_i2w)
    native_truth = random_labels(DIMS, truth.num_labels, seed=9).with_data(truth.data)
    scan = IntensityVolume(native_geom, intensity_from_labels(truth, seed=4).data)
    scan_path = tmp_path / "moved.nii"
    tio.write_nifti(scan, scan_path)
    reference_path = tmp_path / "reference.nii"
    tio.write_nifti(intensity_from_labels(truth, seed=4), reference_path)

    config = _base_config(
        tmp_path, truth, affine="estimate", reference=str(reference_path)
    )
    result = run(config, scan_path)
    npt.assert_array_equal(result.fused.data, truth.data)
    assert result.native_labels.dims == DIMS
