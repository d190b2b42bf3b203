"""Pluggable per-tile segmentation backends.

The per-tile model is a black box behind a small contract: given an
intensity tile it must return a label tile of identical dims and world
geometry with values below ``num_labels``.  Production models run as
external processes through a file-based protocol; deterministic built-in
oracles cover testing and phantom studies.

External-process protocol, per tile:

1. the intensity tile is written as a NIfTI-1 file,
2. the tile placement is written as a JSON document
   (``origin``, ``size``, ``index``, ``num_labels``),
3. the command template is expanded with ``{input}``, ``{output}`` and
   ``{spec}`` paths and invoked (no shell),
4. the process must write a NIfTI-1 label file of identical dims to
   ``{output}`` and exit 0; anything else fails the tile.

A backend that internally resizes tiles to a fixed network input must
restore the original tile dims before writing its output.
"""

from __future__ import annotations

import json
import shlex
import subprocess
import tempfile
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io as tio
from .geometry import IntensityVolume, LabelVolume
from .tiling import TileGrid, TileSpec, extract_tile

__all__ = [
    "SegmentationError",
    "SegmenterBackend",
    "ConstantOracle",
    "AtlasPriorOracle",
    "CorruptingWrapper",
    "ExternalProcessBackend",
    "segment_tile",
    "segment_all",
    "parse_backend_spec",
]

DEFAULT_NUM_LABELS = 133


class SegmentationError(RuntimeError):
    """A backend failed or returned an invalid tile segmentation."""


class SegmenterBackend:
    """Base class: per-tile label inference with a fixed label count."""

    num_labels: int

    def segment(self, tile_input: IntensityVolume, tile: TileSpec) -> LabelVolume:
        raise NotImplementedError

    def descriptor(self) -> str:
        """Stable string identifying the backend configuration (cache key)."""
        raise NotImplementedError


@dataclass(frozen=True)
class ConstantOracle(SegmenterBackend):
    """Labels every voxel with one constant value."""

    label: int = 0
    num_labels: int = DEFAULT_NUM_LABELS

    def __post_init__(self):
        if not 0 <= self.label < self.num_labels:
            raise SegmentationError(
                f"constant label {self.label} out of range [0, {self.num_labels})"
            )

    def segment(self, tile_input, tile):
        data = np.full(tile_input.dims, self.label, dtype=np.uint16)
        return LabelVolume(tile_input.geometry, data, self.num_labels)

    def descriptor(self):
        return f"constant:{self.label}:{self.num_labels}"


class AtlasPriorOracle(SegmenterBackend):
    """Answers each tile with the corresponding box of a fixed prior map.

    The prior lives on the atlas grid; segmenting tile n returns exactly
    ``extract_tile(prior, tile)``, so fusing all tiles reproduces the prior.
    """

    def __init__(self, prior: LabelVolume):
        self.prior = prior
        self.num_labels = prior.num_labels

    def segment(self, tile_input, tile):
        out = extract_tile(self.prior, tile)
        if out.dims != tile_input.dims:
            raise SegmentationError(
                f"prior tile dims {out.dims} do not match input {tile_input.dims}"
            )
        return out

    def descriptor(self):
        return f"prior:{hash(self.prior.data.tobytes())}"


class CorruptingWrapper(SegmenterBackend):
    """Wraps a backend and overwrites one target tile with a constant label.

    Reproduces the failure mode where a single sub-space model goes wrong,
    for studying how much of the damage fusion undoes.
    """

    def __init__(self, inner: SegmenterBackend, target_index: int, corruption_label: int):
        if not 0 <= corruption_label < inner.num_labels:
            raise SegmentationError(
                f"corruption label {corruption_label} out of range"
            )
        self.inner = inner
        self.target_index = int(target_index)
        self.corruption_label = int(corruption_label)
        self.num_labels = inner.num_labels

    def segment(self, tile_input, tile):
        if tile.index == self.target_index:
            data = np.full(tile_input.dims, self.corruption_label, dtype=np.uint16)
            return LabelVolume(tile_input.geometry, data, self.num_labels)
        return self.inner.segment(tile_input, tile)

    def descriptor(self):
        return (
            f"corrupt:{self.target_index}:{self.corruption_label}"
            f":{self.inner.descriptor()}"
        )


class ExternalProcessBackend(SegmenterBackend):
    """Runs one subprocess per tile through the file protocol above.

    ``command_template`` must contain the ``{input}`` and ``{output}``
    placeholders (``{spec}`` is optional).  Each invocation gets its own
    temporary workspace, so tiles may run concurrently.
    """

    def __init__(self, command_template: str, num_labels: int = DEFAULT_NUM_LABELS):
        if "{input}" not in command_template or "{output}" not in command_template:
            raise SegmentationError(
                "command template must contain {input} and {output} placeholders"
            )
        self.command_template = command_template
        self.num_labels = int(num_labels)

    def segment(self, tile_input, tile):
        with tempfile.TemporaryDirectory(prefix=f"tile{tile.index:03d}_") as tmp:
            tmp = Path(tmp)
            input_path = tmp / "input.nii"
            output_path = tmp / "output.nii"
            spec_path = tmp / "tile.json"
            tio.write_nifti(tile_input, input_path)
            spec_path.write_text(
                json.dumps(
                    {
                        "origin": list(tile.origin),
                        "size": list(tile.size),
                        "index": tile.index,
                        "num_labels": self.num_labels,
                    }
                )
            )
            command = self.command_template.format(
                input=str(input_path), output=str(output_path), spec=str(spec_path)
            )
            proc = subprocess.run(
                shlex.split(command), capture_output=True, text=True
            )
            if proc.returncode != 0:
                raise SegmentationError(
                    f"backend exited {proc.returncode}: {proc.stderr.strip()[:500]}"
                )
            if not output_path.exists():
                raise SegmentationError("backend wrote no output file")
            try:
                out, _ = tio.read_nifti(
                    output_path, as_labels=True, num_labels=self.num_labels
                )
            except (tio.NiftiFormatError, ValueError) as exc:
                raise SegmentationError(f"malformed backend output: {exc}") from exc
        # the float32 srow in the output file cannot carry the exact affine;
        # dims are checked here, the exact input geometry is restored below
        if out.dims != tile_input.dims:
            raise SegmentationError(
                f"backend output dims {out.dims} != tile dims {tile_input.dims}"
            )
        return LabelVolume(tile_input.geometry, out.data, self.num_labels)

    def descriptor(self):
        return f"external:{self.command_template}:{self.num_labels}"


def segment_tile(
    backend: SegmenterBackend, tile_input: IntensityVolume, tile: TileSpec
) -> LabelVolume:
    """Run one tile through a backend and validate the contract."""
    if tile_input.dims != tile.size:
        raise SegmentationError(
            f"tile input dims {tile_input.dims} do not match tile size {tile.size}"
        )
    out = backend.segment(tile_input, tile)
    if not isinstance(out, LabelVolume):
        raise SegmentationError("backend returned a non-label volume")
    if out.dims != tile_input.dims:
        raise SegmentationError(
            f"backend output dims {out.dims} != tile dims {tile_input.dims}"
        )
    if not out.geometry.matches(tile_input.geometry, tol=1e-6):
        raise SegmentationError("backend changed the tile's world geometry")
    if int(out.data.max(initial=0)) >= backend.num_labels:
        raise SegmentationError("backend produced labels out of range")
    return out


def segment_all(
    backend: SegmenterBackend,
    atlas_vol: IntensityVolume,
    grid: TileGrid,
    jobs: int = 1,
    on_tile_failure: str = "abort",
) -> list[LabelVolume]:
    """Segment every tile of ``atlas_vol``, in fixed grid order.

    Tiles are independent; with ``jobs > 1`` they run on a thread pool and
    the result is identical to the sequential run.  A failing tile aborts
    the whole run unless ``on_tile_failure="background"``, which substitutes
    an all-background tile and warns.
    """
    if atlas_vol.dims != grid.atlas_dims:
        raise SegmentationError(
            f"volume dims {atlas_vol.dims} do not match grid dims {grid.atlas_dims}"
        )
    if on_tile_failure not in ("abort", "background"):
        raise SegmentationError(f"unknown failure policy {on_tile_failure!r}")

    def run_one(tile: TileSpec) -> LabelVolume:
        tile_input = extract_tile(atlas_vol, tile)
        try:
            return segment_tile(backend, tile_input, tile)
        except Exception as exc:
            if on_tile_failure == "background":
                warnings.warn(
                    f"tile {tile.index} failed ({exc}); substituting background",
                    stacklevel=2,
                )
                data = np.zeros(tile_input.dims, dtype=np.uint16)
                return LabelVolume(tile_input.geometry, data, backend.num_labels)
            raise SegmentationError(f"tile {tile.index}: {exc}") from exc

    if jobs <= 1:
        return [run_one(t) for t in grid.tiles]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_one, grid.tiles))


def parse_backend_spec(spec: str, num_labels: int = DEFAULT_NUM_LABELS) -> SegmenterBackend:
    """Build a backend from a CLI spec string.

    Forms: ``constant:<label>``, ``prior:<labels.nii>``,
    ``external:<command template>``.
    """
    kind, sep, rest = spec.partition(":")
    if kind == "constant":
        return ConstantOracle(int(rest or 0), num_labels)
    if kind == "prior":
        if not rest:
            raise SegmentationError("prior backend needs a label volume path")
        prior, _ = tio.read_nifti(rest, as_labels=True, num_labels=num_labels)
        return AtlasPriorOracle(prior)
    if kind == "external":
        if not rest:
            raise SegmentationError("external backend needs a command template")
        return ExternalProcessBackend(rest, num_labels)
    raise SegmentationError(f"unknown backend spec {spec!r}")
