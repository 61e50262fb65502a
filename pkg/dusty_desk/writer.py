"""Writers for raster, raster batch, checkpoint, PLY, PNG and manifest files."""

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, List, Mapping, Sequence

import numpy as np
from PIL import Image

from .constants import (
    CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
    RASTER_BATCH_MAGIC,
    RASTER_MAGIC,
    RASTER_VERSION,
)
from .errors import FormatError
from .models import Checkpoint, PointCloud, RasterMap, RunManifest
from .parser import BATCH_HEADER, CHECKPOINT_HEADER, RASTER_HEADER


def _atomic_write(output_path: Path, payload: bytes) -> None:
    """Write to a temp file in the same directory, then rename over the target."""
    output_path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=output_path.parent, prefix=f".{output_path.name}.")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_name, output_path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


class RasterWriter:
    """Writer for single-raster and batch raster files."""

    def encode(self, raster: RasterMap) -> bytes:
        """One raster record: header then row-major little-endian float32 values."""
        height, width = raster.shape
        if height > 0xFFFF or width > 0xFFFF:
            raise FormatError(f"raster {raster.shape} too large for the u16 header")
        header = RASTER_HEADER.pack(
            RASTER_MAGIC,
            RASTER_VERSION,
            height,
            width,
            raster.x_min_m,
            raster.x_max_m,
            raster.drop_value,
        )
        return header + raster.values.astype("<f4").tobytes()

    def write_raster(self, raster: RasterMap, output_path: Path) -> None:
        _atomic_write(Path(output_path), self.encode(raster))

    def write_batch(self, rasters: Sequence[RasterMap], output_path: Path) -> None:
        """Count header followed by concatenated raster records."""
        parts: List[bytes] = [BATCH_HEADER.pack(RASTER_BATCH_MAGIC, RASTER_VERSION, len(rasters))]
        parts.extend(self.encode(raster) for raster in rasters)
        _atomic_write(Path(output_path), b"".join(parts))


class CheckpointWriter:
    """Writer for checkpoint archives."""

    def encode(self, checkpoint: Checkpoint) -> bytes:
        header = json.dumps(checkpoint.header, sort_keys=True).encode("utf-8")
        parts: List[bytes] = [
            CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)),
            header,
            struct.pack("<I", len(checkpoint.tensors)),
        ]
        for name, value in checkpoint.tensors.items():
            array = np.asarray(value, dtype="<f4")
            encoded = name.encode("utf-8")
            parts.append(struct.pack("<H", len(encoded)))
            parts.append(encoded)
            parts.append(struct.pack("<B", array.ndim))
            parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
            parts.append(np.ascontiguousarray(array).tobytes())
        return b"".join(parts)

    def write_checkpoint(self, checkpoint: Checkpoint, output_path: Path) -> None:
        _atomic_write(Path(output_path), self.encode(checkpoint))


def save_raster(raster: RasterMap, output_path: Path) -> None:
    """Convenience function to write a single raster file."""
    RasterWriter().write_raster(raster, output_path)


def save_raster_batch(rasters: Sequence[RasterMap], output_path: Path) -> None:
    """Convenience function to write a batch raster file."""
    RasterWriter().write_batch(rasters, output_path)


def save_checkpoint(checkpoint: Checkpoint, output_path: Path) -> None:
    """Convenience function to write a checkpoint archive atomically."""
    CheckpointWriter().write_checkpoint(checkpoint, output_path)


def write_ply(cloud: PointCloud, output_path: Path) -> None:
    """ASCII PLY with float x/y/z vertex properties."""
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    lines.extend(f"{x:.6f} {y:.6f} {z:.6f}" for x, y, z in cloud.points)
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    output_path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def raster_to_image(values: np.ndarray, drop_value: float = -1.0) -> np.ndarray:
    """Inverse depth [-1, 1] -> uint8 [0, 255]; drops are black."""
    values = np.asarray(values, dtype=np.float64)
    image = np.round((np.clip(values, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)
    image[values == np.float32(drop_value)] = 0
    return image


def probability_to_image(values: np.ndarray) -> np.ndarray:
    """Probability map [0, 1] -> uint8 [0, 255]."""
    return np.round(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 255.0).astype(
        np.uint8
    )


def save_png_grid(rows: Iterable[Sequence[np.ndarray]], output_path: Path, gap: int = 1) -> None:
    """Tile uint8 images into an 8-bit grayscale PNG, one list per grid row."""
    grid_rows = [list(row) for row in rows]
    if not grid_rows or not grid_rows[0]:
        raise FormatError("save_png_grid needs at least one image")
    height, width = grid_rows[0][0].shape
    columns = max(len(row) for row in grid_rows)
    canvas = np.full(
        (len(grid_rows) * (height + gap) - gap, columns * (width + gap) - gap),
        255,
        dtype=np.uint8,
    )
    for r, row in enumerate(grid_rows):
        for c, image in enumerate(row):
            top, left = r * (height + gap), c * (width + gap)
            canvas[top : top + height, left : left + width] = image
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas).save(output_path)


def write_json(payload: Mapping[str, object], output_path: Path) -> None:
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    output_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_manifest(manifest: RunManifest, output_path: Path) -> None:
    _atomic_write(Path(output_path), (manifest.model_dump_json(indent=2) + "\n").encode("utf-8"))
