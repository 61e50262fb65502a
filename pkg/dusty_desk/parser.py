"""Readers for raster, raster batch, checkpoint, PLY and manifest files."""

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterator, List, Tuple

import numpy as np

from .constants import (
    CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
    RASTER_BATCH_MAGIC,
    RASTER_MAGIC,
    RASTER_VERSION,
)
from .errors import FormatError
from .models import Checkpoint, PointCloud, RasterMap, RunManifest

RASTER_HEADER = struct.Struct("<4sHHHfff")
BATCH_HEADER = struct.Struct("<4sHI")
CHECKPOINT_HEADER = struct.Struct("<4sHI")


def _decimal(value: float) -> float:
    """Undo float32 storage for header constants (0.9 stays 0.9)."""
    return float(str(np.float32(value)))


class RasterParser:
    """Parser for single-raster and batch raster files."""

    def parse_bytes(self, buffer: bytes, offset: int = 0) -> Tuple[RasterMap, int]:
        """Decode one raster record at ``offset``; returns it and the next offset."""
        end = offset + RASTER_HEADER.size
        if len(buffer) < end:
            raise FormatError("truncated raster header")
        magic, version, height, width, x_min, x_max, drop = RASTER_HEADER.unpack_from(
            buffer, offset
        )
        if magic != RASTER_MAGIC:
            raise FormatError(f"bad raster magic {magic!r}")
        if version != RASTER_VERSION:
            raise FormatError(f"unsupported raster version {version}")

        count = height * width
        payload_end = end + 4 * count
        if len(buffer) < payload_end:
            raise FormatError(
                f"truncated raster payload: need {4 * count} bytes, have {len(buffer) - end}"
            )
        values = np.frombuffer(buffer, dtype="<f4", count=count, offset=end)
        try:
            raster = RasterMap(
                values=values.reshape(height, width).astype(np.float32),
                drop_value=_decimal(drop),
                x_min_m=_decimal(x_min),
                x_max_m=_decimal(x_max),
            )
        except ValueError as exc:
            raise FormatError(f"invalid raster contents: {exc}") from exc
        return raster, payload_end

    def parse_file(self, file_path: Path) -> RasterMap:
        """Parse a single-raster file."""
        buffer = Path(file_path).read_bytes()
        raster, end = self.parse_bytes(buffer)
        if end != len(buffer):
            raise FormatError(f"{file_path}: {len(buffer) - end} trailing bytes")
        return raster

    def iter_batch(self, file_path: Path) -> Iterator[RasterMap]:
        """Yield every raster of a batch file in order."""
        buffer = Path(file_path).read_bytes()
        if len(buffer) < BATCH_HEADER.size:
            raise FormatError(f"{file_path}: truncated batch header")
        magic, version, count = BATCH_HEADER.unpack_from(buffer, 0)
        if magic != RASTER_BATCH_MAGIC:
            raise FormatError(f"{file_path}: bad batch magic {magic!r}")
        if version != RASTER_VERSION:
            raise FormatError(f"{file_path}: unsupported batch version {version}")

        offset = BATCH_HEADER.size
        for _ in range(count):
            raster, offset = self.parse_bytes(buffer, offset)
            yield raster
        if offset != len(buffer):
            raise FormatError(f"{file_path}: {len(buffer) - offset} trailing bytes")


class CheckpointParser:
    """Parser for checkpoint archives."""

    def parse_file(self, file_path: Path) -> Checkpoint:
        buffer = Path(file_path).read_bytes()
        if len(buffer) < CHECKPOINT_HEADER.size:
            raise FormatError(f"{file_path}: truncated checkpoint header")
        magic, version, header_len = CHECKPOINT_HEADER.unpack_from(buffer, 0)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{file_path}: bad checkpoint magic {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{file_path}: unsupported checkpoint version {version}")

        offset = CHECKPOINT_HEADER.size
        header_bytes = self._take(buffer, offset, header_len)
        offset += header_len
        try:
            header = json.loads(header_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{file_path}: corrupt checkpoint header ({exc})") from exc

        (count,) = struct.unpack("<I", self._take(buffer, offset, 4))
        offset += 4
        tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for _ in range(count):
            name, array, offset = self._parse_record(buffer, offset)
            tensors[name] = array
        if offset != len(buffer):
            raise FormatError(f"{file_path}: {len(buffer) - offset} trailing bytes")
        return Checkpoint(header=header, tensors=tensors)

    def _take(self, buffer: bytes, offset: int, size: int) -> bytes:
        if offset + size > len(buffer):
            raise FormatError("truncated checkpoint record")
        return buffer[offset : offset + size]

    def _parse_record(self, buffer: bytes, offset: int) -> Tuple[str, np.ndarray, int]:
        (name_len,) = struct.unpack("<H", self._take(buffer, offset, 2))
        offset += 2
        name = self._take(buffer, offset, name_len).decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack("<B", self._take(buffer, offset, 1))
        offset += 1
        shape = struct.unpack(f"<{ndim}I", self._take(buffer, offset, 4 * ndim))
        offset += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        payload = self._take(buffer, offset, 4 * count)
        offset += 4 * count
        array = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
        return name, array, offset


def parse_ply(file_path: Path) -> PointCloud:
    """Read an ASCII PLY file with x/y/z vertex properties."""
    lines = Path(file_path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{file_path}: not a PLY file")

    vertex_count = None
    properties: List[str] = []
    body_start = None
    in_vertex = False
    for number, line in enumerate(lines[1:], start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1:2] != ["ascii"]:
            raise FormatError(f"{file_path}: only ASCII PLY is supported")
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                vertex_count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            properties.append(parts[-1])
        elif parts[0] == "end_header":
            body_start = number + 1
            break
    if vertex_count is None or body_start is None:
        raise FormatError(f"{file_path}: incomplete PLY header")
    if not {"x", "y", "z"} <= set(properties):
        raise FormatError(f"{file_path}: PLY vertices need x, y and z")

    rows = lines[body_start : body_start + vertex_count]
    if len(rows) < vertex_count:
        raise FormatError(f"{file_path}: expected {vertex_count} vertices, found {len(rows)}")
    columns = [properties.index(axis) for axis in ("x", "y", "z")]
    try:
        table = np.array([[float(v) for v in row.split()] for row in rows], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{file_path}: bad vertex line ({exc})") from exc
    if vertex_count == 0:
        return PointCloud(points=np.zeros((0, 3)))
    return PointCloud(points=table[:, columns])


def load_raster(file_path: Path) -> RasterMap:
    """Convenience function to read a single raster file."""
    return RasterParser().parse_file(file_path)


def iter_raster_batch(file_path: Path) -> Iterator[RasterMap]:
    return RasterParser().iter_batch(file_path)


def load_raster_batch(file_path: Path) -> List[RasterMap]:
    """Convenience function to read every raster of a batch file."""
    return list(RasterParser().iter_batch(file_path))


def load_rasters(file_path: Path) -> List[RasterMap]:
    """Read either a batch file or a single raster file, by magic."""
    with open(file_path, "rb") as handle:
        magic = handle.read(4)
    if magic == RASTER_BATCH_MAGIC:
        return load_raster_batch(file_path)
    return [load_raster(file_path)]


def load_checkpoint(file_path: Path) -> Checkpoint:
    """Convenience function to read a checkpoint archive."""
    return CheckpointParser().parse_file(file_path)


def load_clouds(directory: Path) -> List[PointCloud]:
    """Every ``*.ply`` file of a directory, in name order."""
    files = sorted(Path(directory).glob("*.ply"))
    if not files:
        raise FormatError(f"{directory}: no .ply files")
    return [parse_ply(path) for path in files]


def load_manifest(file_path: Path) -> RunManifest:
    try:
        return RunManifest.model_validate_json(Path(file_path).read_text(encoding="utf-8"))
    except ValueError as exc:
        raise FormatError(f"{file_path}: invalid manifest ({exc})") from exc
