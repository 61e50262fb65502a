"""Tests for the raster, checkpoint, PLY and manifest readers and writers."""

import struct
import tempfile
from collections import OrderedDict
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from dusty_desk.errors import FormatError
from dusty_desk.models import Checkpoint, PointCloud, RasterMap, RunManifest
from dusty_desk.parser import (
    RASTER_HEADER,
    load_checkpoint,
    load_clouds,
    load_manifest,
    load_raster,
    load_raster_batch,
    load_rasters,
    parse_ply,
)
from dusty_desk.writer import (
    probability_to_image,
    raster_to_image,
    save_checkpoint,
    save_png_grid,
    save_raster,
    save_raster_batch,
    write_manifest,
    write_ply,
)


def _raster(seed=0, shape=(4, 8)):
    rng = np.random.default_rng(seed)
    values = rng.uniform(-0.9, 1.0, shape).astype(np.float32)
    values[0, 0] = -1.0
    return RasterMap(values=values)


def test_raster_file_layout():
    """A raster file is a 22-byte header followed by row-major float32 values."""
    raster = _raster()
    with tempfile.NamedTemporaryFile(suffix=".dsty", delete=False) as f:
        temp_path = Path(f.name)

    try:
        save_raster(raster, temp_path)
        payload = temp_path.read_bytes()

        assert RASTER_HEADER.size == 22
        assert len(payload) == 22 + 4 * 32
        magic, version, height, width, _, _, drop = RASTER_HEADER.unpack_from(payload)
        assert (magic, version, height, width, drop) == (b"DSTY", 1, 4, 8, -1.0)
        first = struct.unpack_from("<f", payload, 22)[0]
        assert first == -1.0

        loaded = load_raster(temp_path)
        np.testing.assert_array_equal(loaded.values, raster.values)
        assert loaded.x_min_m == 0.9
        assert loaded.x_max_m == 120.0
    finally:
        temp_path.unlink()


def test_raster_batch_round_trip():
    """A batch keeps the order and content of its rasters."""
    rasters = [_raster(seed) for seed in range(3)]
    with tempfile.NamedTemporaryFile(suffix=".dstb", delete=False) as f:
        temp_path = Path(f.name)

    try:
        save_raster_batch(rasters, temp_path)
        loaded = load_raster_batch(temp_path)
        assert len(loaded) == 3
        for original, restored in zip(rasters, loaded):
            np.testing.assert_array_equal(original.values, restored.values)
        assert len(load_rasters(temp_path)) == 3
    finally:
        temp_path.unlink()


def test_load_rasters_accepts_single_file():
    """load_rasters falls back to a single raster file."""
    with tempfile.NamedTemporaryFile(suffix=".dsty", delete=False) as f:
        temp_path = Path(f.name)

    try:
        save_raster(_raster(), temp_path)
        assert len(load_rasters(temp_path)) == 1
    finally:
        temp_path.unlink()


@pytest.mark.parametrize(
    "mutate",
    [
        lambda b: b"XXXX" + b[4:],
        lambda b: b[:4] + struct.pack("<H", 9) + b[6:],
        lambda b: b[:-4],
        lambda b: b + b"\x00",
    ],
    ids=["magic", "version", "truncated", "trailing"],
)
def test_malformed_raster_raises(mutate):
    """Bad magic, version, length or trailing bytes are format errors."""
    with tempfile.NamedTemporaryFile(suffix=".dsty", delete=False) as f:
        temp_path = Path(f.name)

    try:
        save_raster(_raster(), temp_path)
        temp_path.write_bytes(mutate(temp_path.read_bytes()))
        with pytest.raises(FormatError):
            load_raster(temp_path)
    finally:
        temp_path.unlink()


def test_out_of_range_values_are_format_errors():
    """Values outside [-1, 1] in a file are rejected."""
    payload = RASTER_HEADER.pack(b"DSTY", 1, 1, 2, 0.9, 120.0, -1.0) + struct.pack("<2f", 0.0, 2.0)
    with tempfile.NamedTemporaryFile(suffix=".dsty", delete=False) as f:
        f.write(payload)
        temp_path = Path(f.name)

    try:
        with pytest.raises(FormatError):
            load_raster(temp_path)
    finally:
        temp_path.unlink()


def test_checkpoint_round_trip():
    """Header JSON and named arrays survive a save and load."""
    tensors = OrderedDict(
        [
            ("generator.w", np.arange(6, dtype=np.float32).reshape(2, 3)),
            ("generator.scalar", np.array(2.5, dtype=np.float32)),
        ]
    )
    checkpoint = Checkpoint(header={"step": 12, "config": {"variant": "dusty1"}}, tensors=tensors)
    with tempfile.NamedTemporaryFile(suffix=".ckpt", delete=False) as f:
        temp_path = Path(f.name)

    try:
        save_checkpoint(checkpoint, temp_path)
        loaded = load_checkpoint(temp_path)
        assert loaded.step == 12
        assert loaded.header["config"]["variant"] == "dusty1"
        assert list(loaded.tensors) == ["generator.w", "generator.scalar"]
        np.testing.assert_array_equal(loaded.group("generator")["w"], tensors["generator.w"])
        assert loaded.tensors["generator.scalar"].shape == ()
    finally:
        temp_path.unlink()


def test_truncated_checkpoint_raises():
    """A checkpoint cut short is a format error."""
    checkpoint = Checkpoint(header={"step": 1}, tensors={"a.b": np.ones(4, dtype=np.float32)})
    with tempfile.NamedTemporaryFile(suffix=".ckpt", delete=False) as f:
        temp_path = Path(f.name)

    try:
        save_checkpoint(checkpoint, temp_path)
        temp_path.write_bytes(temp_path.read_bytes()[:-3])
        with pytest.raises(FormatError):
            load_checkpoint(temp_path)
    finally:
        temp_path.unlink()


def test_ply_round_trip():
    """write_ply output is read back with six-decimal precision."""
    cloud = PointCloud(points=[[1.0, 2.0, 3.0], [-4.5, 0.25, 10.125]])
    with tempfile.TemporaryDirectory() as directory:
        path = Path(directory) / "cloud.ply"
        write_ply(cloud, path)
        assert path.read_text().startswith("ply\nformat ascii 1.0\nelement vertex 2\n")

        loaded = parse_ply(path)
        np.testing.assert_allclose(loaded.points, cloud.points, atol=1e-6)
        assert len(load_clouds(Path(directory))) == 1


def test_ply_with_extra_properties():
    """Extra vertex properties are ignored; x/y/z are picked by name."""
    text = "\n".join(
        [
            "ply",
            "format ascii 1.0",
            "element vertex 1",
            "property float intensity",
            "property float x",
            "property float y",
            "property float z",
            "end_header",
            "0.5 1 2 3",
        ]
    )
    with tempfile.NamedTemporaryFile(mode="w", suffix=".ply", delete=False) as f:
        f.write(text)
        temp_path = Path(f.name)

    try:
        np.testing.assert_array_equal(parse_ply(temp_path).points, [[1.0, 2.0, 3.0]])
    finally:
        temp_path.unlink()


def test_binary_ply_rejected():
    """Only ASCII PLY is supported."""
    with tempfile.NamedTemporaryFile(mode="w", suffix=".ply", delete=False) as f:
        f.write("ply\nformat binary_little_endian 1.0\nelement vertex 0\nend_header\n")
        temp_path = Path(f.name)

    try:
        with pytest.raises(FormatError):
            parse_ply(temp_path)
    finally:
        temp_path.unlink()


def test_empty_cloud_directory_raises():
    """A directory without PLY files cannot be loaded."""
    with tempfile.TemporaryDirectory() as directory:
        with pytest.raises(FormatError):
            load_clouds(Path(directory))


def test_png_grid():
    """Images are tiled with a one-pixel white gap."""
    a = raster_to_image(np.array([[-1.0, 1.0]]))
    b = probability_to_image(np.array([[0.0, 0.5]]))
    np.testing.assert_array_equal(a, [[0, 255]])
    np.testing.assert_array_equal(b, [[0, 128]])

    with tempfile.TemporaryDirectory() as directory:
        path = Path(directory) / "grid.png"
        save_png_grid([[a, b], [b]], path)
        with Image.open(path) as image:
            pixels = np.asarray(image)
        assert pixels.shape == (3, 5)
        assert pixels[1, 0] == 255
        np.testing.assert_array_equal(pixels[2, :2], [0, 128])


def test_manifest_round_trip():
    """Manifests are JSON documents that validate on load."""
    manifest = RunManifest(
        command="synth",
        argv=["synth", "--count", "2"],
        seeds={"seed": 0},
        version="0.1.0",
        started_at="2024-01-01T00:00:00Z",
    )
    with tempfile.TemporaryDirectory() as directory:
        path = Path(directory) / "manifest.json"
        write_manifest(manifest, path)
        assert load_manifest(path) == manifest

        path.write_text("{not json")
        with pytest.raises(FormatError):
            load_manifest(path)
