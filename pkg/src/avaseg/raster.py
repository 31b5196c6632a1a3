"""Georeferenced grid container with file I/O, cropping and 2x downsampling.

Rasters are immutable value objects: every operation returns a new Raster.
Values are float32, stored row-major with row 0 at the top; world
coordinates use the lower-left corner as origin, so the center of cell
(col, row) sits at

    x = x_origin + (col + 0.5) * cell_size
    y = y_origin + (nrows - row - 0.5) * cell_size

Two on-disk formats are supported: the ESRI ASCII grid (human-inspectable)
and a little-endian binary format (bit-exact round trips).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Raster",
    "GridGeometry",
    "RasterFormatError",
    "read_raster",
    "write_raster",
    "crop",
    "downsample2",
]

BINARY_MAGIC = b"RSTR"
BINARY_VERSION = 1
DEFAULT_NODATA = -9999.0

ASCII_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "NODATA_value")


class RasterFormatError(ValueError):
    """Raised when a raster file does not conform to its declared format."""


@dataclass(frozen=True)
class GridGeometry:
    """Grid shape and placement; two rasters are stackable iff geometries are equal."""

    ncols: int
    nrows: int
    x_origin: float
    y_origin: float
    cell_size: float

    def __post_init__(self):
        if self.ncols < 1 or self.nrows < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.ncols}x{self.nrows}")
        if self.cell_size <= 0:
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")

    def cell_center(self, col: int, row: int) -> tuple[float, float]:
        """World coordinates of the center of cell (col, row); row 0 is the top row."""
        x = self.x_origin + (col + 0.5) * self.cell_size
        y = self.y_origin + (self.nrows - row - 0.5) * self.cell_size
        return x, y


@dataclass(frozen=True)
class Raster:
    """A georeferenced grid of float32 values.

    ``values`` has shape (nrows, ncols) with row 0 at the top. ``nodata`` is
    a sentinel that producers may place in ``values`` to flag missing cells.
    """

    geometry: GridGeometry
    values: np.ndarray = field(repr=False)
    nodata: float = DEFAULT_NODATA

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float32)
        if vals.shape != (self.geometry.nrows, self.geometry.ncols):
            raise ValueError(
                f"values shape {vals.shape} does not match geometry "
                f"{self.geometry.nrows}x{self.geometry.ncols}"
            )
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def ncols(self) -> int:
        return self.geometry.ncols

    @property
    def nrows(self) -> int:
        return self.geometry.nrows

    @property
    def cell_size(self) -> float:
        return self.geometry.cell_size

    def nodata_mask(self) -> np.ndarray:
        """Boolean mask of cells equal to the nodata sentinel."""
        return self.values == np.float32(self.nodata)

    def with_values(self, values: np.ndarray, nodata: float | None = None) -> "Raster":
        """New raster on the same grid with different values."""
        return Raster(self.geometry, values, self.nodata if nodata is None else nodata)

    def same_grid(self, other: "Raster") -> bool:
        return self.geometry == other.geometry


def _require_same_grid(a: Raster, b: Raster, what: str) -> None:
    if a.geometry != b.geometry:
        raise ValueError(f"geometry mismatch for {what}: {a.geometry} vs {b.geometry}")


# ---------------------------------------------------------------------------
# ASCII grid format (ESRI layout)
# ---------------------------------------------------------------------------


def _format_value(v: float) -> str:
    """Shortest decimal string that round-trips to the same float32."""
    return np.format_float_positional(np.float32(v), unique=True, trim="-")


def _write_ascii(r: Raster, fh: io.TextIOBase) -> None:
    g = r.geometry
    fh.write(f"ncols {g.ncols}\n")
    fh.write(f"nrows {g.nrows}\n")
    fh.write(f"xllcorner {g.x_origin!r}\n")
    fh.write(f"yllcorner {g.y_origin!r}\n")
    fh.write(f"cellsize {g.cell_size!r}\n")
    fh.write(f"NODATA_value {_format_value(r.nodata)}\n")
    for row in r.values:
        fh.write(" ".join(_format_value(v) for v in row))
        fh.write("\n")


def _read_ascii(fh: io.TextIOBase, path: str) -> Raster:
    header: dict[str, float] = {}
    for i, key in enumerate(ASCII_HEADER_KEYS):
        line = fh.readline()
        parts = line.split()
        if len(parts) != 2 or parts[0].lower() != key.lower():
            raise RasterFormatError(
                f"{path}: malformed header line {i + 1}: expected '{key} <value>', got {line.strip()!r}"
            )
        try:
            header[key] = float(parts[1])
        except ValueError as exc:
            raise RasterFormatError(f"{path}: header line {i + 1}: bad number {parts[1]!r}") from exc

    ncols = int(header["ncols"])
    nrows = int(header["nrows"])
    tokens = fh.read().split()
    if len(tokens) != ncols * nrows:
        raise RasterFormatError(
            f"{path}: expected {ncols * nrows} values ({ncols}x{nrows}), found {len(tokens)}"
        )
    try:
        values = np.array(tokens, dtype=np.float64).astype(np.float32).reshape(nrows, ncols)
    except ValueError as exc:
        raise RasterFormatError(f"{path}: non-numeric cell value") from exc

    geom = GridGeometry(ncols, nrows, header["xllcorner"], header["yllcorner"], header["cellsize"])
    return Raster(geom, values, nodata=header["NODATA_value"])


# ---------------------------------------------------------------------------
# Binary grid format
# ---------------------------------------------------------------------------

_BIN_HEADER = struct.Struct("<4sIIIdddf")  # magic, version, ncols, nrows, xll, yll, cell, nodata


def _write_binary(r: Raster, fh: io.BufferedIOBase) -> None:
    g = r.geometry
    fh.write(
        _BIN_HEADER.pack(
            BINARY_MAGIC, BINARY_VERSION, g.ncols, g.nrows,
            g.x_origin, g.y_origin, g.cell_size, np.float32(r.nodata),
        )
    )
    fh.write(np.ascontiguousarray(r.values, dtype="<f4").tobytes())


def _read_binary(fh: io.BufferedIOBase, path: str) -> Raster:
    raw = fh.read(_BIN_HEADER.size)
    if len(raw) < _BIN_HEADER.size:
        raise RasterFormatError(f"{path}: truncated binary header ({len(raw)} bytes)")
    magic, version, ncols, nrows, xll, yll, cell, nodata = _BIN_HEADER.unpack(raw)
    if magic != BINARY_MAGIC:
        raise RasterFormatError(f"{path}: bad magic {magic!r}, expected {BINARY_MAGIC!r}")
    if version != BINARY_VERSION:
        raise RasterFormatError(f"{path}: unsupported version {version}")
    payload = fh.read(4 * ncols * nrows)
    if len(payload) != 4 * ncols * nrows:
        raise RasterFormatError(
            f"{path}: expected {ncols * nrows} float32 values, file holds {len(payload) // 4}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(nrows, ncols)
    geom = GridGeometry(ncols, nrows, xll, yll, cell)
    return Raster(geom, values, nodata=float(nodata))


# ---------------------------------------------------------------------------
# Public I/O entry points
# ---------------------------------------------------------------------------


def read_raster(path, format: str = "binary_grid") -> Raster:
    """Read a raster file; ``format`` is 'ascii_grid' or 'binary_grid'."""
    path = str(path)
    if format == "ascii_grid":
        with open(path, "r") as fh:
            return _read_ascii(fh, path)
    if format == "binary_grid":
        with open(path, "rb") as fh:
            return _read_binary(fh, path)
    raise ValueError(f"unknown raster format {format!r}")


def write_raster(r: Raster, path, format: str = "binary_grid") -> None:
    """Write a raster file; binary output is byte-reproducible."""
    path = str(path)
    if format == "ascii_grid":
        with open(path, "w", newline="\n") as fh:
            _write_ascii(r, fh)
    elif format == "binary_grid":
        with open(path, "wb") as fh:
            _write_binary(r, fh)
    else:
        raise ValueError(f"unknown raster format {format!r}")


def guess_format(path) -> str:
    """'ascii_grid' for .asc files, else 'binary_grid'."""
    return "ascii_grid" if str(path).endswith(".asc") else "binary_grid"


# ---------------------------------------------------------------------------
# Grid operations
# ---------------------------------------------------------------------------


def crop(r: Raster, col0: int, row0: int, width: int, height: int) -> Raster:
    """Sub-window of ``r``; the origin shifts consistently with removed margins."""
    g = r.geometry
    if col0 < 0 or row0 < 0 or width < 1 or height < 1 \
            or col0 + width > g.ncols or row0 + height > g.nrows:
        raise ValueError(
            f"crop window col={col0} row={row0} {width}x{height} outside grid {g.ncols}x{g.nrows}"
        )
    rows_below = g.nrows - (row0 + height)  # rows removed at the bottom raise y_origin
    geom = GridGeometry(
        width, height,
        g.x_origin + col0 * g.cell_size,
        g.y_origin + rows_below * g.cell_size,
        g.cell_size,
    )
    return Raster(geom, r.values[row0:row0 + height, col0:col0 + width].copy(), r.nodata)


def downsample2(r: Raster) -> Raster:
    """Halve resolution by 2x2 block mean; blocks containing nodata become nodata."""
    g = r.geometry
    if g.ncols % 2 or g.nrows % 2:
        raise ValueError(f"downsample2 needs even dimensions, got {g.ncols}x{g.nrows}")
    blocks = r.values.reshape(g.nrows // 2, 2, g.ncols // 2, 2).astype(np.float64)
    out = blocks.mean(axis=(1, 3)).astype(np.float32)
    bad = (r.values == np.float32(r.nodata)).reshape(g.nrows // 2, 2, g.ncols // 2, 2).any(axis=(1, 3))
    out[bad] = np.float32(r.nodata)
    geom = GridGeometry(g.ncols // 2, g.nrows // 2, g.x_origin, g.y_origin, g.cell_size * 2)
    return Raster(geom, out, r.nodata)
