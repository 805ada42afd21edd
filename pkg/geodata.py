"""
Spatial data types and readers/writers for every external format the
pipeline touches: ESRI ASCII grids, LAS / CSV point clouds and GeoJSON.

Linear units are feet and areas are acres throughout. Grids are stored
bottom-up, so (row 0, col 0) is the lower-left cell.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import laspy
import numpy as np
import pandas as pd
from shapely.geometry import box, mapping
from shapely.geometry.polygon import orient
from shapely.ops import unary_union

from errors import (
    CapabilityError,
    ConsistencyError,
    DimensionError,
    DomainError,
    ExtentError,
    FormatError,
)
from utils import SQFT_PER_ACRE, relative_difference

logger = logging.getLogger('efi.geodata')

GROUND_CLASS = 2
DEFAULT_NODATA = -9999.0
POINT_CSV_COLUMNS = ("x", "y", "z", "return_number", "classification")
SUPPORTED_POINT_FORMATS = (0, 1, 2, 3)
SUPPORTED_LAS_MINOR_VERSIONS = (2, 3, 4)
AREA_TOLERANCE = 1e-9

_REQUIRED_HEADER_KEYS = ("ncols", "nrows", "cellsize")
_KNOWN_HEADER_KEYS = (
    "ncols", "nrows", "xllcorner", "yllcorner", "xllcenter", "yllcenter",
    "cellsize", "nodata_value",
)


class CellIndex(NamedTuple):
    row: int
    col: int


@dataclass(frozen=True)
class GridFrame:
    """Geometry shared by rasters and tessellations: square cells from a lower-left origin."""

    ncols: int
    nrows: int
    x_origin: float
    y_origin: float
    cellsize: float

    def __post_init__(self):
        if self.ncols < 1 or self.nrows < 1:
            raise DimensionError(f"Grid must be at least 1x1, got {self.nrows}x{self.ncols}")
        if not self.cellsize > 0:
            raise DomainError(f"cellsize must be positive, got {self.cellsize}")

    @property
    def extent(self):
        return (
            self.x_origin,
            self.y_origin,
            self.x_origin + self.ncols * self.cellsize,
            self.y_origin + self.nrows * self.cellsize,
        )

    @property
    def cell_count(self):
        return self.nrows * self.ncols

    def header(self):
        return (self.ncols, self.nrows, self.x_origin, self.y_origin, self.cellsize)

    def contains(self, x, y):
        xmin, ymin, xmax, ymax = self.extent
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return (x >= xmin) & (x <= xmax) & (y >= ymin) & (y <= ymax)

    def cell_of(self, x, y):
        """Row/col of every (x, y); points on the far edges land in the last cell."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        outside = ~self.contains(x, y)
        if np.any(outside):
            raise ExtentError(f"{int(outside.sum())} points fall outside grid extent {self.extent}")
        cols = np.minimum(((x - self.x_origin) // self.cellsize).astype(int), self.ncols - 1)
        rows = np.minimum(((y - self.y_origin) // self.cellsize).astype(int), self.nrows - 1)
        return rows, cols

    def cell_centers(self):
        xs = self.x_origin + (np.arange(self.ncols) + 0.5) * self.cellsize
        ys = self.y_origin + (np.arange(self.nrows) + 0.5) * self.cellsize
        return np.meshgrid(xs, ys)


@dataclass(frozen=True)
class RasterGrid(GridFrame):
    nodata: float = DEFAULT_NODATA
    values: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        super().__post_init__()
        if self.values is None:
            raise DimensionError("Grid has no values")
        values = np.array(self.values, dtype=float).reshape(-1)
        if values.size != self.ncols * self.nrows:
            raise DimensionError(
                f"Grid has {values.size} values, expected {self.ncols * self.nrows}"
            )
        values = values.reshape(self.nrows, self.ncols)
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def nodata_mask(self):
        return self.values == self.nodata

    def with_values(self, values):
        return RasterGrid(self.ncols, self.nrows, self.x_origin, self.y_origin,
                          self.cellsize, self.nodata, values)


@dataclass(frozen=True)
class PointCloud:
    x: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    z: np.ndarray = field(repr=False)
    return_number: np.ndarray = field(repr=False)
    classification: np.ndarray = field(repr=False)

    def __post_init__(self):
        arrays = {}
        for name in ("x", "y", "z"):
            arrays[name] = np.array(getattr(self, name), dtype=float).reshape(-1)
        for name in ("return_number", "classification"):
            arrays[name] = np.array(getattr(self, name), dtype=np.int64).reshape(-1)
        sizes = {a.size for a in arrays.values()}
        if len(sizes) > 1:
            raise ConsistencyError("Point cloud columns have different lengths")
        for name in ("x", "y", "z"):
            if not np.all(np.isfinite(arrays[name])):
                raise DomainError(f"Point cloud has non-finite {name} coordinates")
        if arrays["return_number"].size and arrays["return_number"].min() < 1:
            raise DomainError("return_number must be >= 1")
        for name, arr in arrays.items():
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def __len__(self):
        return int(self.x.size)

    @property
    def bounds(self):
        if len(self) == 0:
            return None
        return (float(self.x.min()), float(self.y.min()), float(self.x.max()), float(self.y.max()))

    @property
    def is_ground(self):
        return self.classification == GROUND_CLASS

    @property
    def is_first_return(self):
        return self.return_number == 1

    def with_z(self, z):
        return PointCloud(self.x, self.y, z, self.return_number, self.classification)

    def subset(self, mask):
        return PointCloud(self.x[mask], self.y[mask], self.z[mask],
                          self.return_number[mask], self.classification[mask])

    @classmethod
    def empty(cls):
        return cls([], [], [], [], [])


@dataclass(frozen=True)
class PolygonRecord:
    id: int
    cell_members: frozenset
    area: float
    properties: dict = field(default_factory=dict)
    cell_acres: Optional[float] = None

    def __post_init__(self):
        if not self.cell_members:
            raise DomainError(f"Polygon {self.id} has no member cells")
        if not self.area > 0:
            raise DomainError(f"Polygon {self.id} has nonpositive area {self.area}")
        if self.cell_acres is not None:
            self.check_area(self.cell_acres)

    def check_area(self, cell_acres):
        """Area must be |cell_members| x cell_acres within 1e-9 relative"""
        expected = len(self.cell_members) * cell_acres
        if relative_difference(self.area, expected) > AREA_TOLERANCE:
            raise DomainError(
                f"Polygon {self.id} area {self.area!r} does not match "
                f"{len(self.cell_members)} cells of {cell_acres!r} ac"
            )
        return self


def cell_area(cellsize):
    """Area in acres of a square cell with the given side in feet"""
    if not cellsize > 0:
        raise DomainError(f"cellsize must be positive, got {cellsize}")
    return cellsize * cellsize / SQFT_PER_ACRE


# ---------------------------------------------------------------------------
# ESRI ASCII grid

def _parse_header_value(key, raw):
    try:
        return float(raw)
    except ValueError:
        raise FormatError(f"Header key '{key}' has non-numeric value '{raw}'")


def read_ascii_grid(path):
    with open(path, "r") as f:
        lines = [line.strip() for line in f.read().splitlines()]
    lines = [line for line in lines if line]

    header = {}
    body_start = 0
    for i, line in enumerate(lines):
        tokens = line.split()
        if not tokens[0][0].isalpha():
            body_start = i
            break
        key = tokens[0].lower()
        if key not in _KNOWN_HEADER_KEYS:
            raise FormatError(f"Unknown header key '{tokens[0]}' in {path}")
        if len(tokens) != 2:
            raise FormatError(f"Header key '{tokens[0]}' must have exactly one value")
        header[key] = _parse_header_value(tokens[0], tokens[1])
    else:
        body_start = len(lines)

    for key in _REQUIRED_HEADER_KEYS:
        if key not in header:
            raise FormatError(f"Header key '{key}' missing in {path}")
    ncols, nrows, cellsize = int(header["ncols"]), int(header["nrows"]), header["cellsize"]
    if ncols != header["ncols"] or nrows != header["nrows"] or ncols < 1 or nrows < 1:
        raise FormatError(f"Header key 'ncols'/'nrows' must be positive integers in {path}")

    if "xllcorner" in header and "yllcorner" in header:
        x_origin, y_origin = header["xllcorner"], header["yllcorner"]
    elif "xllcenter" in header and "yllcenter" in header:
        x_origin = header["xllcenter"] - cellsize / 2.0
        y_origin = header["yllcenter"] - cellsize / 2.0
    else:
        missing = "xllcorner" if "xllcorner" not in header else "yllcorner"
        raise FormatError(f"Header key '{missing}' missing in {path}")
    nodata = header.get("nodata_value", DEFAULT_NODATA)

    body = lines[body_start:]
    if len(body) != nrows:
        raise DimensionError(f"{path}: expected {nrows} data rows, found {len(body)}")
    rows = []
    for offset, line in enumerate(body):
        tokens = line.split()
        if len(tokens) != ncols:
            raise DimensionError(
                f"{path} line {body_start + offset + 1}: expected {ncols} values, found {len(tokens)}"
            )
        try:
            rows.append([float(t) for t in tokens])
        except ValueError:
            raise FormatError(f"{path} line {body_start + offset + 1}: non-numeric value")

    values = np.flipud(np.array(rows, dtype=float))
    return RasterGrid(ncols, nrows, x_origin, y_origin, cellsize, nodata, values)


def write_ascii_grid(grid, path, decimals=6):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fmt = f"%.{decimals}f"
    with open(path, "w") as f:
        f.write(f"ncols         {grid.ncols}\n")
        f.write(f"nrows         {grid.nrows}\n")
        f.write(f"xllcorner     {float(grid.x_origin)!r}\n")
        f.write(f"yllcorner     {float(grid.y_origin)!r}\n")
        f.write(f"cellsize      {float(grid.cellsize)!r}\n")
        f.write(f"NODATA_value  {float(grid.nodata)!r}\n")
        np.savetxt(f, np.flipud(grid.values), fmt=fmt, delimiter=" ")


def load_bands(paths):
    """Read a named set of band grids and require them to share one header"""
    bands = {}
    reference = None
    for name in sorted(paths):
        path = paths[name]
        if not os.path.exists(path):
            raise ConsistencyError(f"Band '{name}' file not found: {path}")
        grid = read_ascii_grid(path)
        if reference is None:
            reference = (name, grid.header())
        elif grid.header() != reference[1]:
            raise ConsistencyError(
                f"Band '{name}' is not co-registered with band '{reference[0]}'"
            )
        bands[name] = grid
    return bands


# ---------------------------------------------------------------------------
# Point clouds

def _read_las(path):
    try:
        las = laspy.read(path)
    except laspy.errors.LaspyException as e:
        raise CapabilityError(f"Cannot read {path}: {e}")
    version = las.header.version
    if version.major != 1 or version.minor not in SUPPORTED_LAS_MINOR_VERSIONS:
        raise CapabilityError(f"LAS version {version.major}.{version.minor} is not supported")
    point_format = las.header.point_format.id
    if point_format not in SUPPORTED_POINT_FORMATS:
        raise CapabilityError(f"LAS point format {point_format} is not supported")
    return PointCloud(
        x=np.asarray(las.x, dtype=float),
        y=np.asarray(las.y, dtype=float),
        z=np.asarray(las.z, dtype=float),
        return_number=np.asarray(las.return_number, dtype=np.int64),
        classification=np.asarray(las.classification, dtype=np.int64),
    )


def _read_point_csv(path):
    try:
        frame = pd.read_csv(path, skipinitialspace=True, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as e:
        raise FormatError(f"{path}: {e}")
    frame.columns = [c.strip() for c in frame.columns]
    missing = [c for c in POINT_CSV_COLUMNS if c not in frame.columns]
    if missing:
        raise FormatError(f"{path}: missing point columns {missing}")
    frame = frame[list(POINT_CSV_COLUMNS)]
    if frame.empty:
        return PointCloud.empty()
    short = frame.isna().any(axis=1) | frame.apply(lambda col: col.str.strip() == "").any(axis=1)
    if short.any():
        line = int(np.flatnonzero(short.to_numpy())[0]) + 2
        raise FormatError(f"{path} line {line}: fewer than {len(POINT_CSV_COLUMNS)} fields")
    try:
        numeric = frame.apply(pd.to_numeric)
    except ValueError as e:
        raise FormatError(f"{path}: {e}")
    return PointCloud(
        x=numeric["x"].to_numpy(float),
        y=numeric["y"].to_numpy(float),
        z=numeric["z"].to_numpy(float),
        return_number=numeric["return_number"].to_numpy(np.int64),
        classification=numeric["classification"].to_numpy(np.int64),
    )


def read_point_cloud(path):
    suffix = os.path.splitext(path)[1].lower()
    if suffix == ".laz":
        raise CapabilityError(f"Compressed LAZ is not supported: {path}")
    if suffix == ".las":
        cloud = _read_las(path)
    else:
        cloud = _read_point_csv(path)
    logger.info(f"Read {len(cloud)} points from {path}")
    return cloud


def write_point_cloud(cloud, path, scale=0.01, creation_date=None):
    """LAS 1.2 (point format 0) for a .las path, CSV otherwise. A fixed creation_date makes LAS output reproducible"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    suffix = os.path.splitext(path)[1].lower()
    if suffix == ".las":
        header = laspy.LasHeader(version="1.2", point_format=0)
        header.scales = np.array([scale, scale, scale])
        if creation_date is not None:
            header.creation_date = creation_date
        if len(cloud):
            header.offsets = np.floor([cloud.x.min(), cloud.y.min(), cloud.z.min()])
        las = laspy.LasData(header)
        las.x = cloud.x
        las.y = cloud.y
        las.z = cloud.z
        las.return_number = cloud.return_number
        las.number_of_returns = cloud.return_number
        las.classification = cloud.classification
        las.write(path)
    else:
        decimals = max(0, int(round(-math.log10(scale))))
        frame = pd.DataFrame({
            "x": np.round(cloud.x, decimals),
            "y": np.round(cloud.y, decimals),
            "z": np.round(cloud.z, decimals),
            "return_number": cloud.return_number,
            "classification": cloud.classification,
        })
        frame.to_csv(path, index=False, float_format=f"%.{decimals}f")


# ---------------------------------------------------------------------------
# GeoJSON

def unit_outline(cell_members, frame):
    """Union outline of a set of cells; exterior rings counter-clockwise"""
    boxes = []
    for row, col in sorted(cell_members):
        if not (0 <= row < frame.nrows and 0 <= col < frame.ncols):
            raise ConsistencyError(
                f"Cell ({row}, {col}) lies outside the {frame.nrows}x{frame.ncols} tessellation"
            )
        x0 = frame.x_origin + col * frame.cellsize
        y0 = frame.y_origin + row * frame.cellsize
        boxes.append(box(x0, y0, x0 + frame.cellsize, y0 + frame.cellsize))
    outline = unary_union(boxes)
    if outline.geom_type == "MultiPolygon":
        return type(outline)([orient(part, 1.0) for part in outline.geoms])
    return orient(outline, 1.0)


def write_geojson(units, frame, path, metadata=None):
    """
    Write reporting units as a GeoJSON FeatureCollection.

    `frame` is the governing tessellation: anything exposing x_origin,
    y_origin, cellsize, nrows and ncols. Coordinates stay in its native
    planar feet.
    """
    acres = cell_area(frame.cellsize)
    features = []
    for unit in units:
        unit.check_area(acres)
        outline = unit_outline(unit.cell_members, frame)
        properties = {"unit_id": unit.id, "area_ac": unit.area}
        properties.update(unit.properties)
        features.append({
            "type": "Feature",
            "id": unit.id,
            "geometry": mapping(outline),
            "properties": properties,
        })
    collection = {"type": "FeatureCollection", "features": features}
    if metadata:
        collection["efi"] = metadata
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(collection, f)
    logger.info(f"Wrote {len(features)} features to {path}")
    return collection
