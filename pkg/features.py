"""
Remote-sensing feature pool per analysis cell.

Terrain and canopy models are built from the classified point cloud;
every analysis cell then gets normalized-height statistics, strata
densities, a cover proxy, per-band summaries, spectral indices and
terrain summaries, always in the same name order.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from errors import ConsistencyError, DataError, DomainError, SchemaError
from geodata import CellIndex, RasterGrid
from utils import linear_quantile

logger = logging.getLogger('efi.features')

DEFAULT_STRATA = (0.0, 6.0, 16.0, 32.0, 64.0, 96.0)
DEFAULT_PERCENTILES = tuple(range(5, 100, 5))
DEFAULT_COVER_THRESHOLD = 6.0
EVI_DENOMINATOR_GUARD = 1e-6
DEFAULT_TPI_RADIUS = 3
FLAT_ASPECT = -1.0


@dataclass(frozen=True)
class StrataSpec:
    boundaries: tuple = DEFAULT_STRATA

    def __post_init__(self):
        bounds = tuple(float(b) for b in self.boundaries)
        if not bounds:
            raise DomainError("StrataSpec needs at least one boundary")
        if bounds[0] < 0:
            raise DomainError("First stratum boundary must be >= 0")
        if any(b1 <= b0 for b0, b1 in zip(bounds, bounds[1:])):
            raise DomainError(f"Stratum boundaries must be strictly ascending: {bounds}")
        object.__setattr__(self, "boundaries", bounds)

    def bin_names(self):
        names = []
        for lo, hi in zip(self.boundaries, self.boundaries[1:] + (math.inf,)):
            upper = "inf" if math.isinf(hi) else f"{hi:g}"
            names.append(f"strata_{lo:g}_{upper}")
        return names


@dataclass(frozen=True)
class FeatureVector:
    names: tuple
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        names = tuple(self.names)
        if len(set(names)) != len(names):
            raise SchemaError("Feature names must be unique")
        values = np.array(self.values, dtype=float).reshape(-1)
        if values.size != len(names):
            raise ConsistencyError("Feature values do not align with names")
        values.flags.writeable = False
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "values", values)

    def as_dict(self):
        return dict(zip(self.names, self.values.tolist()))


@dataclass
class CellCohort:
    """Everything observed inside one analysis cell."""

    heights: np.ndarray
    first_return: np.ndarray
    bands: dict
    elevations: np.ndarray
    slopes: np.ndarray
    northness: np.ndarray = field(default_factory=lambda: np.empty(0))
    eastness: np.ndarray = field(default_factory=lambda: np.empty(0))
    tpi: np.ndarray = field(default_factory=lambda: np.empty(0))

    @classmethod
    def empty(cls, band_names=()):
        nothing = np.empty(0)
        return cls(nothing, np.empty(0, dtype=bool), {b: nothing for b in band_names}, nothing, nothing)


# ---------------------------------------------------------------------------
# Terrain and canopy models

def _grid_shape(extent, cellsize):
    xmin, ymin, xmax, ymax = extent
    if not (xmax > xmin and ymax > ymin):
        raise DomainError(f"Degenerate extent {extent}")
    ncols = max(1, math.ceil((xmax - xmin) / cellsize - 1e-9))
    nrows = max(1, math.ceil((ymax - ymin) / cellsize - 1e-9))
    return nrows, ncols


def _fill_from_neighbours(values):
    """Fill NaN cells with the mean of their filled 8-neighbours, sweep by sweep."""
    values = values.copy()
    nrows, ncols = values.shape
    while np.isnan(values).any():
        filled = ~np.isnan(values)
        padded = np.pad(np.where(filled, values, 0.0), 1)
        padded_count = np.pad(filled.astype(float), 1)
        total = np.zeros_like(values)
        count = np.zeros_like(values)
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if dr == 0 and dc == 0:
                    continue
                total += padded[1 + dr:1 + dr + nrows, 1 + dc:1 + dc + ncols]
                count += padded_count[1 + dr:1 + dr + nrows, 1 + dc:1 + dc + ncols]
        fillable = ~filled & (count > 0)
        if not fillable.any():
            raise DataError("DTM holes cannot be reached from any ground cell")
        values[fillable] = total[fillable] / count[fillable]
    return values


def build_dtm(cloud, cellsize, extent):
    """Minimum ground-return elevation per cell, holes filled from neighbours"""
    nrows, ncols = _grid_shape(extent, cellsize)
    xmin, ymin = extent[0], extent[1]
    frame = RasterGrid(ncols, nrows, xmin, ymin, cellsize, values=np.zeros(nrows * ncols))

    ground = cloud.is_ground & frame.contains(cloud.x, cloud.y)
    if not ground.any():
        raise DataError("Point cloud has no ground-classified returns inside the extent")
    rows, cols = frame.cell_of(cloud.x[ground], cloud.y[ground])
    values = np.full((nrows, ncols), np.inf)
    np.minimum.at(values, (rows, cols), cloud.z[ground])
    values[np.isinf(values)] = np.nan
    holes = int(np.isnan(values).sum())
    values = _fill_from_neighbours(values)
    logger.info(f"Built {nrows}x{ncols} DTM at {cellsize} ft, filled {holes} empty cells")
    return frame.with_values(values)


def build_chm(cloud, dtm):
    rows, cols = dtm.cell_of(cloud.x, cloud.y)
    heights = cloud.z - dtm.values[rows, cols]
    chm = np.zeros((dtm.nrows, dtm.ncols))
    np.maximum.at(chm, (rows, cols), heights)
    return dtm.with_values(np.maximum(chm, 0.0))


def normalize_heights(cloud, dtm):
    rows, cols = dtm.cell_of(cloud.x, cloud.y)
    return cloud.with_z(np.maximum(0.0, cloud.z - dtm.values[rows, cols]))


def crop_to_grid(cloud, grid):
    """Drop the returns that fall outside `grid`"""
    inside = grid.contains(cloud.x, cloud.y)
    if inside.all():
        return cloud
    logger.warning(f"Dropping {int((~inside).sum())} returns outside the {grid.extent} terrain grid")
    return cloud.subset(inside)


def _terrain_gradient(dtm, what):
    if dtm.nrows < 2 or dtm.ncols < 2:
        raise DomainError(f"{what} needs a DTM of at least 2x2 cells")
    return np.gradient(dtm.values, dtm.cellsize)


def slope_grid(dtm):
    """Slope in degrees from central differences (one-sided at the edges)"""
    dz_dy, dz_dx = _terrain_gradient(dtm, "Slope")
    return dtm.with_values(np.degrees(np.arctan(np.hypot(dz_dx, dz_dy))))


def aspect_grid(dtm):
    """
    Downslope direction in degrees clockwise from north, in [0, 360).
    Cells with no gradient get FLAT_ASPECT.
    """
    dz_dy, dz_dx = _terrain_gradient(dtm, "Aspect")
    aspect = np.mod(np.degrees(np.arctan2(-dz_dx, -dz_dy)), 360.0)
    flat = (dz_dx == 0) & (dz_dy == 0)
    return dtm.with_values(np.where(flat, FLAT_ASPECT, aspect))


def aspect_components(aspect):
    """(northness, eastness) as cos/sin of the aspect; both 0 on flat cells"""
    aspect = np.asarray(aspect, dtype=float)
    radians = np.radians(aspect)
    flat = aspect == FLAT_ASPECT
    return np.where(flat, 0.0, np.cos(radians)), np.where(flat, 0.0, np.sin(radians))


def tpi_grid(dtm, radius=DEFAULT_TPI_RADIUS):
    """
    Topographic position index: each cell's elevation minus the mean of the
    other cells in its (2r+1) x (2r+1) window. Windows are clipped at the
    grid edge; a cell with no neighbours gets 0.
    """
    radius = int(radius)
    if radius < 1:
        raise DomainError(f"TPI radius must be >= 1 cell, got {radius}")
    values = dtm.values
    nrows, ncols = values.shape
    padded = np.pad(values, radius)
    padded_count = np.pad(np.ones_like(values), radius)
    total = np.zeros_like(values)
    count = np.zeros_like(values)
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            if dr == 0 and dc == 0:
                continue
            total += padded[radius + dr:radius + dr + nrows, radius + dc:radius + dc + ncols]
            count += padded_count[radius + dr:radius + dr + nrows, radius + dc:radius + dc + ncols]
    mean = np.divide(total, count, out=values.copy(), where=count > 0)
    return dtm.with_values(values - mean)


# ---------------------------------------------------------------------------
# Point metrics

def strata_densities(heights, spec):
    """Fraction of points per stratum; heights under the first boundary count in the first stratum"""
    heights = np.asarray(heights, dtype=float)
    nbins = len(spec.boundaries)
    if heights.size == 0:
        return [0.0] * nbins
    bins = np.searchsorted(spec.boundaries, heights, side="right") - 1
    counts = np.bincount(np.clip(bins, 0, nbins - 1), minlength=nbins)
    return (counts / heights.size).tolist()


def height_percentile(heights, p):
    return linear_quantile(heights, p)


def cover_proxy(heights, first_return_flags, threshold=DEFAULT_COVER_THRESHOLD):
    heights = np.asarray(heights, dtype=float)
    first = np.asarray(first_return_flags, dtype=bool)
    if heights.shape != first.shape:
        raise ConsistencyError("Heights and first-return flags differ in length")
    total = int(first.sum())
    if total == 0:
        return 0.0
    return 100.0 * int((heights[first] > threshold).sum()) / total


# ---------------------------------------------------------------------------
# Spectral indices

def ndvi(nir, red):
    nir = np.asarray(nir, dtype=float)
    red = np.asarray(red, dtype=float)
    total = nir + red
    safe = np.where(total == 0, 1.0, total)
    result = np.where(total == 0, 0.0, (nir - red) / safe)
    return float(result) if result.ndim == 0 else result


def evi(nir, red, blue):
    nir = np.asarray(nir, dtype=float)
    red = np.asarray(red, dtype=float)
    blue = np.asarray(blue, dtype=float)
    denominator = nir + 6.0 * red - 7.5 * blue + 1.0
    small = np.abs(denominator) < EVI_DENOMINATOR_GUARD
    denominator = np.where(small, np.where(denominator < 0, -EVI_DENOMINATOR_GUARD, EVI_DENOMINATOR_GUARD),
                           denominator)
    result = 2.5 * (nir - red) / denominator
    return float(result) if result.ndim == 0 else result


# ---------------------------------------------------------------------------
# Feature assembly

def _has_indices(band_names):
    names = set(band_names)
    return {"nir", "red"} <= names, {"nir", "red", "blue"} <= names


def feature_names(spec, percentiles, band_names):
    names = ["h_mean", "h_std", "h_max"]
    names += [f"h_p{int(p):02d}" if float(p).is_integer() else f"h_p{p:g}" for p in percentiles]
    names += spec.bin_names()
    names.append("cover")
    for band in band_names:
        names += [f"band_{band}_mean", f"band_{band}_std"]
    has_ndvi, has_evi = _has_indices(band_names)
    if has_ndvi:
        names.append("ndvi_mean")
    if has_evi:
        names.append("evi_mean")
    names += ["elev_mean", "slope_mean", "northness_mean", "eastness_mean", "tpi_mean"]
    return tuple(names)


def _mean(values):
    return float(np.mean(values)) if len(values) else 0.0


def _std(values):
    return float(np.std(values)) if len(values) else 0.0


def assemble_features(cohort, spec, percentiles, band_names, cover_threshold=DEFAULT_COVER_THRESHOLD):
    band_names = tuple(band_names)
    heights = np.asarray(cohort.heights, dtype=float)
    values = []
    if heights.size:
        values += [float(heights.mean()), float(heights.std()), float(heights.max())]
        if len(percentiles):
            values += np.percentile(heights, list(percentiles), method="linear").tolist()
    else:
        values += [0.0] * (3 + len(percentiles))
    values += strata_densities(heights, spec)
    values.append(cover_proxy(heights, cohort.first_return, cover_threshold))

    for band in band_names:
        pixels = cohort.bands.get(band, ())
        values += [_mean(pixels), _std(pixels)]
    has_ndvi, has_evi = _has_indices(band_names)
    if has_ndvi:
        nir, red = cohort.bands["nir"], cohort.bands["red"]
        values.append(_mean(ndvi(nir, red)) if len(nir) else 0.0)
    if has_evi:
        nir, red, blue = cohort.bands["nir"], cohort.bands["red"], cohort.bands["blue"]
        values.append(_mean(evi(nir, red, blue)) if len(nir) else 0.0)
    values += [_mean(cohort.elevations), _mean(cohort.slopes), _mean(cohort.northness), _mean(cohort.eastness),
               _mean(cohort.tpi)]

    return FeatureVector(feature_names(spec, percentiles, band_names), values)


@dataclass(frozen=True)
class FeatureTable:
    """Feature vectors for every analysis cell, one row per cell in row-major cell order."""

    cells: tuple
    names: tuple
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=float).reshape(len(self.cells), len(self.names))
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "cells", tuple(CellIndex(int(r), int(c)) for r, c in self.cells))

    def row_of(self):
        return {cell: i for i, cell in enumerate(self.cells)}

    def vector(self, i):
        return FeatureVector(self.names, self.values[i])

    def columns(self, names):
        index = {name: i for i, name in enumerate(self.names)}
        missing = [n for n in names if n not in index]
        if missing:
            raise SchemaError(f"Feature '{missing[0]}' is not present in the cell features")
        return self.values[:, [index[n] for n in names]]

    def to_csv(self, path):
        frame = pd.DataFrame(self.values, columns=list(self.names))
        frame.insert(0, "col", [c.col for c in self.cells])
        frame.insert(0, "row", [c.row for c in self.cells])
        frame.to_csv(path, index=False)

    @classmethod
    def read_csv(cls, path):
        frame = pd.read_csv(path)
        cells = list(zip(frame["row"].astype(int), frame["col"].astype(int)))
        names = [c for c in frame.columns if c not in ("row", "col")]
        return cls(tuple(cells), tuple(names), frame[names].to_numpy(float))


def pixel_cell_labels(grid, frame):
    """Flat analysis-cell index of every grid pixel centre, -1 outside the frame"""
    xs, ys = grid.cell_centers()
    inside = frame.contains(xs, ys)
    labels = np.full(xs.shape, -1, dtype=np.int64)
    if inside.any():
        rows, cols = frame.cell_of(xs[inside], ys[inside])
        labels[inside] = rows * frame.ncols + cols
    return labels


def _group_pixels(grid, frame):
    """Per analysis cell, the flat indices of the grid pixels it owns (nearest pixel when none)."""
    labels = pixel_cell_labels(grid, frame).reshape(-1)
    order = np.argsort(labels, kind="stable")
    sorted_labels = labels[order]
    starts = np.searchsorted(sorted_labels, np.arange(frame.cell_count), side="left")
    ends = np.searchsorted(sorted_labels, np.arange(frame.cell_count), side="right")

    groups = []
    cx, cy = frame.cell_centers()
    cx, cy = cx.reshape(-1), cy.reshape(-1)
    for cell in range(frame.cell_count):
        if ends[cell] > starts[cell]:
            groups.append(order[starts[cell]:ends[cell]])
        else:
            col = int(np.clip((cx[cell] - grid.x_origin) // grid.cellsize, 0, grid.ncols - 1))
            row = int(np.clip((cy[cell] - grid.y_origin) // grid.cellsize, 0, grid.nrows - 1))
            groups.append(np.array([row * grid.ncols + col]))
    return groups


def zonal_statistics(grid, frame):
    """Mean, std and pixel count of a raster over every analysis cell"""
    flat = grid.values.reshape(-1)
    valid = flat != grid.nodata
    means, stds, counts = [], [], []
    for pixels in _group_pixels(grid, frame):
        vals = flat[pixels][valid[pixels]]
        means.append(_mean(vals))
        stds.append(_std(vals))
        counts.append(vals.size)
    return np.array(means), np.array(stds), np.array(counts)


def build_feature_table(cloud, dtm, bands, frame, spec, percentiles,
                        cover_threshold=DEFAULT_COVER_THRESHOLD, tpi_radius=DEFAULT_TPI_RADIUS):
    """Bin points and pixels by analysis cell and assemble one feature vector per cell."""
    band_names = tuple(sorted(bands))
    normalized = normalize_heights(crop_to_grid(cloud, dtm), dtm)
    inside = frame.contains(normalized.x, normalized.y)
    if not inside.all():
        logger.warning(f"Ignoring {int((~inside).sum())} points outside the tessellation")
        normalized = normalized.subset(inside)

    rows, cols = frame.cell_of(normalized.x, normalized.y)
    point_cells = rows * frame.ncols + cols
    order = np.argsort(point_cells, kind="stable")
    sorted_cells = point_cells[order]
    cell_ids = np.arange(frame.cell_count)
    starts = np.searchsorted(sorted_cells, cell_ids, side="left")
    ends = np.searchsorted(sorted_cells, cell_ids, side="right")
    heights = normalized.z[order]
    first = normalized.is_first_return[order]

    if dtm.nrows >= 2 and dtm.ncols >= 2:
        slope_flat = slope_grid(dtm).values.reshape(-1)
        northness_flat, eastness_flat = aspect_components(aspect_grid(dtm).values.reshape(-1))
    else:
        slope_flat = northness_flat = eastness_flat = np.zeros(dtm.cell_count)
    tpi_flat = tpi_grid(dtm, tpi_radius).values.reshape(-1)
    terrain_groups = _group_pixels(dtm, frame)
    elevation_flat = dtm.values.reshape(-1)
    if band_names:
        band_groups = _group_pixels(bands[band_names[0]], frame)
        band_flat = {name: bands[name].values.reshape(-1) for name in band_names}

    cells, rows_out = [], []
    for cell in cell_ids:
        lo, hi = starts[cell], ends[cell]
        band_values = {}
        if band_names:
            pixels = band_groups[cell]
            keep = np.ones(pixels.size, dtype=bool)
            for name in band_names:
                keep &= band_flat[name][pixels] != bands[name].nodata
            band_values = {name: band_flat[name][pixels[keep]] for name in band_names}
        cohort = CellCohort(
            heights=heights[lo:hi],
            first_return=first[lo:hi],
            bands=band_values,
            elevations=elevation_flat[terrain_groups[cell]],
            slopes=slope_flat[terrain_groups[cell]],
            northness=northness_flat[terrain_groups[cell]],
            eastness=eastness_flat[terrain_groups[cell]],
            tpi=tpi_flat[terrain_groups[cell]],
        )
        vector = assemble_features(cohort, spec, percentiles, band_names, cover_threshold)
        cells.append(CellIndex(int(cell // frame.ncols), int(cell % frame.ncols)))
        rows_out.append(vector.values)

    names = feature_names(spec, percentiles, band_names)
    logger.info(f"Assembled {len(names)} features for {len(cells)} analysis cells")
    return FeatureTable(tuple(cells), names, np.vstack(rows_out) if rows_out else np.empty((0, len(names))))
