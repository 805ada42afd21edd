"""
Two-tier segmentation.

Tier 1 tessellates the scene into square analysis cells sized like a
ground plot. Tier 2 grows ~0.5 acre reporting units by greedy agglomerative
merging of adjacent regions on canopy height, NDVI and elevation
similarity. Reporting units are unions of analysis cells, so aggregation
between the tiers is exact.
"""

import heapq
import json
import logging
import math
import os
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from errors import DomainError, PartitionError
from features import ndvi, zonal_statistics
from geodata import CellIndex, GridFrame, cell_area
from utils import acres_to_square_feet

logger = logging.getLogger('efi.segmentation')

DEFAULT_ANALYSIS_UNIT_AREA = 1.0 / 6.0
DEFAULT_REPORTING_TARGET_AREA = 0.5
DEFAULT_SEGMENT_WEIGHTS = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class Tessellation(GridFrame):
    scene_extent: tuple = field(default=None)

    @property
    def cell_area(self):
        return cell_area(self.cellsize)

    @property
    def total_area(self):
        return self.cell_count * self.cell_area

    def in_scene(self, x, y):
        """Whether each (x, y) lies inside the unsnapped scene extent"""
        if self.scene_extent is None:
            return self.contains(x, y)
        xmin, ymin, xmax, ymax = self.scene_extent
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return (x >= xmin) & (x <= xmax) & (y >= ymin) & (y <= ymax)

    def cell_index(self, flat):
        return CellIndex(int(flat // self.ncols), int(flat % self.ncols))

    def to_dict(self):
        return {
            "scene_extent": list(self.scene_extent) if self.scene_extent else None,
            "x_origin": self.x_origin,
            "y_origin": self.y_origin,
            "cellsize": self.cellsize,
            "nrows": self.nrows,
            "ncols": self.ncols,
        }

    @classmethod
    def from_dict(cls, data):
        extent = tuple(data["scene_extent"]) if data.get("scene_extent") else None
        return cls(int(data["ncols"]), int(data["nrows"]), float(data["x_origin"]),
                   float(data["y_origin"]), float(data["cellsize"]), extent)


@dataclass(frozen=True)
class Region:
    id: int
    members: frozenset
    centroid_features: tuple
    area: float

    def __post_init__(self):
        if not self.members:
            raise DomainError(f"Region {self.id} has no members")


def tessellate(extent, analysis_unit_area=DEFAULT_ANALYSIS_UNIT_AREA):
    """Square cells of the configured area; partial edge cells snap outward to cover the extent"""
    xmin, ymin, xmax, ymax = extent
    if not (xmax > xmin and ymax > ymin):
        raise DomainError(f"Extent {extent} has no area")
    if not analysis_unit_area > 0:
        raise DomainError(f"Analysis unit area must be positive, got {analysis_unit_area}")
    side = math.sqrt(acres_to_square_feet(analysis_unit_area))
    ncols = max(1, math.ceil((xmax - xmin) / side - 1e-9))
    nrows = max(1, math.ceil((ymax - ymin) / side - 1e-9))
    tess = Tessellation(ncols, nrows, float(xmin), float(ymin), side, tuple(float(v) for v in extent))
    logger.info(f"Tessellated {extent} into {nrows}x{ncols} cells of {analysis_unit_area:.4f} ac")
    return tess


def region_area(region, tess):
    return len(region.members) * tess.cell_area


def cell_channel_means(chm, bands, tess):
    """Per-cell mean canopy height and mean NDVI, row-major over the tessellation"""
    chm_means, _, _ = zonal_statistics(chm, tess)
    if "nir" in bands and "red" in bands:
        ndvi_grid = bands["nir"].with_values(ndvi(bands["nir"].values, bands["red"].values))
        ndvi_means, _, _ = zonal_statistics(ndvi_grid, tess)
    else:
        logger.warning("No nir/red bands available; segmenting on canopy height only")
        ndvi_means = np.zeros(tess.cell_count)
    return chm_means, ndvi_means


def cell_elevation_means(dtm, tess):
    means, _, _ = zonal_statistics(dtm, tess)
    return means


def _zscore(values):
    values = np.asarray(values, dtype=float)
    std = values.std()
    if std == 0:
        return np.zeros_like(values)
    return (values - values.mean()) / std


def _grid_neighbours(nrows, ncols):
    neighbours = [set() for _ in range(nrows * ncols)]
    for r in range(nrows):
        for c in range(ncols):
            i = r * ncols + c
            if c + 1 < ncols:
                neighbours[i].add(i + 1)
                neighbours[i + 1].add(i)
            if r + 1 < nrows:
                neighbours[i].add(i + ncols)
                neighbours[i + ncols].add(i)
    return neighbours


def grow_reporting_units(tess, chm_means, ndvi_means, target_area=DEFAULT_REPORTING_TARGET_AREA,
                         weights=DEFAULT_SEGMENT_WEIGHTS, dtm_means=None):
    """
    Greedy agglomerative merging of 4-adjacent regions.

    Channels are canopy height, NDVI and, when `dtm_means` is given,
    elevation; `weights` lines up with them and missing trailing weights
    count as 0. Merge cost is combined area times the squared distance
    between region centroids in z-scored (and weighted) feature space. The
    cheapest pair is merged until the mean region area reaches
    `target_area`; ties go to the lowest (id, id) pair, and the merged
    region keeps the lower id.
    """
    n = tess.cell_count
    channels = [chm_means, ndvi_means] + ([dtm_means] if dtm_means is not None else [])
    raw = np.column_stack([np.asarray(c, dtype=float).reshape(-1) for c in channels])
    if raw.shape[0] != n:
        raise DomainError(f"Expected {n} per-cell values, got {raw.shape[0]}")
    weights = tuple(float(w) for w in weights)[:raw.shape[1]]
    if any(w < 0 for w in weights):
        raise DomainError(f"Segmentation weights must be >= 0, got {weights}")
    weights += (0.0,) * (raw.shape[1] - len(weights))
    scaled = np.column_stack([_zscore(raw[:, k]) * weights[k] for k in range(raw.shape[1])])

    unit_area = tess.cell_area
    total_area = n * unit_area
    sums = scaled.copy()
    raw_sums = raw.copy()
    counts = np.ones(n)
    alive = np.ones(n, dtype=bool)
    version = np.zeros(n, dtype=np.int64)
    members = {i: [i] for i in range(n)}
    neighbours = _grid_neighbours(tess.nrows, tess.ncols)

    def cost(a, b):
        diff = sums[a] / counts[a] - sums[b] / counts[b]
        return (counts[a] + counts[b]) * unit_area * float(diff @ diff)

    heap = [(cost(i, j), i, j, 0, 0) for i in range(n) for j in neighbours[i] if i < j]
    heapq.heapify(heap)

    regions_left = n
    merges = 0
    while regions_left > 1 and total_area / regions_left < target_area and heap:
        _, a, b, va, vb = heapq.heappop(heap)
        if not (alive[a] and alive[b]) or version[a] != va or version[b] != vb:
            continue
        sums[a] += sums[b]
        raw_sums[a] += raw_sums[b]
        counts[a] += counts[b]
        alive[b] = False
        version[a] += 1
        members[a].extend(members.pop(b))
        for other in neighbours[b]:
            neighbours[other].discard(b)
            if other != a:
                neighbours[other].add(a)
                neighbours[a].add(other)
        neighbours[b] = set()
        neighbours[a].discard(b)
        for other in neighbours[a]:
            lo, hi = min(a, other), max(a, other)
            heapq.heappush(heap, (cost(lo, hi), lo, hi, int(version[lo]), int(version[hi])))
        regions_left -= 1
        merges += 1

    regions = []
    for rid in sorted(members):
        cells = frozenset(tess.cell_index(i) for i in members[rid])
        centroid = tuple(float(v) for v in raw_sums[rid] / counts[rid])
        regions.append(Region(rid, cells, centroid, len(cells) * unit_area))
    logger.info(
        f"Merged {n} cells into {len(regions)} reporting units "
        f"(mean area {total_area / len(regions):.4f} ac, target {target_area} ac, {merges} merges)"
    )
    return regions


def is_four_connected(members):
    members = set(members)
    if not members:
        return False
    start = min(members)
    seen = {start}
    queue = deque([start])
    while queue:
        row, col = queue.popleft()
        for nxt in ((row + 1, col), (row - 1, col), (row, col + 1), (row, col - 1)):
            nxt = CellIndex(*nxt)
            if nxt in members and nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return len(seen) == len(members)


def check_partition(regions, tess):
    """Raise PartitionError unless every tessellation cell belongs to exactly one region"""
    owner = {}
    for region in regions:
        for cell in region.members:
            if not (0 <= cell.row < tess.nrows and 0 <= cell.col < tess.ncols):
                raise PartitionError(f"Region {region.id} claims cell {tuple(cell)} outside the tessellation")
            if cell in owner:
                raise PartitionError(f"Cell {tuple(cell)} is claimed by regions {owner[cell]} and {region.id}")
            owner[cell] = region.id
    if len(owner) != tess.cell_count:
        raise PartitionError(f"{tess.cell_count - len(owner)} cells belong to no region")
    return owner


def save_segmentation(tess, regions, directory):
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "tessellation.json"), "w") as f:
        json.dump(tess.to_dict(), f, indent=2)
    payload = {
        "regions": [
            {
                "id": r.id,
                "members": sorted([list(cell) for cell in r.members]),
                "centroid_features": list(r.centroid_features),
                "area": r.area,
            }
            for r in regions
        ]
    }
    with open(os.path.join(directory, "regions.json"), "w") as f:
        json.dump(payload, f)


def load_segmentation(directory):
    with open(os.path.join(directory, "tessellation.json")) as f:
        tess = Tessellation.from_dict(json.load(f))
    with open(os.path.join(directory, "regions.json")) as f:
        payload = json.load(f)
    regions = [
        Region(
            int(item["id"]),
            frozenset(CellIndex(int(r), int(c)) for r, c in item["members"]),
            tuple(item["centroid_features"]),
            float(item["area"]),
        )
        for item in payload["regions"]
    ]
    return tess, regions
