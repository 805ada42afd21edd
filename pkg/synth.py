"""
Synthetic forest scenes with known ground truth.

A scene is a rectangle of homogeneous stand patches. Trees are placed
uniformly inside each patch, crowns are paraboloids of revolution and
LiDAR pulses fall on a jittered grid, each returning either the highest
crown surface it meets or the ground. Imagery bands track local live-crown
cover. FIA-style plots are sampled at random inside each patch, and the
true per-patch attributes come from every tree in the patch.
"""

import datetime
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from errors import ConfigError, DomainError
from geodata import GROUND_CLASS, PointCloud, RasterGrid, write_ascii_grid, write_point_cloud
from plots import STATUS_DEAD, STATUS_LIVE, PlotRecord, TreeRecord, compile_plot_attributes
from utils import SQFT_PER_ACRE, square_feet_to_acres, stage_rng

logger = logging.getLogger('efi.synth')

VEGETATION_CLASS = 5
CROWN_RATIO = 0.5
SNAG_CROWN_SCALE = 0.5
SOFTWOOD_SPECIES = (15, 20, 81, 122)
HARDWOOD_SPECIES = (361, 805, 818)
CM_PER_INCH = 2.54
LB_PER_KG = 2.20462
CARBON_FRACTION = 0.5
# log-log aboveground biomass (kg) from DBH (cm)
BIOMASS_COEFFS = {"softwood": (-2.5356, 2.4349), "hardwood": (-2.4800, 2.4835)}
SCENE_DATE = datetime.date(2020, 1, 1)


def crown_radius(dbh):
    return 2.0 + 0.3 * np.asarray(dbh, dtype=float)


def carbon_ag(dbh, softwood):
    """Aboveground carbon in pounds per stem"""
    dbh_cm = np.asarray(dbh, dtype=float) * CM_PER_INCH
    b0 = np.where(softwood, BIOMASS_COEFFS["softwood"][0], BIOMASS_COEFFS["hardwood"][0])
    b1 = np.where(softwood, BIOMASS_COEFFS["softwood"][1], BIOMASS_COEFFS["hardwood"][1])
    biomass = np.where(dbh_cm > 0, np.exp(b0 + b1 * np.log(np.maximum(dbh_cm, 1e-9))), 0.0)
    return biomass * LB_PER_KG * CARBON_FRACTION


@dataclass(frozen=True)
class StandPatch:
    name: str
    region: tuple
    tpa: float
    dbh_mean: float
    dbh_std: float
    height_coeffs: tuple = (10.0, 4.0)
    softwood_fraction: float = 0.5
    snag_fraction: float = 0.05

    def __post_init__(self):
        xmin, ymin, xmax, ymax = self.region
        if not (xmax > xmin and ymax > ymin):
            raise DomainError(f"Patch {self.name} has a degenerate region {self.region}")
        if self.tpa < 0 or self.dbh_mean < 0 or self.dbh_std < 0:
            raise DomainError(f"Patch {self.name} densities and diameters must be >= 0")
        for name in ("softwood_fraction", "snag_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise DomainError(f"Patch {self.name} {name} must be in [0, 1]")

    @property
    def acres(self):
        xmin, ymin, xmax, ymax = self.region
        return square_feet_to_acres((xmax - xmin) * (ymax - ymin))

    @property
    def center(self):
        xmin, ymin, xmax, ymax = self.region
        return (xmin + xmax) / 2, (ymin + ymax) / 2


@dataclass(frozen=True)
class SceneSpec:
    extent: tuple
    stand_patches: tuple
    pulse_density: float = 0.04
    terrain: tuple = (0.01, 0.005, 1000.0)
    noise_std: float = 0.3
    seed: int = 0
    plots_per_patch: int = 50
    plot_radius: float = 48.0
    band_cellsize: float = 20.0
    band_noise_std: float = 0.01
    ground_return_probability: float = 0.3

    def __post_init__(self):
        xmin, ymin, xmax, ymax = self.extent
        if not (xmax > xmin and ymax > ymin):
            raise DomainError(f"Scene extent {self.extent} has no area")
        if not self.pulse_density > 0:
            raise DomainError(f"pulse_density must be positive, got {self.pulse_density}")
        if self.noise_std < 0 or self.band_noise_std < 0:
            raise DomainError("Noise levels must be >= 0")
        if not 0 <= self.ground_return_probability <= 1:
            raise DomainError("ground_return_probability must be in [0, 1]")
        for patch in self.stand_patches:
            px0, py0, px1, py1 = patch.region
            if px0 < xmin or py0 < ymin or px1 > xmax or py1 > ymax:
                raise DomainError(f"Patch {patch.name} extends beyond the scene extent")
        object.__setattr__(self, "stand_patches", tuple(self.stand_patches))

    @property
    def acres(self):
        xmin, ymin, xmax, ymax = self.extent
        return square_feet_to_acres((xmax - xmin) * (ymax - ymin))


@dataclass
class Scene:
    spec: SceneSpec
    cloud: PointCloud
    bands: dict
    plots: list
    patch_trees: tuple
    patch_cover: tuple
    truth: tuple = field(default=())


def default_scene_spec(seed=0, side=9360.0, plots_per_patch=50, **overrides):
    """~2,000 acres (at the default side) split into dense conifer, mixed and sparse strips"""
    third = side / 3
    patches = (
        StandPatch("dense_conifer", (0.0, 0.0, third, side), tpa=150, dbh_mean=26, dbh_std=6,
                   softwood_fraction=0.9, snag_fraction=0.1),
        StandPatch("mixed", (third, 0.0, 2 * third, side), tpa=200, dbh_mean=12, dbh_std=4,
                   softwood_fraction=0.5, snag_fraction=0.05),
        StandPatch("sparse", (2 * third, 0.0, side, side), tpa=30, dbh_mean=8, dbh_std=3,
                   softwood_fraction=0.3, snag_fraction=0.02),
    )
    return SceneSpec((0.0, 0.0, side, side), patches, seed=seed, plots_per_patch=plots_per_patch, **overrides)


def load_scene_spec(path, seed=None):
    """Scene spec from a JSON document; `seed` overrides the document's seed"""
    with open(path) as f:
        try:
            document = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Scene spec {path} is not valid JSON: {e}")
    try:
        patches = tuple(
            StandPatch(
                name=p["name"],
                region=tuple(p["region"]),
                tpa=float(p["tpa"]),
                dbh_mean=float(p["dbh_mean"]),
                dbh_std=float(p["dbh_std"]),
                height_coeffs=tuple(p.get("height_coeffs", (10.0, 4.0))),
                softwood_fraction=float(p.get("softwood_fraction", 0.5)),
                snag_fraction=float(p.get("snag_fraction", 0.05)),
            )
            for p in document.pop("stand_patches")
        )
        document["extent"] = tuple(document["extent"])
        if "terrain" in document:
            document["terrain"] = tuple(document["terrain"])
        if seed is not None:
            document["seed"] = seed
        return SceneSpec(stand_patches=patches, **document)
    except (KeyError, TypeError) as e:
        raise ConfigError(f"Scene spec {path} is incomplete: {e}")


# ---------------------------------------------------------------------------
# Trees

def _place_trees(patch, rng):
    count = int(round(patch.tpa * patch.acres))
    xmin, ymin, xmax, ymax = patch.region
    x = rng.uniform(xmin, xmax, count)
    y = rng.uniform(ymin, ymax, count)
    dbh = np.round(np.maximum(rng.normal(patch.dbh_mean, patch.dbh_std, count), 1.0), 1)
    c0, c1 = patch.height_coeffs
    height = c0 + c1 * dbh
    softwood = rng.random(count) < patch.softwood_fraction
    snag = rng.random(count) < patch.snag_fraction
    species = np.where(
        softwood,
        rng.choice(SOFTWOOD_SPECIES, count),
        rng.choice(HARDWOOD_SPECIES, count),
    )
    radius = crown_radius(dbh) * np.where(snag, SNAG_CROWN_SCALE, 1.0)
    return {
        "x": x, "y": y, "dbh": dbh, "height": height, "species": species,
        "live": ~snag, "radius": radius, "depth": CROWN_RATIO * height,
        "carbon": carbon_ag(dbh, softwood),
    }


def _tree_records(trees, index, plot_id, expansion):
    return [
        TreeRecord(
            plot_id=plot_id,
            status=STATUS_LIVE if trees["live"][i] else STATUS_DEAD,
            species_code=int(trees["species"][i]),
            dbh=float(trees["dbh"][i]),
            height=float(trees["height"][i]),
            tpa_expansion=expansion,
            carbon_ag=float(trees["carbon"][i]),
        )
        for i in index
    ]


# ---------------------------------------------------------------------------
# Pulses

@dataclass(frozen=True)
class _PulseGrid:
    x0: float
    y0: float
    spacing: float
    nx: int
    ny: int
    x: np.ndarray
    y: np.ndarray

    def window(self, cx, cy, reach):
        """Flat indices of pulses whose nominal cell lies within `reach` cells of (cx, cy)"""
        col = int((cx - self.x0) // self.spacing)
        row = int((cy - self.y0) // self.spacing)
        cols = np.arange(max(col - reach, 0), min(col + reach + 1, self.nx))
        rows = np.arange(max(row - reach, 0), min(row + reach + 1, self.ny))
        return (rows[:, None] * self.nx + cols[None, :]).ravel()


def _pulse_grid(spec, rng):
    xmin, ymin, xmax, ymax = spec.extent
    spacing = 1.0 / math.sqrt(spec.pulse_density)
    nx = max(1, int((xmax - xmin) // spacing))
    ny = max(1, int((ymax - ymin) // spacing))
    cols, rows = np.meshgrid(np.arange(nx), np.arange(ny))
    jitter = rng.uniform(-spacing / 4, spacing / 4, (2, ny * nx))
    x = xmin + (cols.ravel() + 0.5) * spacing + jitter[0]
    y = ymin + (rows.ravel() + 0.5) * spacing + jitter[1]
    return _PulseGrid(xmin, ymin, spacing, nx, ny, x, y)


def _crown_surface(pulses, x, y, top, radius, depth, chunk=20000):
    """Highest crown surface height above ground at every pulse (-inf where no crown)"""
    surface = np.full(pulses.nx * pulses.ny, -np.inf)
    if len(x) == 0:
        return surface
    reach = int(math.ceil(radius.max() / pulses.spacing)) + 1
    offsets = np.arange(-reach, reach + 1)
    off_col, off_row = np.meshgrid(offsets, offsets)
    off_col, off_row = off_col.ravel(), off_row.ravel()
    for start in range(0, len(x), chunk):
        part = slice(start, start + chunk)
        cols = ((x[part] - pulses.x0) // pulses.spacing).astype(int)[:, None] + off_col
        rows = ((y[part] - pulses.y0) // pulses.spacing).astype(int)[:, None] + off_row
        valid = (cols >= 0) & (cols < pulses.nx) & (rows >= 0) & (rows < pulses.ny)
        idx = np.where(valid, rows * pulses.nx + cols, 0)
        d2 = (pulses.x[idx] - x[part, None]) ** 2 + (pulses.y[idx] - y[part, None]) ** 2
        r2 = radius[part, None] ** 2
        inside = valid & (d2 <= r2)
        height = top[part, None] - d2 / r2 * depth[part, None]
        np.maximum.at(surface, idx[inside], height[inside])
    return surface


def _returns(spec, pulses, surface, rng):
    a, b, c = spec.terrain
    ground = a * pulses.x + b * pulses.y + c
    hit = np.isfinite(surface)
    first_z = ground + np.where(hit, surface, 0.0) + rng.normal(0, spec.noise_std, ground.size)
    first_class = np.where(hit, VEGETATION_CLASS, GROUND_CLASS)

    through = hit & (rng.random(ground.size) < spec.ground_return_probability)
    second_z = ground[through] + rng.normal(0, spec.noise_std, int(through.sum()))

    return PointCloud(
        x=np.concatenate([pulses.x, pulses.x[through]]),
        y=np.concatenate([pulses.y, pulses.y[through]]),
        z=np.concatenate([first_z, second_z]),
        return_number=np.concatenate([np.ones(ground.size, dtype=np.int64),
                                      np.full(int(through.sum()), 2, dtype=np.int64)]),
        classification=np.concatenate([first_class, np.full(int(through.sum()), GROUND_CLASS)]).astype(np.int64),
    )


def _bands(spec, pulses, live_hit, rng):
    xmin, ymin, xmax, ymax = spec.extent
    size = spec.band_cellsize
    ncols = max(1, math.ceil((xmax - xmin) / size - 1e-9))
    nrows = max(1, math.ceil((ymax - ymin) / size - 1e-9))
    cols = np.minimum(((pulses.x - xmin) // size).astype(int), ncols - 1)
    rows = np.minimum(((pulses.y - ymin) // size).astype(int), nrows - 1)
    pixel = rows * ncols + cols
    hits = np.bincount(pixel, weights=live_hit.astype(float), minlength=nrows * ncols)
    total = np.bincount(pixel, minlength=nrows * ncols)
    cover = np.divide(hits, total, out=np.zeros_like(hits), where=total > 0)

    def band(base, slope):
        values = base + slope * cover + rng.normal(0, spec.band_noise_std, cover.size)
        return RasterGrid(ncols, nrows, float(xmin), float(ymin), float(size), values=np.maximum(values, 0.0))

    return {"nir": band(0.15, 0.35), "red": band(0.12, -0.08), "blue": band(0.08, -0.04)}


# ---------------------------------------------------------------------------
# Scene

def generate_scene(spec):
    patch_trees = [_place_trees(p, stage_rng(spec.seed, f"synth:trees:{i}"))
                   for i, p in enumerate(spec.stand_patches)]
    merged = {key: np.concatenate([t[key] for t in patch_trees]) if patch_trees else np.empty(0)
              for key in ("x", "y", "height", "radius", "depth", "live")}
    merged["live"] = merged["live"].astype(bool)

    pulses = _pulse_grid(spec, stage_rng(spec.seed, "synth:pulses"))
    surface = _crown_surface(pulses, merged["x"], merged["y"], merged["height"], merged["radius"], merged["depth"])
    live = merged["live"]
    live_hit = np.isfinite(_crown_surface(pulses, merged["x"][live], merged["y"][live], merged["height"][live],
                                          merged["radius"][live], merged["depth"][live]))

    cloud = _returns(spec, pulses, surface, stage_rng(spec.seed, "synth:returns"))
    bands = _bands(spec, pulses, live_hit, stage_rng(spec.seed, "synth:bands"))

    plot_area = math.pi * spec.plot_radius ** 2
    expansion = SQFT_PER_ACRE / plot_area
    reach = int(math.ceil(spec.plot_radius / pulses.spacing)) + 1
    plots, patch_records, patch_cover = [], [], []
    for i, (patch, trees) in enumerate(zip(spec.stand_patches, patch_trees)):
        xmin, ymin, xmax, ymax = patch.region
        in_patch = (pulses.x >= xmin) & (pulses.x < xmax) & (pulses.y >= ymin) & (pulses.y < ymax)
        patch_cover.append(100.0 * float(live_hit[in_patch].mean()) if in_patch.any() else 0.0)
        patch_records.append(tuple(_tree_records(trees, range(len(trees["x"])), patch.name, 1.0 / patch.acres)))

        rng = stage_rng(spec.seed, f"synth:plots:{i}")
        margin = min(spec.plot_radius, (xmax - xmin) / 2, (ymax - ymin) / 2)
        px = rng.uniform(xmin + margin, xmax - margin, spec.plots_per_patch)
        py = rng.uniform(ymin + margin, ymax - margin, spec.plots_per_patch)
        for k in range(spec.plots_per_patch):
            plot_id = f"{i + 1}{k + 1:04d}"
            near = np.flatnonzero((trees["x"] - px[k]) ** 2 + (trees["y"] - py[k]) ** 2 <= spec.plot_radius ** 2)
            window = pulses.window(px[k], py[k], reach)
            covered = (pulses.x[window] - px[k]) ** 2 + (pulses.y[window] - py[k]) ** 2 <= spec.plot_radius ** 2
            cover = 100.0 * float(live_hit[window][covered].mean()) if covered.any() else 0.0
            plot = PlotRecord(plot_id, round(float(px[k]), 2), round(float(py[k]), 2), round(cover, 2))
            plots.append((plot, _tree_records(trees, near, plot_id, expansion)))

    scene = Scene(spec, cloud, bands, plots, tuple(patch_records), tuple(patch_cover))
    scene.truth = scene_truth_table(scene)
    logger.info(
        f"Generated scene: {spec.acres:.1f} ac, {len(merged['x'])} trees, {len(cloud)} returns, "
        f"{len(plots)} plots in {len(spec.stand_patches)} patches"
    )
    return scene


def scene_truth_table(scene):
    """Exact attributes per patch from its full tree list"""
    rows = []
    for patch, trees, cover in zip(scene.spec.stand_patches, scene.patch_trees, scene.patch_cover):
        cx, cy = patch.center
        rows.append((patch.name, compile_plot_attributes(PlotRecord(patch.name, cx, cy, cover), trees)))
    return tuple(rows)


def scene_paths(directory, cloud_name="cloud.las"):
    return {
        "plot_csv": os.path.join(directory, "PLOT.csv"),
        "tree_csv": os.path.join(directory, "TREE.csv"),
        "cond_csv": os.path.join(directory, "COND.csv"),
        "cloud_path": os.path.join(directory, cloud_name),
        "bands": {name: os.path.join(directory, f"{name}.asc") for name in ("red", "nir", "blue")},
        "patches": os.path.join(directory, "patches.json"),
    }


def write_scene(scene, paths):
    """
    Write PLOT/TREE/COND tables, the point cloud, band grids and a
    patches.json sidecar to the locations named in `paths` (see scene_paths).
    """
    for key in ("plot_csv", "tree_csv", "cond_csv", "cloud_path", "patches"):
        os.makedirs(os.path.dirname(os.path.abspath(paths[key])), exist_ok=True)

    pd.DataFrame([(p.plot_id, p.x, p.y) for p, _ in scene.plots], columns=["CN", "X", "Y"]) \
        .to_csv(paths["plot_csv"], index=False)
    pd.DataFrame(
        [(t.plot_id, t.status, t.species_code, t.dbh, t.height, t.tpa_expansion, t.carbon_ag)
         for _, trees in scene.plots for t in trees],
        columns=["PLT_CN", "STATUSCD", "SPCD", "DIA", "HT", "TPA_UNADJ", "CARBON_AG"],
    ).to_csv(paths["tree_csv"], index=False)
    pd.DataFrame([(p.plot_id, 1, p.measured_canopy_cover) for p, _ in scene.plots],
                 columns=["PLT_CN", "CONDID", "LIVE_CANOPY_CVR_PCT"]).to_csv(paths["cond_csv"], index=False)

    write_point_cloud(scene.cloud, paths["cloud_path"], creation_date=SCENE_DATE)
    for name, grid in scene.bands.items():
        if name in paths["bands"]:
            os.makedirs(os.path.dirname(os.path.abspath(paths["bands"][name])), exist_ok=True)
            write_ascii_grid(grid, paths["bands"][name])

    sidecar = {
        "extent": list(scene.spec.extent),
        "seed": scene.spec.seed,
        "patches": [
            {"name": patch.name, "region": list(patch.region), "acres": patch.acres, "truth": attrs.as_dict()}
            for patch, (_, attrs) in zip(scene.spec.stand_patches, scene.truth)
        ],
    }
    with open(paths["patches"], "w") as f:
        json.dump(sidecar, f, indent=2)
    logger.info(f"Wrote synthetic inputs next to {paths['plot_csv']}")
    return paths
