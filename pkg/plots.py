"""
FIA-style plot and tree tables, and compilation of per-plot ground-truth
forest attributes (the model targets).
"""

import logging
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np
import pandas as pd

from errors import DomainError, OrphanError, SchemaError

logger = logging.getLogger('efi.plots')

BASAL_AREA_FACTOR = 0.005454154
POUNDS_PER_TON = 2000.0
SOFTWOOD_CODE_LIMIT = 300
STATUS_LIVE = 1
STATUS_DEAD = 2

PLOT_COLUMNS = ("CN", "X", "Y")
TREE_COLUMNS = ("PLT_CN", "STATUSCD", "SPCD", "DIA", "HT", "TPA_UNADJ", "CARBON_AG")
COND_COLUMNS = ("PLT_CN", "LIVE_CANOPY_CVR_PCT")

ATTRIBUTE_NAMES = ("bapa", "bapa_softwood", "bapa_snag", "ht", "dia", "tpa", "cagpa", "cncvr_pct")
PREDICTION_FIELDS = tuple(f"pred_{name}" for name in ATTRIBUTE_NAMES)

_TOLERANCE = 1e-9


@dataclass(frozen=True)
class TreeRecord:
    plot_id: str
    status: int
    species_code: int
    dbh: float
    height: float
    tpa_expansion: float
    carbon_ag: float

    def __post_init__(self):
        for name in ("dbh", "height", "tpa_expansion"):
            if getattr(self, name) < 0:
                raise DomainError(f"Tree on plot {self.plot_id} has negative {name}")

    @property
    def is_live(self):
        return self.status == STATUS_LIVE

    @property
    def is_snag(self):
        return self.status == STATUS_DEAD


@dataclass(frozen=True)
class PlotRecord:
    plot_id: str
    x: float
    y: float
    measured_canopy_cover: Optional[float] = None

    def __post_init__(self):
        cover = self.measured_canopy_cover
        if cover is not None and not 0 <= cover <= 100:
            raise DomainError(f"Plot {self.plot_id} canopy cover {cover} outside [0, 100]")


@dataclass(frozen=True)
class AttributeVector:
    """The eight predicted forest attributes, in imperial units."""

    bapa: float = 0.0
    bapa_softwood: float = 0.0
    bapa_snag: float = 0.0
    ht: float = 0.0
    dia: float = 0.0
    tpa: float = 0.0
    cagpa: float = 0.0
    cncvr_pct: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            value = float(getattr(self, f.name))
            if not np.isfinite(value) or value < -_TOLERANCE:
                raise DomainError(f"Attribute {f.name} must be finite and >= 0, got {value}")
            object.__setattr__(self, f.name, value)
        if self.cncvr_pct > 100 + _TOLERANCE:
            raise DomainError(f"cncvr_pct must be <= 100, got {self.cncvr_pct}")
        if self.bapa_softwood > self.bapa + self.bapa_snag + _TOLERANCE:
            raise DomainError("bapa_softwood exceeds total basal area")

    def as_tuple(self):
        return tuple(getattr(self, name) for name in ATTRIBUTE_NAMES)

    def as_dict(self, prefix=""):
        return {f"{prefix}{name}": getattr(self, name) for name in ATTRIBUTE_NAMES}

    @classmethod
    def from_sequence(cls, values):
        return cls(**dict(zip(ATTRIBUTE_NAMES, values)))


def basal_area_per_tree(dbh):
    """Stem cross-section at breast height in ft² for a DBH in inches"""
    if dbh < 0:
        raise DomainError(f"DBH must be >= 0, got {dbh}")
    return BASAL_AREA_FACTOR * dbh * dbh


def is_softwood(species_code, softwood_codes=None):
    """FIA convention: softwood species codes are below 300, unless an explicit list is given"""
    if softwood_codes is not None:
        return int(species_code) in softwood_codes
    return species_code < SOFTWOOD_CODE_LIMIT


def compile_plot_attributes(plot, trees, softwood_codes=None):
    live = [t for t in trees if t.is_live]
    snags = [t for t in trees if t.is_snag]

    bapa = sum(basal_area_per_tree(t.dbh) * t.tpa_expansion for t in live)
    bapa_softwood = sum(
        basal_area_per_tree(t.dbh) * t.tpa_expansion
        for t in live if is_softwood(t.species_code, softwood_codes)
    )
    bapa_snag = sum(basal_area_per_tree(t.dbh) * t.tpa_expansion for t in snags)
    tpa = sum(t.tpa_expansion for t in live)
    if tpa > 0:
        ht = sum(t.height * t.tpa_expansion for t in live) / tpa
        dia = sum(t.dbh * t.tpa_expansion for t in live) / tpa
    else:
        ht = dia = 0.0
    cagpa = sum(t.carbon_ag * t.tpa_expansion for t in live) / POUNDS_PER_TON
    cover = plot.measured_canopy_cover if plot.measured_canopy_cover is not None else 0.0

    return AttributeVector(
        bapa=bapa,
        bapa_softwood=min(bapa_softwood, bapa),
        bapa_snag=bapa_snag,
        ht=ht,
        dia=dia,
        tpa=tpa,
        cagpa=cagpa,
        cncvr_pct=cover,
    )


def _read_table(path, required, name):
    frame = pd.read_csv(path, dtype={"CN": str, "PLT_CN": str})
    frame.columns = [c.strip() for c in frame.columns]
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise SchemaError(f"{name} table {path} is missing required columns {missing}")
    return frame


def load_plot_tables(plot_csv, tree_csv, cond_csv):
    """
    Join TREE and COND rows to PLOT rows on PLT_CN = CN.

    Plots with no trees are kept with an empty tree list. Each plot is
    treated as a single condition; the first non-empty canopy value in COND
    is used.
    """
    plot_frame = _read_table(plot_csv, PLOT_COLUMNS, "PLOT")
    tree_frame = _read_table(tree_csv, TREE_COLUMNS, "TREE")
    cond_frame = _read_table(cond_csv, COND_COLUMNS, "COND")

    known = set(plot_frame["CN"])
    orphans = set(tree_frame["PLT_CN"]) - known
    if orphans:
        raise OrphanError(orphans)

    cover_by_plot = {}
    for plot_id, cover in zip(cond_frame["PLT_CN"], cond_frame["LIVE_CANOPY_CVR_PCT"]):
        if plot_id not in cover_by_plot and pd.notna(cover):
            cover_by_plot[plot_id] = float(cover)

    trees_by_plot = {plot_id: [] for plot_id in plot_frame["CN"]}
    for row in tree_frame.itertuples(index=False):
        trees_by_plot[row.PLT_CN].append(TreeRecord(
            plot_id=row.PLT_CN,
            status=int(row.STATUSCD),
            species_code=int(row.SPCD),
            dbh=float(row.DIA),
            height=float(row.HT),
            tpa_expansion=float(row.TPA_UNADJ),
            carbon_ag=float(row.CARBON_AG) if pd.notna(row.CARBON_AG) else 0.0,
        ))

    pairs = []
    for row in plot_frame.itertuples(index=False):
        plot = PlotRecord(
            plot_id=row.CN,
            x=float(row.X),
            y=float(row.Y),
            measured_canopy_cover=cover_by_plot.get(row.CN),
        )
        pairs.append((plot, trees_by_plot[row.CN]))

    logger.info(f"Loaded {len(pairs)} plots and {len(tree_frame)} trees")
    return pairs


def compile_all(pairs, softwood_codes=None):
    return [(plot, compile_plot_attributes(plot, trees, softwood_codes)) for plot, trees in pairs]


def write_plot_attributes(compiled, path):
    rows = []
    for plot, attrs in compiled:
        row = {"plot_id": plot.plot_id, "x": plot.x, "y": plot.y}
        row.update(attrs.as_dict())
        rows.append(row)
    frame = pd.DataFrame(rows, columns=["plot_id", "x", "y", *ATTRIBUTE_NAMES])
    frame.to_csv(path, index=False)


def read_plot_attributes(path):
    frame = pd.read_csv(path, dtype={"plot_id": str})
    compiled = []
    for row in frame.itertuples(index=False):
        plot = PlotRecord(plot_id=row.plot_id, x=float(row.x), y=float(row.y))
        attrs = AttributeVector(**{name: getattr(row, name) for name in ATTRIBUTE_NAMES})
        compiled.append((plot, attrs))
    return compiled
