"""
Apply trained models to every analysis cell, clamp predictions to their
physical ranges and aggregate them to reporting units.
"""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from errors import DomainError, PartitionError, SchemaError
from plots import ATTRIBUTE_NAMES, PREDICTION_FIELDS, AttributeVector

logger = logging.getLogger('efi.inference')

UNIT_COLUMNS = ("unit_id", "area_ac", *PREDICTION_FIELDS)
CLAMP_METADATA = {
    "clamped": True,
    "clamp_order": "cell-then-aggregate",
    "clamp_rules": "all attributes >= 0; cncvr_pct <= 100; bapa_softwood <= bapa",
}

_BAPA = ATTRIBUTE_NAMES.index("bapa")
_SOFTWOOD = ATTRIBUTE_NAMES.index("bapa_softwood")
_COVER = ATTRIBUTE_NAMES.index("cncvr_pct")


@dataclass(frozen=True)
class PredictedUnit:
    unit_id: int
    attributes: AttributeVector
    area: float

    def __post_init__(self):
        if not self.area > 0:
            raise DomainError(f"Unit {self.unit_id} has non-positive area {self.area}")


def predict_cells(models, table):
    """
    Raw (unclamped) predictions, one row per table cell and one column per
    attribute in ATTRIBUTE_NAMES order. Each model reads its own feature
    subset and applies its own normalization.
    """
    out = np.empty((len(table.cells), len(ATTRIBUTE_NAMES)))
    for k, attribute in enumerate(ATTRIBUTE_NAMES):
        if attribute not in models:
            raise SchemaError(f"No model for attribute '{attribute}'")
        model = models[attribute]
        rows = table.columns(model.selected_features)
        out[:, k] = model.predict(rows)
    return out


def clamp_matrix(raw):
    values = np.maximum(np.array(raw, dtype=float, ndmin=2), 0.0)
    values[:, _COVER] = np.minimum(values[:, _COVER], 100.0)
    values[:, _SOFTWOOD] = np.minimum(values[:, _SOFTWOOD], values[:, _BAPA])
    return values


def clamp_attributes(raw):
    if isinstance(raw, AttributeVector):
        raw = raw.as_tuple()
    elif isinstance(raw, dict):
        raw = [raw[name] for name in ATTRIBUTE_NAMES]
    return AttributeVector.from_sequence(clamp_matrix(raw)[0])


def area_weighted_mean(values, areas):
    values = np.asarray(values, dtype=float)
    areas = np.asarray(areas, dtype=float)
    return (areas[:, None] * values).sum(axis=0) / areas.sum()


def aggregate_to_reporting(cells, values, areas, regions):
    """
    Area-weighted mean of every attribute over each region's member cells.

    `cells`, `values` and `areas` are aligned per analysis cell. Regions
    must partition exactly those cells.
    """
    values = np.asarray(values, dtype=float)
    areas = np.broadcast_to(np.asarray(areas, dtype=float), (len(cells),))
    row_of = {cell: i for i, cell in enumerate(cells)}
    claimed = np.zeros(len(cells), dtype=bool)

    units = []
    for region in regions:
        idx = []
        for cell in region.members:
            i = row_of.get(cell)
            if i is None:
                raise PartitionError(f"Region {region.id} claims cell {tuple(cell)} with no prediction")
            if claimed[i]:
                raise PartitionError(f"Cell {tuple(cell)} is claimed by more than one region")
            claimed[i] = True
            idx.append(i)
        idx = np.array(sorted(idx))
        weights = areas[idx]
        total = float(weights.sum())
        mean = (weights[:, None] * values[idx]).sum(axis=0) / total
        # rounding may push a convex combination an ulp past its bounds
        mean = np.clip(mean, values[idx].min(axis=0), values[idx].max(axis=0))
        units.append(PredictedUnit(region.id, AttributeVector.from_sequence(mean), total))

    if not claimed.all():
        raise PartitionError(f"{int((~claimed).sum())} analysis cells belong to no region")
    logger.info(f"Aggregated {len(cells)} cells into {len(units)} reporting units")
    return units


def unit_frame(units):
    rows = [(u.unit_id, u.area, *u.attributes.as_tuple()) for u in units]
    return pd.DataFrame(rows, columns=list(UNIT_COLUMNS))


def write_unit_table(units, path):
    unit_frame(units).to_csv(path, index=False)


def read_unit_table(path):
    frame = pd.read_csv(path)
    missing = [c for c in UNIT_COLUMNS if c not in frame.columns]
    if missing:
        raise SchemaError(f"Unit table {path} is missing columns {missing}")
    units = []
    for row in frame.itertuples(index=False):
        attrs = AttributeVector.from_sequence([getattr(row, name) for name in PREDICTION_FIELDS])
        units.append(PredictedUnit(int(row.unit_id), attrs, float(row.area_ac)))
    return units


def write_cell_table(cells, values, path):
    frame = pd.DataFrame(np.asarray(values, dtype=float), columns=list(PREDICTION_FIELDS))
    frame.insert(0, "col", [c.col for c in cells])
    frame.insert(0, "row", [c.row for c in cells])
    frame.to_csv(path, index=False)
