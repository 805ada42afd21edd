"""
Rule-based habitat suitability for the California Spotted Owl (CSO) and
the Pacific Fisher, applied to predicted reporting units.

Every threshold comparison is strictly greater-than.
"""

import logging
from dataclasses import asdict, dataclass
from enum import Enum

import pandas as pd

from errors import ConsistencyError, DomainError
from utils import linear_quantile

logger = logging.getLogger('efi.habitat')

DEFAULT_DIA_MIN = 25.0
SPECIES = ("cso", "fisher")


class CSOClass(str, Enum):
    NESTING = "Nesting"
    FORAGING = "Foraging"
    UNLIKELY = "Unlikely"


class FisherClass(str, Enum):
    LIKELY = "Likely"
    UNLIKELY = "Unlikely"


SPECIES_CLASSES = {"cso": tuple(CSOClass), "fisher": tuple(FisherClass)}


@dataclass(frozen=True)
class HabitatThresholds:
    cncvr_nesting: float = 60.0
    cncvr_foraging: float = 40.0
    tpa_min: float = 9.0
    dia_min: float = DEFAULT_DIA_MIN
    softwood_fraction_min: float = 0.5

    def __post_init__(self):
        for name in ("cncvr_nesting", "cncvr_foraging", "tpa_min", "dia_min", "softwood_fraction_min"):
            if getattr(self, name) < 0:
                raise DomainError(f"Habitat threshold {name} must be >= 0")
        if self.cncvr_foraging > self.cncvr_nesting:
            raise DomainError(
                f"Foraging cover threshold {self.cncvr_foraging} exceeds nesting threshold {self.cncvr_nesting}"
            )


@dataclass(frozen=True)
class HabitatResult:
    unit_id: int
    cso_class: CSOClass
    fisher_class: FisherClass


def compute_dia_threshold(units):
    """Third quartile of predicted mean DBH over all units, unweighted by area"""
    if not units:
        raise DomainError("Cannot compute a diameter threshold without units")
    return linear_quantile([u.attributes.dia for u in units], 75)


def _softwood_dominated(attrs, th):
    return attrs.bapa_softwood > th.softwood_fraction_min * attrs.bapa


def classify_cso(attrs, th):
    structure = attrs.tpa > th.tpa_min and attrs.dia > th.dia_min and _softwood_dominated(attrs, th)
    if not structure:
        return CSOClass.UNLIKELY
    if attrs.cncvr_pct > th.cncvr_nesting:
        return CSOClass.NESTING
    if attrs.cncvr_pct > th.cncvr_foraging:
        return CSOClass.FORAGING
    return CSOClass.UNLIKELY


def classify_fisher(attrs, th):
    if attrs.cncvr_pct > th.cncvr_nesting and attrs.dia > th.dia_min and _softwood_dominated(attrs, th):
        return FisherClass.LIKELY
    return FisherClass.UNLIKELY


def resolve_thresholds(units, dia_min=None, **overrides):
    """Thresholds with dia_min taken from the override, or else from the units' third quartile"""
    if dia_min is None:
        dia_min = compute_dia_threshold(units)
        logger.info(f"Diameter threshold from third quartile of predicted DBH: {dia_min:.3f} in")
    else:
        logger.info(f"Diameter threshold overridden: {dia_min} in")
    return HabitatThresholds(dia_min=float(dia_min), **{k: v for k, v in overrides.items() if v is not None})


def classify_units(units, th):
    results = [HabitatResult(u.unit_id, classify_cso(u.attributes, th), classify_fisher(u.attributes, th))
               for u in units]
    logger.info(
        f"Classified {len(results)} units: "
        f"{sum(r.cso_class is CSOClass.NESTING for r in results)} CSO nesting, "
        f"{sum(r.cso_class is CSOClass.FORAGING for r in results)} CSO foraging, "
        f"{sum(r.fisher_class is FisherClass.LIKELY for r in results)} fisher likely"
    )
    return results


@dataclass(frozen=True)
class AcreageRow:
    species: str
    habitat_class: str
    acres: float
    unit_count: int


def acreage_report(results, units):
    """Acres and unit counts per species and class; every class gets a row, zero or not"""
    area_of = {u.unit_id: u.area for u in units}
    totals = {(species, cls.value): [0.0, 0] for species in SPECIES for cls in SPECIES_CLASSES[species]}
    for result in results:
        if result.unit_id not in area_of:
            raise ConsistencyError(f"Habitat result for unknown unit {result.unit_id}")
        area = area_of[result.unit_id]
        for species, cls in (("cso", result.cso_class), ("fisher", result.fisher_class)):
            entry = totals[(species, cls.value)]
            entry[0] += area
            entry[1] += 1
    rows = [AcreageRow(species, cls, acres, count) for (species, cls), (acres, count) in totals.items()]
    for species in SPECIES:
        acres = sum(r.acres for r in rows if r.species == species)
        logger.info(f"{species}: {acres:.3f} acres classified")
    return rows


def write_acreage(rows, path):
    frame = pd.DataFrame([(r.species, r.habitat_class, r.acres, r.unit_count) for r in rows],
                         columns=["species", "class", "acres", "unit_count"])
    frame.to_csv(path, index=False)


def habitat_properties(unit, result):
    properties = unit.attributes.as_dict(prefix="pred_")
    properties["cso_class"] = result.cso_class.value
    properties["fisher_class"] = result.fisher_class.value
    return properties


def thresholds_metadata(th):
    return asdict(th)
