import logging
import os
import sys
from fractions import Fraction
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from sqlalchemy import create_engine
from sqlalchemy.orm import DeclarativeBase, sessionmaker

from errors import ConfigError

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s %(message)s'
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")

INPUT_PATH_KEYS = ("plot_csv", "tree_csv", "cond_csv", "cloud_path", "scene_spec")
LIST_KEYS = ("segment_weights", "strata_boundaries", "percentiles", "alphas", "softwood_species")
NUMBER_KEYS = (
    "raster_cellsize", "analysis_unit_area", "reporting_target_area", "cover_threshold",
    "keep_fraction", "lambda_ratio", "tol", "cncvr_nesting", "cncvr_foraging", "tpa_min",
    "dia_min", "softwood_fraction_min", "scene_side",
)


def configure_logging(level="INFO"):
    logging.basicConfig(level=logging.WARNING, format=LOG_FORMAT, stream=sys.stderr)
    logging.getLogger('efi').setLevel(level)


class Base(DeclarativeBase):
    pass


def _number(value):
    if isinstance(value, str):
        try:
            return float(Fraction(value.strip()))
        except (ValueError, ZeroDivisionError):
            return value
    return value


class RunConfig(BaseModel):
    """Every knob of a pipeline run. Unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    plot_csv: str = "inputs/PLOT.csv"
    tree_csv: str = "inputs/TREE.csv"
    cond_csv: str = "inputs/COND.csv"
    cloud_path: str = "inputs/cloud.las"
    bands: dict[str, str] = Field(default_factory=lambda: {
        "red": "inputs/red.asc", "nir": "inputs/nir.asc", "blue": "inputs/blue.asc",
    })
    scene_spec: Optional[str] = None
    scene_side: float = Field(default=9360.0, gt=0)
    plots_per_patch: int = Field(default=50, ge=1)

    raster_cellsize: float = Field(default=10.0, gt=0)
    analysis_unit_area: float = Field(default=1.0 / 6.0, gt=0)
    reporting_target_area: float = Field(default=0.5, gt=0)
    segment_weights: tuple[float, ...] = (1.0, 1.0, 1.0)

    strata_boundaries: tuple[float, ...] = (0.0, 6.0, 16.0, 32.0, 64.0, 96.0)
    percentiles: tuple[float, ...] = tuple(float(p) for p in range(5, 100, 5))
    cover_threshold: float = Field(default=6.0, ge=0)
    tpi_radius: int = Field(default=3, ge=1)

    keep_fraction: float = Field(default=0.4375, gt=0, le=1)
    alphas: tuple[float, ...] = tuple(round(0.1 * i, 1) for i in range(1, 11))
    lambda_count: int = Field(default=50, ge=2)
    lambda_ratio: float = Field(default=1e-3, gt=0, lt=1)
    cv_folds: int = Field(default=5, ge=2)
    tol: float = Field(default=1e-7, gt=0)
    max_sweeps: int = Field(default=10000, ge=1)
    seed: int = Field(default=0, ge=0)

    softwood_species: Optional[tuple[int, ...]] = None
    cncvr_nesting: float = Field(default=60.0, ge=0, le=100)
    cncvr_foraging: float = Field(default=40.0, ge=0, le=100)
    tpa_min: float = Field(default=9.0, ge=0)
    dia_min: Optional[float] = Field(default=None, ge=0)
    softwood_fraction_min: float = Field(default=0.5, ge=0, le=1)

    output_dir: str = "efi_out"
    workers: int = Field(default=1, ge=1)
    log_level: str = "INFO"

    @field_validator(*LIST_KEYS, mode="before")
    @classmethod
    def _split_list(cls, value):
        if isinstance(value, str):
            value = [item.strip() for item in value.split(",") if item.strip()]
        if isinstance(value, (list, tuple)):
            return [_number(item) for item in value]
        return value

    @field_validator(*NUMBER_KEYS, mode="before")
    @classmethod
    def _parse_fraction(cls, value):
        return _number(value)

    @field_validator("bands", mode="before")
    @classmethod
    def _parse_bands(cls, value):
        if isinstance(value, str):
            bands = {}
            for item in value.split(","):
                name, sep, path = item.strip().partition(":")
                if not sep or not name.strip() or not path.strip():
                    raise ValueError(f"band entry '{item.strip()}' is not name:path")
                bands[name.strip()] = path.strip()
            return bands
        return value

    @field_validator("log_level", mode="before")
    @classmethod
    def _check_level(cls, value):
        value = str(value).upper()
        if value not in LOG_LEVELS:
            raise ValueError(f"log_level must be one of {', '.join(LOG_LEVELS)}")
        return value

    @field_validator("percentiles")
    @classmethod
    def _check_percentiles(cls, value):
        if any(not 0 <= p <= 100 for p in value):
            raise ValueError("percentiles must lie in [0, 100]")
        return value

    @field_validator("alphas")
    @classmethod
    def _check_alphas(cls, value):
        if not value or any(not 0 <= a <= 1 for a in value):
            raise ValueError("alphas must be a nonempty list of values in [0, 1]")
        return value

    @field_validator("strata_boundaries")
    @classmethod
    def _check_strata(cls, value):
        if not value or value[0] < 0 or any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError("strata_boundaries must be strictly ascending and start at >= 0")
        return value

    @field_validator("segment_weights")
    @classmethod
    def _check_weights(cls, value):
        if len(value) not in (2, 3):
            raise ValueError("segment_weights takes 2 (CHM, NDVI) or 3 (CHM, NDVI, DTM) values")
        if any(w < 0 for w in value):
            raise ValueError("segment_weights must be >= 0")
        return value

    @model_validator(mode="after")
    def _check_cover_thresholds(self):
        if self.cncvr_foraging > self.cncvr_nesting:
            raise ValueError("cncvr_foraging must not exceed cncvr_nesting")
        return self

    def stage_dir(self, stage):
        return os.path.join(self.output_dir, stage)

    def artifact(self, stage, name):
        return os.path.join(self.output_dir, stage, name)

    @property
    def database_url(self):
        database_url = os.environ.get("EFI_DATABASE_URL")
        if not database_url:
            database_url = "sqlite:///" + os.path.abspath(os.path.join(self.output_dir, "efi_runs.db"))
        if database_url.startswith("postgres://"):
            database_url = database_url.replace("postgres://", "postgresql://", 1)
        return database_url


def parse_config_text(text, source="<config>"):
    """Flat `key = value` lines; '#' starts a comment"""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source} line {lineno}: expected 'key = value'")
        key = key.strip()
        if key in values:
            raise ConfigError(f"{source} line {lineno}: duplicate key '{key}'")
        values[key] = value.strip()
    return values


def _resolve(path, base_dir):
    if path is None or os.path.isabs(path):
        return path
    return os.path.normpath(os.path.join(base_dir, path))


def build_config(values, base_dir=None):
    try:
        config = RunConfig(**values)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"Invalid configuration: {problems}")
    if base_dir is None:
        return config
    update = {key: _resolve(getattr(config, key), base_dir) for key in INPUT_PATH_KEYS}
    update["bands"] = {name: _resolve(path, base_dir) for name, path in config.bands.items()}
    if "output_dir" in values:
        update["output_dir"] = _resolve(config.output_dir, base_dir)
    return config.model_copy(update=update)


def load_config(path=None, seed=None, output_dir=None):
    """
    Config file values, then CLI overrides (--seed, --out), then EFI_LOG_LEVEL.
    Relative paths in the file resolve against the file's directory.
    """
    values = {}
    base_dir = os.getcwd()
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"Config file not found: {path}")
        with open(path) as f:
            values = parse_config_text(f.read(), path)
        base_dir = os.path.dirname(os.path.abspath(path))
    config = build_config(values, base_dir)

    update = {}
    if seed is not None:
        update["seed"] = seed
    if output_dir is not None:
        update["output_dir"] = os.path.abspath(output_dir)
    env_level = os.environ.get("EFI_LOG_LEVEL")
    if env_level:
        update["log_level"] = env_level
    if update:
        merged = config.model_dump()
        merged.update(update)
        config = build_config(merged)
    return config


_engines = {}


def open_catalog(config):
    """Session factory for the run catalog, creating tables on first use"""
    import models  # noqa: F401  registers the tables on Base

    url = config.database_url
    if url not in _engines:
        if url.startswith("sqlite:///"):
            os.makedirs(os.path.dirname(url[len("sqlite:///"):]) or ".", exist_ok=True)
        engine = create_engine(url, pool_recycle=300, pool_pre_ping=True)
        Base.metadata.create_all(engine)
        _engines[url] = sessionmaker(bind=engine, expire_on_commit=False)
    return _engines[url]
