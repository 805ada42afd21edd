"""
Command-line pipeline: each subcommand is one stage that reads the
previous stages' artifacts from the output directory and writes its own.

    efi --config run.cfg simulate
    efi --config run.cfg run
    efi --config run.cfg report --type complete
"""

import json
import logging
import os
import sys
from contextlib import contextmanager
from datetime import datetime

import click
import numpy as np
import pandas as pd

from analytics import REPORT_TYPES, export_report_data
from app import configure_logging, load_config, open_catalog
from errors import ConsistencyError, DependencyError, EFIError
from features import FeatureTable, StrataSpec, build_chm, build_dtm, build_feature_table, crop_to_grid
from geodata import PolygonRecord, load_bands, read_ascii_grid, read_point_cloud, write_ascii_grid, write_geojson
from habitat import (
    acreage_report,
    classify_units,
    habitat_properties,
    resolve_thresholds,
    thresholds_metadata,
    write_acreage,
)
from inference import (
    CLAMP_METADATA,
    aggregate_to_reporting,
    clamp_matrix,
    predict_cells,
    read_unit_table,
    write_cell_table,
    write_unit_table,
)
from learn import load_model, save_model, train_attributes
from models import AttributeMetric, HabitatAcreage, StageRun
from plots import ATTRIBUTE_NAMES, compile_all, load_plot_tables, read_plot_attributes, write_plot_attributes
from segmentation import (
    cell_channel_means,
    cell_elevation_means,
    check_partition,
    grow_reporting_units,
    load_segmentation,
    save_segmentation,
    tessellate,
)
from synth import default_scene_spec, generate_scene, load_scene_spec, write_scene
from utils import relative_difference

logger = logging.getLogger('efi.cli')

PIPELINE = ('segment', 'features', 'compile-plots', 'train', 'predict', 'habitat')


def _require(path, stage):
    if not os.path.exists(path):
        raise DependencyError(stage, path)
    return path


def _require_input(path, key):
    if not os.path.exists(path):
        raise ConsistencyError(f"Input '{key}' not found: {path}")
    return path


def _scene_extent(cloud, bands):
    """The band footprint, which the point cloud must fall inside"""
    reference = bands[sorted(bands)[0]]
    extent = reference.extent
    bounds = cloud.bounds
    if bounds is None:
        raise ConsistencyError("Point cloud is empty")
    slack = reference.cellsize
    if (bounds[0] < extent[0] - slack or bounds[1] < extent[1] - slack
            or bounds[2] > extent[2] + slack or bounds[3] > extent[3] + slack):
        raise ConsistencyError(f"Point cloud bounds {bounds} do not match band extent {extent}")
    return extent


# ---------------------------------------------------------------------------
# Stages

def cmd_simulate(config):
    if config.scene_spec:
        spec = load_scene_spec(config.scene_spec, seed=config.seed)
    else:
        spec = default_scene_spec(seed=config.seed, side=config.scene_side, plots_per_patch=config.plots_per_patch)
    scene = generate_scene(spec)
    paths = {
        "plot_csv": config.plot_csv,
        "tree_csv": config.tree_csv,
        "cond_csv": config.cond_csv,
        "cloud_path": config.cloud_path,
        "bands": dict(config.bands),
        "patches": os.path.join(os.path.dirname(config.plot_csv), "patches.json"),
    }
    write_scene(scene, paths)
    return scene


def cmd_segment(config):
    cloud = read_point_cloud(_require_input(config.cloud_path, "cloud_path"))
    bands = load_bands(config.bands)
    extent = _scene_extent(cloud, bands)

    tess = tessellate(extent, config.analysis_unit_area)
    dtm = build_dtm(cloud, config.raster_cellsize, extent)
    chm = build_chm(crop_to_grid(cloud, dtm), dtm)
    chm_means, ndvi_means = cell_channel_means(chm, bands, tess)
    regions = grow_reporting_units(tess, chm_means, ndvi_means, config.reporting_target_area,
                                   config.segment_weights, dtm_means=cell_elevation_means(dtm, tess))
    check_partition(regions, tess)

    out = config.stage_dir("segment")
    save_segmentation(tess, regions, out)
    write_ascii_grid(dtm, os.path.join(out, "dtm.asc"))
    write_ascii_grid(chm, os.path.join(out, "chm.asc"))
    logger.info(f"Segment: {len(regions)} reporting units, mean area {tess.total_area / len(regions):.4f} ac")
    return tess, regions


def cmd_features(config):
    tess, _ = load_segmentation(os.path.dirname(_require(config.artifact("segment", "regions.json"), "segment")))
    dtm = read_ascii_grid(_require(config.artifact("segment", "dtm.asc"), "segment"))
    cloud = read_point_cloud(_require_input(config.cloud_path, "cloud_path"))
    bands = load_bands(config.bands)
    table = build_feature_table(cloud, dtm, bands, tess, StrataSpec(config.strata_boundaries),
                                config.percentiles, config.cover_threshold, config.tpi_radius)
    os.makedirs(config.stage_dir("features"), exist_ok=True)
    table.to_csv(config.artifact("features", "cell_features.csv"))
    return table


def cmd_compile_plots(config):
    pairs = load_plot_tables(
        _require_input(config.plot_csv, "plot_csv"),
        _require_input(config.tree_csv, "tree_csv"),
        _require_input(config.cond_csv, "cond_csv"),
    )
    softwood = set(config.softwood_species) if config.softwood_species is not None else None
    compiled = compile_all(pairs, softwood)
    os.makedirs(config.stage_dir("plots"), exist_ok=True)
    write_plot_attributes(compiled, config.artifact("plots", "plot_attributes.csv"))
    logger.info(f"Compiled attributes for {len(compiled)} plots")
    return compiled


def plot_training_rows(compiled, table, tess):
    """Feature rows for the cells holding each plot; plots outside the scene are dropped"""
    xs = np.array([plot.x for plot, _ in compiled])
    ys = np.array([plot.y for plot, _ in compiled])
    inside = tess.in_scene(xs, ys) if len(compiled) else np.zeros(0, dtype=bool)
    excluded = int((~inside).sum())
    if excluded:
        logger.warning(f"Excluding {excluded} plots outside the scene extent")
    kept = [pair for pair, ok in zip(compiled, inside) if ok]
    row_of = table.row_of()
    if kept:
        rows, cols = tess.cell_of(xs[inside], ys[inside])
        index = [row_of[(int(r), int(c))] for r, c in zip(rows, cols)]
    else:
        index = []
    values = table.values[index] if index else np.empty((0, len(table.names)))
    targets = {name: np.array([getattr(attrs, name) for _, attrs in kept]) for name in ATTRIBUTE_NAMES}
    return values, targets


def cmd_train(config):
    table = FeatureTable.read_csv(_require(config.artifact("features", "cell_features.csv"), "features"))
    compiled = read_plot_attributes(_require(config.artifact("plots", "plot_attributes.csv"), "compile-plots"))
    tess, _ = load_segmentation(os.path.dirname(_require(config.artifact("segment", "regions.json"), "segment")))
    values, targets = plot_training_rows(compiled, table, tess)
    logger.info(f"Training on {values.shape[0]} plots with {values.shape[1]} candidate features")

    check = logging.getLogger('efi').isEnabledFor(logging.DEBUG)
    jobs = [
        dict(attribute=name, rows=values, feature_names=table.names, targets=targets[name],
             alphas=config.alphas, lambda_count=config.lambda_count, lambda_ratio=config.lambda_ratio,
             k=config.cv_folds, keep_fraction=config.keep_fraction, seed=config.seed, tol=config.tol,
             max_sweeps=config.max_sweeps, check_objective=check)
        for name in ATTRIBUTE_NAMES
    ]
    results = train_attributes(jobs, config.workers)

    out = config.stage_dir("models")
    os.makedirs(out, exist_ok=True)
    rows = []
    for result in results:
        save_model(result.model, os.path.join(out, f"{result.attribute}.json"), result.dropped)
        result.report.to_frame().to_csv(os.path.join(out, f"cv_{result.attribute}.csv"), index=False)
        best = result.report.best_point
        rows.append((result.attribute, best.lambda_, best.alpha, best.mean_rmse, best.mean_r2,
                     result.n_plots, result.n_features, result.model.converged))
    pd.DataFrame(rows, columns=["attribute", "best_lambda", "best_alpha", "cv_rmse", "cv_r2",
                                "n_plots", "n_features", "converged"]) \
        .to_csv(os.path.join(out, "metrics.csv"), index=False)
    return results


def load_models(config):
    models = {}
    for name in ATTRIBUTE_NAMES:
        models[name] = load_model(_require(config.artifact("models", f"{name}.json"), "train"))
    return models


def cmd_predict(config):
    models = load_models(config)
    table = FeatureTable.read_csv(_require(config.artifact("features", "cell_features.csv"), "features"))
    tess, regions = load_segmentation(
        os.path.dirname(_require(config.artifact("segment", "regions.json"), "segment"))
    )

    values = clamp_matrix(predict_cells(models, table))
    units = aggregate_to_reporting(table.cells, values, tess.cell_area, regions)

    out = config.stage_dir("predict")
    os.makedirs(out, exist_ok=True)
    write_unit_table(units, os.path.join(out, "units.csv"))
    write_cell_table(table.cells, values, os.path.join(out, "cells.csv"))
    members = {region.id: region.members for region in regions}
    polygons = [PolygonRecord(u.unit_id, members[u.unit_id], u.area, u.attributes.as_dict(prefix="pred_"),
                              cell_acres=tess.cell_area)
                for u in units]
    write_geojson(polygons, tess, os.path.join(out, "units.geojson"), metadata=dict(CLAMP_METADATA))
    return units


def cmd_habitat(config):
    units = read_unit_table(_require(config.artifact("predict", "units.csv"), "predict"))
    tess, regions = load_segmentation(
        os.path.dirname(_require(config.artifact("segment", "regions.json"), "segment"))
    )
    th = resolve_thresholds(
        units, config.dia_min,
        cncvr_nesting=config.cncvr_nesting, cncvr_foraging=config.cncvr_foraging,
        tpa_min=config.tpa_min, softwood_fraction_min=config.softwood_fraction_min,
    )
    results = classify_units(units, th)
    rows = acreage_report(results, units)

    scene_acres = sum(u.area for u in units)
    for species in {r.species for r in rows}:
        classified = sum(r.acres for r in rows if r.species == species)
        if relative_difference(classified, scene_acres) > 1e-6:
            raise ConsistencyError(f"{species} acreage {classified} does not match scene acreage {scene_acres}")

    out = config.stage_dir("habitat")
    os.makedirs(out, exist_ok=True)
    write_acreage(rows, os.path.join(out, "acreage.csv"))
    members = {region.id: region.members for region in regions}
    by_unit = {u.unit_id: u for u in units}
    polygons = [PolygonRecord(r.unit_id, members[r.unit_id], by_unit[r.unit_id].area,
                              habitat_properties(by_unit[r.unit_id], r), cell_acres=tess.cell_area)
                for r in results]
    metadata = dict(CLAMP_METADATA)
    metadata["thresholds"] = thresholds_metadata(th)
    write_geojson(polygons, tess, os.path.join(out, "habitat.geojson"), metadata=metadata)
    return results, rows


def cmd_report(config, report_type="complete"):
    Session = open_catalog(config)
    with Session() as session:
        payload = export_report_data(report_type, session)
    if payload is None:
        raise click.UsageError(f"Unknown report type '{report_type}'")
    os.makedirs(config.stage_dir("report"), exist_ok=True)
    with open(config.artifact("report", "summary.json"), "w") as f:
        json.dump(payload, f, indent=2, default=str)
    return payload


# ---------------------------------------------------------------------------
# Catalog bookkeeping

@contextmanager
def track_stage(config, stage):
    """Record a stage run in the catalog as succeeded or failed"""
    Session = open_catalog(config)
    with Session() as session:
        run = StageRun(stage=stage, seed=config.seed, status='running', output_dir=config.output_dir)
        session.add(run)
        session.commit()
        logger.info(f"Stage {stage} started (seed {config.seed})")
        try:
            yield session, run
        except Exception as e:
            session.rollback()
            run.status = 'failed'
            run.message = str(e)[:2000]
            run.finished_at = datetime.utcnow()
            session.commit()
            logger.error(f"Stage {stage} failed: {e}")
            raise
        run.status = 'succeeded'
        run.finished_at = datetime.utcnow()
        session.commit()
        logger.info(f"Stage {stage} finished in {run.duration_seconds()} s")


def _record_metrics(session, run, results):
    for result in results:
        best = result.report.best_point
        session.add(AttributeMetric(
            stage_run_id=run.id,
            attribute=result.attribute,
            best_lambda=best.lambda_,
            best_alpha=best.alpha,
            cv_rmse=best.mean_rmse,
            cv_r2=best.mean_r2,
            n_plots=result.n_plots,
            n_features=result.n_features,
            converged=result.model.converged,
        ))


def _record_acreage(session, run, rows):
    for row in rows:
        session.add(HabitatAcreage(stage_run_id=run.id, species=row.species, habitat_class=row.habitat_class,
                                   acres=row.acres, unit_count=row.unit_count))


def run_stage(config, stage):
    with track_stage(config, stage) as (session, run):
        if stage == 'simulate':
            return cmd_simulate(config)
        if stage == 'segment':
            return cmd_segment(config)
        if stage == 'features':
            return cmd_features(config)
        if stage == 'compile-plots':
            return cmd_compile_plots(config)
        if stage == 'train':
            results = cmd_train(config)
            _record_metrics(session, run, results)
            return results
        if stage == 'predict':
            return cmd_predict(config)
        if stage == 'habitat':
            results, rows = cmd_habitat(config)
            _record_acreage(session, run, rows)
            return results, rows
        raise click.UsageError(f"Unknown stage '{stage}'")


def cmd_run(config, simulate=False):
    stages = (('simulate',) if simulate else ()) + PIPELINE
    for stage in stages:
        run_stage(config, stage)


# ---------------------------------------------------------------------------
# click surface

@click.group()
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
              help='Run configuration file (key = value lines).')
@click.option('--seed', type=int, default=None, help='Override the configured seed.')
@click.option('--out', 'output_dir', type=click.Path(file_okay=False), default=None,
              help='Override the output directory.')
@click.pass_context
def cli(ctx, config_path, seed, output_dir):
    """Enhanced forest inventory pipeline."""
    config = load_config(config_path, seed=seed, output_dir=output_dir)
    configure_logging(config.log_level)
    ctx.obj = config


def _stage_command(name, help_text):
    @cli.command(name=name, help=help_text)
    @click.pass_obj
    def command(config):
        run_stage(config, name)
    return command


_stage_command('simulate', 'Generate a synthetic scene at the configured input paths.')
_stage_command('segment', 'Tessellate the scene and grow reporting units.')
_stage_command('features', 'Build the feature table for every analysis cell.')
_stage_command('compile-plots', 'Compile per-plot attributes from PLOT/TREE/COND tables.')
_stage_command('train', 'Fit one elastic-net model per attribute.')
_stage_command('predict', 'Predict attributes for every reporting unit.')
_stage_command('habitat', 'Classify habitat and summarize acreage.')


@cli.command(name='run')
@click.option('--simulate', is_flag=True, help='Generate a synthetic scene first.')
@click.pass_obj
def run_command(config, simulate):
    """Run every stage in order."""
    cmd_run(config, simulate)


@cli.command(name='report')
@click.option('--type', 'report_type', type=click.Choice(REPORT_TYPES), default='complete')
@click.option('--stdout', 'echo', is_flag=True, help='Also print the summary JSON.')
@click.pass_obj
def report_command(config, report_type, echo):
    """Summarize the run catalog to report/summary.json."""
    payload = cmd_report(config, report_type)
    if echo:
        click.echo(json.dumps(payload, indent=2, default=str))


def main(argv=None):
    """Run the CLI and return its exit code: 0 ok, 1 usage/config, 2 data errors"""
    try:
        cli.main(args=argv, prog_name='efi', standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.exceptions.Abort:
        return 1
    except click.ClickException as e:
        e.show()
        return 1
    except EFIError as e:
        logging.getLogger('efi').error(str(e))
        return e.exit_code
    except OSError as e:
        logging.getLogger('efi').error(f"I/O error: {e}")
        return 2
    return 0


def run_main():
    sys.exit(main())


if __name__ == '__main__':
    run_main()
