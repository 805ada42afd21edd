"""
Reporting over the run catalog: model accuracy, habitat acreage and
stage history.
"""

import logging
from datetime import datetime

from sqlalchemy import func, select
from sqlalchemy.exc import SQLAlchemyError

from models import StageRun

logger = logging.getLogger('efi.analytics')

REPORT_TYPES = ('accuracy', 'habitat', 'stages', 'complete')


def _latest_run(session, stage):
    return session.scalars(
        select(StageRun)
        .where(StageRun.stage == stage, StageRun.status == 'succeeded')
        .order_by(StageRun.id.desc())
        .limit(1)
    ).first()


def generate_accuracy_report(session):
    """Cross-validated accuracy of the most recent training run"""
    try:
        run = _latest_run(session, 'train')
        if run is None:
            return {}
        metrics = sorted(run.metrics, key=lambda m: m.attribute)
        return {
            'run_id': run.id,
            'seed': run.seed,
            'attributes': [{
                'attribute': m.attribute,
                'best_lambda': m.best_lambda,
                'best_alpha': m.best_alpha,
                'cv_rmse': m.cv_rmse,
                'cv_r2': m.cv_r2,
                'n_plots': m.n_plots,
                'n_features': m.n_features,
                'converged': m.converged,
            } for m in metrics],
            'mean_cv_r2': round(sum(m.cv_r2 for m in metrics) / len(metrics), 4) if metrics else None,
        }
    except SQLAlchemyError as e:
        logger.error(f"Error generating accuracy report: {str(e)}")
        return {}


def generate_habitat_report(session):
    """Acreage per species and class from the most recent habitat run"""
    try:
        run = _latest_run(session, 'habitat')
        if run is None:
            return {}
        by_species = {}
        for row in sorted(run.acreage, key=lambda r: (r.species, r.habitat_class)):
            entry = by_species.setdefault(row.species, {'total_acres': 0.0, 'classes': []})
            entry['total_acres'] += row.acres
            entry['classes'].append({'class': row.habitat_class, 'acres': row.acres, 'unit_count': row.unit_count})
        for entry in by_species.values():
            total = entry['total_acres']
            for item in entry['classes']:
                item['share'] = round(item['acres'] / total * 100, 2) if total > 0 else 0
        return {'run_id': run.id, 'seed': run.seed, 'species': by_species}
    except SQLAlchemyError as e:
        logger.error(f"Error generating habitat report: {str(e)}")
        return {}


def generate_stage_report(session):
    """Run counts per stage and status, plus the latest run of each stage"""
    try:
        counts = session.execute(
            select(StageRun.stage, StageRun.status, func.count(StageRun.id).label('runs'))
            .group_by(StageRun.stage, StageRun.status)
        ).all()
        stages = {}
        for stage, status, runs in counts:
            stages.setdefault(stage, {})[status] = runs
        latest = []
        for stage in sorted(stages):
            run = session.scalars(
                select(StageRun).where(StageRun.stage == stage).order_by(StageRun.id.desc()).limit(1)
            ).first()
            latest.append({
                'stage': stage,
                'status': run.status,
                'seed': run.seed,
                'message': run.message,
                'duration_seconds': run.duration_seconds(),
            })
        return {'counts': stages, 'latest': latest}
    except SQLAlchemyError as e:
        logger.error(f"Error generating stage report: {str(e)}")
        return {}


def export_report_data(report_type, session):
    """Report payload for `report_type`, or None for an unknown type"""
    if report_type == 'accuracy':
        return generate_accuracy_report(session)
    elif report_type == 'habitat':
        return generate_habitat_report(session)
    elif report_type == 'stages':
        return generate_stage_report(session)
    elif report_type == 'complete':
        return {
            'generated_at': datetime.now().isoformat(),
            'accuracy': generate_accuracy_report(session),
            'habitat': generate_habitat_report(session),
            'stages': generate_stage_report(session),
        }
    return None
