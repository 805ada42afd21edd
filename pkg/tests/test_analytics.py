from datetime import datetime, timedelta

import pytest

from analytics import export_report_data
from app import RunConfig, open_catalog
from models import AttributeMetric, HabitatAcreage, StageRun


@pytest.fixture
def session(tmp_path):
    Session = open_catalog(RunConfig(output_dir=str(tmp_path)))
    with Session() as session:
        yield session


def add_run(session, stage, status="succeeded", seconds=2.0):
    started = datetime(2024, 5, 1, 12, 0, 0)
    run = StageRun(stage=stage, seed=0, status=status, started_at=started,
                   finished_at=started + timedelta(seconds=seconds))
    session.add(run)
    session.flush()
    return run


def test_empty_catalog(session):
    assert export_report_data('accuracy', session) == {}
    assert export_report_data('habitat', session) == {}
    assert export_report_data('stages', session) == {'counts': {}, 'latest': []}


def test_accuracy_uses_latest_successful_training(session):
    old = add_run(session, 'train')
    session.add(AttributeMetric(stage_run_id=old.id, attribute='bapa', best_lambda=1.0, best_alpha=1.0,
                                cv_rmse=9.0, cv_r2=0.1, n_plots=10, n_features=3))
    new = add_run(session, 'train')
    for attribute, score in (('tpa', 0.6), ('bapa', 0.8)):
        session.add(AttributeMetric(stage_run_id=new.id, attribute=attribute, best_lambda=0.1, best_alpha=0.5,
                                    cv_rmse=1.0, cv_r2=score, n_plots=90, n_features=12))
    add_run(session, 'train', status='failed')
    session.commit()

    report = export_report_data('accuracy', session)
    assert report['run_id'] == new.id
    assert [a['attribute'] for a in report['attributes']] == ['bapa', 'tpa']
    assert report['mean_cv_r2'] == pytest.approx(0.7)


def test_habitat_shares(session):
    run = add_run(session, 'habitat')
    for cls, acres in (('Nesting', 30.0), ('Foraging', 10.0), ('Unlikely', 60.0)):
        session.add(HabitatAcreage(stage_run_id=run.id, species='cso', habitat_class=cls, acres=acres, unit_count=1))
    session.commit()

    report = export_report_data('habitat', session)
    cso = report['species']['cso']
    assert cso['total_acres'] == pytest.approx(100.0)
    assert {c['class']: c['share'] for c in cso['classes']} == {'Foraging': 10.0, 'Nesting': 30.0, 'Unlikely': 60.0}


def test_stage_counts(session):
    add_run(session, 'segment')
    add_run(session, 'segment', status='failed', seconds=0.5)
    session.commit()

    report = export_report_data('stages', session)
    assert report['counts'] == {'segment': {'succeeded': 1, 'failed': 1}}
    assert report['latest'] == [{'stage': 'segment', 'status': 'failed', 'seed': 0, 'message': None,
                                 'duration_seconds': 0.5}]


def test_complete_and_unknown(session):
    complete = export_report_data('complete', session)
    assert set(complete) == {'generated_at', 'accuracy', 'habitat', 'stages'}
    assert export_report_data('bogus', session) is None
