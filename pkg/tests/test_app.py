import os

import pytest
from sqlalchemy import select

from app import RunConfig, build_config, load_config, open_catalog, parse_config_text
from errors import ConfigError
from models import AttributeMetric, StageRun


class TestParse:

    def test_comments_and_blanks(self):
        values = parse_config_text("# run\n\nseed = 3  # fixed\nworkers=2\n")
        assert values == {"seed": "3", "workers": "2"}

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="line 1"):
            parse_config_text("seed 3\n")

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_text("seed = 1\nseed = 2\n")


class TestBuildConfig:

    def test_defaults(self):
        config = build_config({})
        assert config.keep_fraction == 0.4375
        assert config.alphas == tuple(round(0.1 * i, 1) for i in range(1, 11))
        assert config.percentiles[0] == 5.0 and config.percentiles[-1] == 95.0
        assert config.dia_min is None

    def test_fractions_and_lists(self):
        config = build_config({"keep_fraction": "7/16", "analysis_unit_area": "1/6", "alphas": "0.5, 1"})
        assert config.keep_fraction == 0.4375
        assert config.analysis_unit_area == pytest.approx(1 / 6)
        assert config.alphas == (0.5, 1.0)

    def test_bands(self, tmp_path):
        config = build_config({"bands": "red: r.asc, nir:n.asc"}, str(tmp_path))
        assert config.bands == {"red": str(tmp_path / "r.asc"), "nir": str(tmp_path / "n.asc")}

    def test_bad_band_entry(self):
        with pytest.raises(ConfigError, match="bands"):
            build_config({"bands": "red"})

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="colour"):
            build_config({"colour": "green"})

    def test_cover_thresholds_ordered(self):
        with pytest.raises(ConfigError):
            build_config({"cncvr_nesting": "30", "cncvr_foraging": "40"})

    @pytest.mark.parametrize("key,value", [
        ("keep_fraction", "0"), ("alphas", "1.5"), ("strata_boundaries", "0, 6, 3"),
        ("cv_folds", "1"), ("log_level", "LOUD"), ("percentiles", "50, 101"),
        ("segment_weights", "1, 1, 1, 1"), ("segment_weights", "1, -1"), ("tpi_radius", "0"),
    ])
    def test_invalid_values(self, key, value):
        with pytest.raises(ConfigError):
            build_config({key: value})

    def test_segment_weights(self):
        assert build_config({}).segment_weights == (1.0, 1.0, 1.0)
        assert build_config({"segment_weights": "2, 0.5"}).segment_weights == (2.0, 0.5)
        assert build_config({"tpi_radius": "5"}).tpi_radius == 5

    def test_frozen(self):
        with pytest.raises(Exception):
            build_config({}).seed = 4


class TestLoadConfig:

    def test_paths_resolve_against_config_dir(self, write_config, tmp_path):
        config = load_config(str(write_config({"output_dir": "out", "plot_csv": "data/PLOT.csv"})))
        assert config.output_dir == str(tmp_path / "out")
        assert config.plot_csv == str(tmp_path / "data" / "PLOT.csv")
        assert config.scene_side == 1800.0

    def test_overrides(self, write_config, tmp_path, monkeypatch):
        monkeypatch.setenv("EFI_LOG_LEVEL", "debug")
        config = load_config(str(write_config({"seed": "1"})), seed=8, output_dir=str(tmp_path / "elsewhere"))
        assert config.seed == 8
        assert config.output_dir == str(tmp_path / "elsewhere")
        assert config.log_level == "DEBUG"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(str(tmp_path / "absent.cfg"))

    def test_stage_paths(self):
        config = RunConfig(output_dir="o")
        assert config.artifact("models", "bapa.json") == os.path.join("o", "models", "bapa.json")


class TestCatalog:

    def test_default_url_lives_in_output_dir(self, tmp_path):
        config = RunConfig(output_dir=str(tmp_path))
        assert config.database_url == "sqlite:///" + str(tmp_path / "efi_runs.db")

    def test_postgres_scheme_rewritten(self, monkeypatch):
        monkeypatch.setenv("EFI_DATABASE_URL", "postgres://u@h/db")
        assert RunConfig().database_url == "postgresql://u@h/db"

    def test_runs_and_metrics_persist(self, tmp_path):
        Session = open_catalog(RunConfig(output_dir=str(tmp_path)))
        with Session() as session:
            run = StageRun(stage="train", seed=0, status="succeeded")
            session.add(run)
            session.flush()
            session.add(AttributeMetric(stage_run_id=run.id, attribute="bapa", best_lambda=0.1, best_alpha=1.0,
                                        cv_rmse=2.0, cv_r2=0.8, n_plots=50, n_features=10))
            session.commit()
        with Session() as session:
            stored = session.scalars(select(StageRun)).one()
            assert [m.attribute for m in stored.metrics] == ["bapa"]
            assert stored.duration_seconds() is None
