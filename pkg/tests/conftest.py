import logging

import numpy as np
import pytest

from geodata import PointCloud, RasterGrid

SMALL_RUN = {
    "scene_side": "1800",
    "plots_per_patch": "30",
    "alphas": "0.5, 1.0",
    "lambda_count": "8",
    "cv_folds": "3",
    "max_sweeps": "2000",
    "tol": "1e-6",
    "log_level": "INFO",
}


@pytest.fixture(autouse=True)
def _isolated_environment(monkeypatch):
    monkeypatch.delenv("EFI_DATABASE_URL", raising=False)
    monkeypatch.delenv("EFI_LOG_LEVEL", raising=False)
    yield
    logging.getLogger('efi').setLevel(logging.NOTSET)


@pytest.fixture(scope="session")
def small_run():
    """Config values that keep an end-to-end run to a few seconds"""
    return dict(SMALL_RUN)


@pytest.fixture
def write_config(tmp_path):
    """Write a key = value config file into tmp_path and return its path"""
    def _write(values=None, name="run.cfg"):
        merged = dict(SMALL_RUN)
        merged.update(values or {})
        path = tmp_path / name
        path.write_text("".join(f"{key} = {value}\n" for key, value in merged.items()))
        return path
    return _write


@pytest.fixture
def flat_grid():
    def _grid(nrows, ncols, value=0.0, cellsize=10.0, x_origin=0.0, y_origin=0.0):
        return RasterGrid(ncols, nrows, x_origin, y_origin, cellsize,
                          values=np.full(nrows * ncols, float(value)))
    return _grid


@pytest.fixture
def make_cloud():
    def _cloud(points):
        """points: iterable of (x, y, z, return_number, classification)"""
        arr = np.asarray(points, dtype=float).reshape(-1, 5)
        return PointCloud(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3].astype(int), arr[:, 4].astype(int))
    return _cloud
