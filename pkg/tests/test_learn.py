import json

import numpy as np
import pytest

from errors import ConsistencyError, DataError, DomainError, FormatError, NumericError, SchemaError
from learn import (
    DesignMatrix,
    ElasticNetModel,
    apply_normalizer,
    cv_grid_search,
    fit_elastic_net,
    fit_normalizer,
    fit_path,
    fold_assignments,
    lambda_max,
    lambda_path,
    load_model,
    objective,
    r2,
    rmse,
    save_model,
    select_features,
    soft_threshold,
    train_attribute,
)


def design(rows, targets, names=None):
    rows = np.asarray(rows, dtype=float)
    if rows.ndim == 1:
        rows = rows.reshape(-1, 1)
    names = names or tuple(f"f{j}" for j in range(rows.shape[1]))
    return DesignMatrix(rows, names, targets)


def random_problem(n=60, p=6, seed=0, noise=0.1):
    rng = np.random.default_rng(seed)
    rows = rng.normal(size=(n, p))
    rows = (rows - rows.mean(axis=0)) / rows.std(axis=0)
    beta = rng.normal(size=p)
    return design(rows, 1.5 + rows @ beta + rng.normal(0, noise, n))


class TestNormalizer:

    def test_two_points(self):
        norm = fit_normalizer([[1.0], [3.0]])
        assert norm.means == (2.0,)
        assert norm.stds == (1.0,)
        assert apply_normalizer(norm, [[1.0], [3.0]]).ravel().tolist() == [-1.0, 1.0]

    def test_constant_column_dropped(self):
        norm = fit_normalizer([[1.0, 5.0], [3.0, 5.0], [4.0, 5.0]], ("a", "b"))
        assert norm.feature_names == ("a",)
        assert norm.dropped == ("b",)

    def test_fitting_rows_are_centered(self):
        rows = np.random.default_rng(4).uniform(0, 100, (20, 3))
        norm = fit_normalizer(rows)
        np.testing.assert_allclose(apply_normalizer(norm, rows).mean(axis=0), 0.0, atol=1e-12)

    def test_single_row(self):
        with pytest.raises(DataError):
            fit_normalizer([[1.0, 2.0]])

    def test_missing_feature(self):
        norm = fit_normalizer([[1.0], [3.0]], ("a",))
        with pytest.raises(SchemaError, match="'a'"):
            apply_normalizer(norm, [[1.0], [2.0]], ("b",))


class TestSelectFeatures:

    def test_exact_predictor_kept(self):
        rng = np.random.default_rng(2)
        rows = rng.normal(size=(30, 3))
        X = design(rows, rows[:, 1])
        for fraction in (0.1, 0.5, 0.9):
            assert "f1" in select_features(X, fraction).feature_names

    def test_full_fraction_is_identity(self):
        X = random_problem()
        assert select_features(X, 1.0) is X

    def test_ceiling_count(self):
        X = random_problem(p=10)
        selected = select_features(X, 0.4375)
        assert selected.p == 5
        assert list(selected.feature_names) == sorted(selected.feature_names, key=lambda n: int(n[1:]))

    def test_fraction_domain(self):
        with pytest.raises(DomainError):
            select_features(random_problem(), 0.0)


@pytest.mark.parametrize("z,gamma,expected", [(3, 1, 2), (-0.5, 1, 0), (-3, 1, -2)])
def test_soft_threshold(z, gamma, expected):
    assert soft_threshold(z, gamma) == expected


class TestFitElasticNet:

    def test_least_squares_limit(self):
        model = fit_elastic_net(design([-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0]), 0.0, 1.0)
        assert model.coefficients[0] == pytest.approx(2.0)
        assert model.intercept == pytest.approx(0.0, abs=1e-12)
        assert model.converged

    def test_full_shrinkage_at_lambda_max(self):
        X = random_problem()
        top = lambda_max(X, 1.0)
        model = fit_elastic_net(X, top, 1.0)
        assert all(b == 0 for b in model.coefficients)
        assert model.intercept == pytest.approx(X.targets.mean())
        below = fit_elastic_net(X, 0.9 * top, 1.0)
        assert any(b != 0 for b in below.coefficients)

    def test_single_coordinate_closed_form(self):
        x = np.array([-1.0, 1.0, -1.0, 1.0])
        y = np.array([1.0, 3.0, 0.5, 3.5])
        model = fit_elastic_net(design(x, y), 0.5, 0.5, tol=1e-12)
        rho = x @ (y - y.mean()) / len(y)
        assert model.coefficients[0] == pytest.approx(soft_threshold(rho, 0.25) / 1.25)
        assert model.intercept == pytest.approx(y.mean())

    def test_ridge_matches_normal_equations(self):
        X = random_problem(n=40, p=4, seed=5)
        lam = 0.3
        model = fit_elastic_net(X, lam, 0.0, tol=1e-12)
        xc = X.rows - X.rows.mean(axis=0)
        yc = X.targets - X.targets.mean()
        expected = np.linalg.solve(xc.T @ xc / X.n + lam * np.eye(X.p), xc.T @ yc / X.n)
        np.testing.assert_allclose(model.coefficients, expected, atol=1e-8)

    def test_objective_never_increases(self):
        X = random_problem(n=50, p=8, seed=7, noise=1.0)
        for alpha in (0.0, 0.3, 1.0):
            model = fit_elastic_net(X, 0.05, alpha, check_objective=True)
            start = objective(X, X.targets.mean(), np.zeros(X.p), 0.05, alpha)
            assert objective(X, model.intercept, model.coefficients, 0.05, alpha) <= start

    def test_sweep_limit_flags_model(self, caplog):
        X = random_problem(n=50, p=8, seed=8)
        model = fit_elastic_net(X, 1e-4, 0.5, tol=1e-15, max_sweeps=1)
        assert not model.converged
        assert "did not converge" in caplog.text

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            fit_elastic_net(design([1.0, np.inf, 2.0], [1.0, 2.0, 3.0]), 0.1, 0.5)

    def test_parameter_domains(self):
        X = random_problem()
        with pytest.raises(DomainError):
            fit_elastic_net(X, -1.0, 0.5)
        with pytest.raises(DomainError):
            fit_elastic_net(X, 0.1, 1.5)


class TestLambdaPath:

    def test_endpoints(self):
        X = random_problem()
        path = lambda_path(X, 0.5, count=2, ratio=1e-3)
        assert path[0] == pytest.approx(lambda_max(X, 0.5))
        assert path[1] == pytest.approx(1e-3 * path[0])

    def test_descending(self):
        path = lambda_path(random_problem(), 1.0, count=10)
        assert all(a > b for a, b in zip(path, path[1:]))

    def test_ridge_uses_alpha_floor(self):
        X = random_problem()
        assert lambda_max(X, 0.0) == pytest.approx(lambda_max(X, 0.01))


class TestCrossValidation:

    def test_leave_one_out_folds(self):
        folds = fold_assignments(5, 5, seed=3)
        assert sorted(folds.tolist()) == [0, 1, 2, 3, 4]

    def test_folds_are_seeded(self):
        assert fold_assignments(20, 4, 1).tolist() == fold_assignments(20, 4, 1).tolist()
        assert np.bincount(fold_assignments(20, 4, 1)).tolist() == [5, 5, 5, 5]

    def test_too_few_rows(self):
        with pytest.raises(DataError):
            fold_assignments(3, 5)

    def test_recovers_sparse_signal(self):
        rng = np.random.default_rng(11)
        rows = rng.normal(size=(100, 51))
        X = design(rows, 3.0 * rows[:, 0])
        model, report = cv_grid_search(X, alphas=(0.5, 1.0), lambda_count=15, k=5, seed=0, tol=1e-8)
        assert abs(model.coefficients[0] - 3.0) < 0.1
        assert report.best_point.mean_r2 >= 0.99
        assert len(report.grid) == 30
        assert report.fold_sizes == (20, 20, 20, 20, 20)

    def test_constant_target_is_intercept_only(self):
        rows = np.random.default_rng(12).normal(size=(12, 3))
        model, report = cv_grid_search(design(rows, np.full(12, 4.0)), alphas=(0.5,), lambda_count=5, k=3)
        assert all(b == 0 for b in model.coefficients)
        assert model.intercept == pytest.approx(4.0)
        assert report.best_point.mean_rmse == pytest.approx(0.0, abs=1e-12)

    def test_ties_prefer_larger_lambda(self):
        rows = np.random.default_rng(12).normal(size=(12, 3))
        _, report = cv_grid_search(design(rows, np.full(12, 4.0)), alphas=(0.5, 1.0), lambda_count=4, k=3)
        assert report.best == (max(g.lambda_ for g in report.grid), 1.0)


class TestMetrics:

    def test_rmse(self):
        assert rmse([0.0, 0.0], [1.0, -1.0]) == 1.0

    def test_perfect_fit(self):
        y = [1.0, 2.0, 4.0]
        assert rmse(y, y) == 0.0
        assert r2(y, y) == 1.0

    def test_mean_predictor(self):
        y = np.array([1.0, 2.0, 6.0])
        assert r2(y, np.full(3, y.mean())) == pytest.approx(0.0)


class TestModelFile:

    def test_saved_model_predicts_identically(self, tmp_path):
        X = random_problem()
        model = fit_elastic_net(X, 0.01, 0.5)
        path = str(tmp_path / "bapa.json")
        save_model(model, path, dropped=("flat",))
        loaded = load_model(path)
        assert loaded == model
        assert json.loads((tmp_path / "bapa.json").read_text())["normalizer"]["dropped"] == ["flat"]

    def test_wrong_format(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text(json.dumps({"format": "something-else", "version": 1}))
        with pytest.raises(FormatError):
            load_model(str(path))

    def test_zero_coefficient_model_predicts_intercept(self):
        model = ElasticNetModel(7.5, (0.0, 0.0), 1.0, 1.0, ("a", "b"))
        assert model.predict_normalized(np.ones((3, 2))).tolist() == [7.5, 7.5, 7.5]


def test_train_attribute_end_to_end():
    rng = np.random.default_rng(21)
    raw = rng.uniform(0, 50, size=(60, 8))
    raw[:, 7] = 3.0
    targets = 2.0 * raw[:, 2] + 10.0
    names = tuple(f"h{j}" for j in range(8))
    result = train_attribute("ht", raw, names, targets, alphas=(1.0,), lambda_count=10, k=3,
                             keep_fraction=0.5, seed=0)
    assert result.dropped == ("h7",)
    assert "h2" in result.model.selected_features
    assert result.n_plots == 60
    assert result.n_features == 4
    assert result.model.attribute == "ht"
    index = [names.index(n) for n in result.model.selected_features]
    np.testing.assert_allclose(result.model.predict(raw[:, index]), targets, rtol=0.02)


def normal_equations(X, lam):
    xc = X.rows - X.rows.mean(axis=0)
    yc = X.targets - X.targets.mean()
    return np.linalg.solve(xc.T @ xc / X.n + lam * np.eye(X.p), xc.T @ yc / X.n)


class TestSolverAccuracy:

    @pytest.mark.parametrize("seed", range(25))
    def test_ridge_on_random_problems(self, seed):
        X = random_problem(n=40, p=8, seed=100 + seed, noise=0.5)
        lam = 0.02 + 0.1 * (seed % 5)
        model = fit_elastic_net(X, lam, 0.0, tol=1e-12)
        expected = normal_equations(X, lam)
        np.testing.assert_allclose(model.coefficients, expected, rtol=1e-4, atol=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_unpenalized_fit_is_least_squares(self, seed):
        X = random_problem(n=40, p=8, seed=200 + seed, noise=0.5)
        model = fit_elastic_net(X, 0.0, 0.5, tol=1e-12)
        solution, *_ = np.linalg.lstsq(np.column_stack([np.ones(X.n), X.rows]), X.targets, rcond=None)
        assert model.intercept == pytest.approx(solution[0], rel=1e-6)
        np.testing.assert_allclose(model.coefficients, solution[1:], rtol=1e-4, atol=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_lasso_at_lambda_max_is_empty(self, seed):
        X = random_problem(n=40, p=8, seed=300 + seed)
        model = fit_elastic_net(X, lambda_max(X, 1.0), 1.0)
        assert model.coefficients == (0.0,) * 8

    @pytest.mark.parametrize("seed", range(10))
    def test_objective_monotone_per_sweep(self, seed):
        X = random_problem(n=50, p=8, seed=400 + seed, noise=1.0)
        model = fit_elastic_net(X, 0.02, 0.1 * (seed + 1) - 0.1, check_objective=True)
        assert model.converged

    def test_l1_norm_along_lasso_path(self):
        X = random_problem(n=80, p=10, seed=31, noise=1.0)
        models = fit_path(X, 1.0, lambda_path(X, 1.0, count=50), tol=1e-12)
        norms = [float(np.abs(m.coefficients).sum()) for m in models]
        assert len(norms) == 50
        assert norms[0] == 0.0
        assert all(later >= earlier - 1e-8 for earlier, later in zip(norms, norms[1:]))

    def test_row_order_does_not_matter(self):
        X = random_problem(n=60, p=6, seed=41, noise=0.5)
        order = np.random.default_rng(42).permutation(X.n)
        shuffled = DesignMatrix(X.rows[order], X.feature_names, X.targets[order])
        first = fit_elastic_net(X, 0.03, 0.7, tol=1e-12)
        second = fit_elastic_net(shuffled, 0.03, 0.7, tol=1e-12)
        np.testing.assert_allclose(first.coefficients, second.coefficients, atol=1e-9)
        assert first.intercept == pytest.approx(second.intercept, abs=1e-9)

    def test_warm_start_reaches_same_solution(self):
        X = random_problem(n=60, p=6, seed=43)
        start = fit_elastic_net(X, 0.2, 0.5)
        warm = fit_elastic_net(X, 0.05, 0.5, tol=1e-12, warm_start=start)
        cold = fit_elastic_net(X, 0.05, 0.5, tol=1e-12)
        np.testing.assert_allclose(warm.coefficients, cold.coefficients, atol=1e-9)

    def test_warm_start_needs_same_features(self):
        X = random_problem(n=30, p=3, seed=44)
        other = ElasticNetModel(0.0, (0.0, 0.0, 0.0), 0.1, 0.5, ("x", "y", "z"))
        with pytest.raises(ConsistencyError):
            fit_elastic_net(X, 0.1, 0.5, warm_start=other)


def sparse_problem(seed, n=100, p=50, active=5, snr=10.0):
    rng = np.random.default_rng(seed)
    support = np.sort(rng.choice(p, active, replace=False))
    beta = np.zeros(p)
    beta[support] = rng.uniform(1.0, 2.0, active) * rng.choice([-1.0, 1.0], active)
    rows = rng.normal(size=(2 * n, p))
    signal = rows @ beta
    targets = signal + rng.normal(0, np.sqrt(signal.var() / snr), 2 * n)
    names = tuple(f"f{j}" for j in range(p))
    train = DesignMatrix(rows[:n], names, targets[:n])
    return train, rows[n:], targets[n:], support


class TestGridSearch:

    def test_refit_matches_direct_fit(self):
        X = random_problem(n=50, p=5, seed=51, noise=1.0)
        model, report = cv_grid_search(X, alphas=(0.5, 1.0), lambda_count=10, k=5, tol=1e-10)
        direct = fit_elastic_net(X, report.best[0], report.best[1], tol=1e-12)
        np.testing.assert_allclose(model.coefficients, direct.coefficients, atol=1e-6)
        assert (model.lambda_, model.alpha) == report.best

    def test_grid_is_alpha_major(self):
        X = random_problem(n=30, p=3, seed=52)
        _, report = cv_grid_search(X, alphas=(0.2, 0.8), lambda_count=6, k=3)
        assert [g.alpha for g in report.grid] == [0.2] * 6 + [0.8] * 6
        assert [g.lambda_ for g in report.grid[:6]] == lambda_path(X, 0.2, 6)

    def test_recovers_five_of_fifty(self):
        passing = 0
        for seed in range(10):
            X, held_rows, held_targets, support = sparse_problem(600 + seed)
            model, _ = cv_grid_search(X, seed=seed)
            found = np.intersect1d(np.flatnonzero(np.asarray(model.coefficients) != 0), support)
            score = r2(held_targets, model.predict_normalized(held_rows))
            passing += len(found) >= 4 and score >= 0.8
        assert passing >= 9
