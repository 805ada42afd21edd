import numpy as np
import pytest

from errors import PartitionError, SchemaError
from features import FeatureTable
from geodata import CellIndex
from inference import (
    aggregate_to_reporting,
    area_weighted_mean,
    clamp_attributes,
    clamp_matrix,
    predict_cells,
    read_unit_table,
    write_unit_table,
)
from learn import ElasticNetModel
from plots import ATTRIBUTE_NAMES, AttributeVector
from segmentation import Region


def constant_models(value=1.0):
    return {name: ElasticNetModel(value, (), 1.0, 1.0, ()) for name in ATTRIBUTE_NAMES}


def region(rid, *cells):
    return Region(rid, frozenset(CellIndex(*c) for c in cells), (0.0, 0.0), 0.1 * len(cells))


class TestPredictCells:

    table = FeatureTable(((0, 0), (0, 1)), ("a", "b"), np.array([[3.0, 1.0], [0.0, 5.0]]))

    def test_zero_coefficient_model(self):
        raw = predict_cells(constant_models(4.0), self.table)
        assert raw.shape == (2, len(ATTRIBUTE_NAMES))
        assert np.all(raw == 4.0)

    def test_linear_form(self):
        models = constant_models()
        models["bapa"] = ElasticNetModel(0.0, (2.0,), 1.0, 1.0, ("a",))
        raw = predict_cells(models, self.table)
        assert raw[0, ATTRIBUTE_NAMES.index("bapa")] == 6.0

    def test_raw_feature_scaling(self):
        models = constant_models()
        models["tpa"] = ElasticNetModel(10.0, (1.0,), 1.0, 1.0, ("b",), feature_means=(3.0,), feature_stds=(2.0,))
        raw = predict_cells(models, self.table)
        assert raw[:, ATTRIBUTE_NAMES.index("tpa")].tolist() == [9.0, 11.0]

    def test_feature_missing_from_cells(self):
        models = constant_models()
        models["ht"] = ElasticNetModel(0.0, (1.0,), 1.0, 1.0, ("canopy",))
        with pytest.raises(SchemaError, match="canopy"):
            predict_cells(models, self.table)

    def test_attribute_without_model(self):
        models = constant_models()
        del models["dia"]
        with pytest.raises(SchemaError):
            predict_cells(models, self.table)


class TestClamp:

    def test_cover_cap(self):
        assert clamp_attributes({**AttributeVector().as_dict(), "cncvr_pct": 104.0}).cncvr_pct == 100.0

    def test_negative_floor(self):
        raw = np.zeros(len(ATTRIBUTE_NAMES))
        raw[ATTRIBUTE_NAMES.index("tpa")] = -3.0
        assert clamp_attributes(raw).tpa == 0.0

    def test_softwood_subset(self):
        raw = {**AttributeVector().as_dict(), "bapa": 40.0, "bapa_softwood": 50.0}
        assert clamp_attributes(raw).bapa_softwood == 40.0

    def test_softwood_against_floored_bapa(self):
        raw = np.zeros((1, len(ATTRIBUTE_NAMES)))
        raw[0, ATTRIBUTE_NAMES.index("bapa")] = -5.0
        raw[0, ATTRIBUTE_NAMES.index("bapa_softwood")] = 3.0
        clamped = clamp_matrix(raw)
        assert clamped[0, ATTRIBUTE_NAMES.index("bapa_softwood")] == 0.0

    def test_clamp_is_idempotent(self):
        raw = np.random.default_rng(5).normal(20.0, 60.0, size=(500, len(ATTRIBUTE_NAMES)))
        once = clamp_matrix(raw)
        np.testing.assert_array_equal(clamp_matrix(once), once)
        assert all(clamp_attributes(row) == AttributeVector.from_sequence(row) for row in once[:50])


class TestAggregate:

    def test_weighted_mean(self):
        assert area_weighted_mean([[2.0], [6.0]], [0.1, 0.3])[0] == pytest.approx(5.0)

    def test_equal_areas_give_arithmetic_mean(self):
        assert area_weighted_mean([[1.0], [2.0], [6.0]], [0.2, 0.2, 0.2])[0] == pytest.approx(3.0)

    def test_units_and_conservation(self):
        cells = (CellIndex(0, 0), CellIndex(0, 1), CellIndex(0, 2))
        values = np.zeros((3, len(ATTRIBUTE_NAMES)))
        values[:, ATTRIBUTE_NAMES.index("bapa")] = [10.0, 20.0, 60.0]
        units = aggregate_to_reporting(cells, values, 0.1, [region(0, (0, 0), (0, 1)), region(2, (0, 2))])
        assert [u.unit_id for u in units] == [0, 2]
        assert units[0].attributes.bapa == pytest.approx(15.0)
        assert units[1].attributes.bapa == 60.0
        assert sum(u.area for u in units) == pytest.approx(0.3)
        total = sum(u.attributes.bapa * u.area for u in units)
        assert total == pytest.approx(0.1 * values[:, 0].sum())

    def test_unit_values_stay_within_member_range(self):
        rng = np.random.default_rng(6)
        cells = tuple(CellIndex(r, c) for r in range(4) for c in range(4))
        values = clamp_matrix(rng.uniform(0, 80, size=(16, len(ATTRIBUTE_NAMES))))
        regions = [region(0, (0, 0), (0, 1), (1, 0), (1, 1)), region(2, (0, 2), (0, 3)),
                   region(6, (1, 2), (1, 3), (2, 2), (2, 3), (3, 2), (3, 3)), region(8, (2, 0), (2, 1), (3, 0)),
                   region(13, (3, 1))]
        units = aggregate_to_reporting(cells, values, 0.1, regions)
        row_of = {cell: i for i, cell in enumerate(cells)}
        for unit, reg in zip(units, regions):
            member_values = values[[row_of[c] for c in reg.members]]
            got = np.array(unit.attributes.as_tuple())
            assert np.all(got >= member_values.min(axis=0) - 1e-9)
            assert np.all(got <= member_values.max(axis=0) + 1e-9)

    def test_unclaimed_cell(self):
        cells = (CellIndex(0, 0), CellIndex(0, 1))
        with pytest.raises(PartitionError):
            aggregate_to_reporting(cells, np.zeros((2, 8)), 0.1, [region(0, (0, 0))])

    def test_doubly_claimed_cell(self):
        cells = (CellIndex(0, 0), CellIndex(0, 1))
        with pytest.raises(PartitionError):
            aggregate_to_reporting(cells, np.zeros((2, 8)), 0.1, [region(0, (0, 0), (0, 1)), region(1, (0, 1))])

    def test_cell_without_prediction(self):
        with pytest.raises(PartitionError):
            aggregate_to_reporting((CellIndex(0, 0),), np.zeros((1, 8)), 0.1, [region(0, (0, 0), (1, 0))])


def test_unit_table_reads_back(tmp_path):
    cells = (CellIndex(0, 0),)
    values = np.arange(8.0).reshape(1, 8)
    units = aggregate_to_reporting(cells, clamp_matrix(values), 0.1, [region(0, (0, 0))])
    path = str(tmp_path / "units.csv")
    write_unit_table(units, path)
    assert read_unit_table(path) == units
