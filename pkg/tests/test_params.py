import json

import numpy as np
import pytest

from blockpf import (
    BlockPartition,
    ParameterLayout,
    ParameterMatrix,
    ParamSpec,
    collapse,
    expand_shared,
    from_estimation_scale,
    load_params,
    make_block_partition,
    save_params,
    theta_from_estimation,
    theta_to_estimation,
    to_estimation_scale,
)
from blockpf.measles import SIM_TRUTH, measles_layout, theta_from_dict


def test_expand_replicates_shared(two_unit_layout):
    pm = expand_shared([0.5, 0.4, 0.6], two_unit_layout)
    assert pm.values.tolist() == [[0.5, 0.4], [0.5, 0.6]]


def test_expand_single_unit_is_reshape():
    layout = ParameterLayout(
        [ParamSpec("a", "shared"), ParamSpec("b", "unit_specific")], 1
    )
    pm = expand_shared([1.5, 2.5], layout)
    assert pm.values.tolist() == [[1.5, 2.5]]


def test_expand_measles_submodel_a_structure():
    layout = measles_layout("A", 20)
    assert len(layout.shared_cols) == 9
    assert len(layout.unit_cols) == 4
    assert layout.flat_dim == 9 + 4 * 20
    pm = expand_shared(theta_from_dict(layout, SIM_TRUTH), layout)
    assert pm.values.shape == (20, 13)
    for d in layout.shared_cols:
        col = pm.values[:, d]
        assert np.all(col == col[0])


def test_expand_rejects_dimension_mismatch(two_unit_layout):
    with pytest.raises(ValueError, match="entries"):
        expand_shared([0.5, 0.4], two_unit_layout)


def test_collapse_round_trip(two_unit_layout):
    theta = np.array([0.5, 0.4, 0.6])
    assert np.array_equal(collapse(expand_shared(theta, two_unit_layout)), theta)


def test_collapse_constant_log_column_exact():
    layout = ParameterLayout([ParamSpec("s", "shared", "log")], 2)
    pm = ParameterMatrix(np.array([[1.0], [1.0]]), layout)
    assert collapse(pm)[0] == 1.0


def test_collapse_diverged_log_column_geometric_mean():
    layout = ParameterLayout([ParamSpec("s", "shared", "log")], 2)
    pm = ParameterMatrix(np.array([[2.0], [8.0]]), layout)
    assert collapse(pm)[0] == pytest.approx(4.0, rel=1e-12)


def test_transform_points():
    layout = ParameterLayout(
        [ParamSpec("a", "shared", "log"), ParamSpec("b", "shared", "logit")], 1
    )
    est = to_estimation_scale(np.array([[1.0, 0.5]]), layout)
    assert est[0, 0] == 0.0
    assert est[0, 1] == 0.0


def test_transform_round_trip_randomized():
    rng = np.random.default_rng(0)
    layout = ParameterLayout(
        [
            ParamSpec("a", "shared", "log"),
            ParamSpec("b", "unit_specific", "logit"),
            ParamSpec("c", "shared", "identity"),
        ],
        4,
    )
    for _ in range(200):
        vals = np.column_stack(
            [
                rng.uniform(1e-3, 1e3, 4),
                rng.uniform(1e-4, 1 - 1e-4, 4),
                rng.normal(0, 10, 4),
            ]
        )
        back = from_estimation_scale(to_estimation_scale(vals, layout), layout)
        assert np.allclose(back, vals, rtol=1e-12, atol=0)


def test_transform_domain_rejected():
    layout = ParameterLayout([ParamSpec("b", "shared", "logit")], 1)
    with pytest.raises(ValueError, match="logit"):
        to_estimation_scale(np.array([[1.2]]), layout)
    log_layout = ParameterLayout([ParamSpec("a", "shared", "log")], 1)
    with pytest.raises(ValueError, match="log"):
        to_estimation_scale(np.array([[-1.0]]), log_layout)


def test_parameter_matrix_validates_domains():
    layout = ParameterLayout([ParamSpec("a", "shared", "log")], 2)
    with pytest.raises(ValueError):
        ParameterMatrix(np.array([[0.0], [1.0]]), layout)


def test_theta_estimation_round_trip():
    layout = measles_layout("A", 3)
    theta = theta_from_dict(layout, {**SIM_TRUTH, "cohort": 0.4})
    est = theta_to_estimation(theta, layout)
    assert est.shape == (layout.flat_dim,)
    back = theta_from_estimation(est, layout)
    assert np.allclose(back, theta, rtol=1e-12)


def test_block_partition_default_singletons():
    part = make_block_partition(3)
    assert part.blocks == ((0,), (1,), (2,))


def test_block_partition_contiguous_pairs():
    part = make_block_partition(4, block_size=2)
    assert part.blocks == ((0, 1), (2, 3))


def test_block_partition_explicit():
    part = make_block_partition(3, blocks=[(0, 2), (1,)])
    assert part.blocks == ((0, 2), (1,))


def test_block_partition_rejects_overlap_and_omission():
    with pytest.raises(ValueError):
        make_block_partition(3, blocks=[(0, 1), (1, 2)])
    with pytest.raises(ValueError):
        make_block_partition(3, blocks=[(0,), (2,)])
    with pytest.raises(ValueError):
        BlockPartition(((0,), (1,)), 3)


def test_param_doc_round_trip(tmp_path, two_unit_layout):
    pm = expand_shared([0.5, 0.4, 0.6], two_unit_layout)
    path = tmp_path / "params.json"
    save_params(path, pm)
    doc = json.loads(path.read_text())
    entry = doc["params"][0]
    assert set(entry) == {"name", "kind", "transform", "ivp", "value"}
    assert "values" in doc["params"][1]
    loaded = load_params(path)
    assert np.array_equal(loaded.values, pm.values)
    assert loaded.layout.names == two_unit_layout.names


def test_param_doc_diverged_shared_uses_values(tmp_path):
    layout = ParameterLayout([ParamSpec("s", "shared", "log")], 2)
    pm = ParameterMatrix(np.array([[2.0], [8.0]]), layout)
    path = tmp_path / "p.json"
    save_params(path, pm)
    doc = json.loads(path.read_text())
    assert doc["params"][0]["values"] == [2.0, 8.0]
    assert np.array_equal(load_params(path).values, pm.values)
