import numpy as np
import pytest

from blockpf import (
    FilterError,
    Swarm,
    TimeGrid,
    block_log_weights,
    bpf_run,
    make_block_partition,
    resample_block,
    stream,
)
from blockpf.filtering import LOG_FLOOR
from blockpf.params import ParameterLayout, ParamSpec

from conftest import ConstDensityModel, TableDensityModel


def grid_for(n):
    return TimeGrid(0.0, np.arange(1.0, n + 1.0), 1.0)


def test_resample_equal_weights_identity_coverage():
    anc = resample_block(np.zeros(4), stream(0, 1))
    assert sorted(anc.tolist()) == [0, 1, 2, 3]


def test_resample_degenerate_weight():
    lw = np.array([0.0, -np.inf, -np.inf, -np.inf])
    anc = resample_block(lw, stream(0, 2))
    assert np.all(anc == 0)


def test_resample_frequency_matches_weight():
    lw = np.log(np.array([0.75, 0.25]))
    anc = resample_block(lw, stream(0, 3), n_out=10**6)
    freq = np.mean(anc == 0)
    assert abs(freq - 0.75) < 0.002


def test_resample_marginal_probability():
    rng = np.random.default_rng(42)
    w = rng.random(8)
    lw = np.log(w / w.sum())
    counts = np.zeros(8)
    reps = 20_000
    for r in range(reps):
        counts += np.bincount(resample_block(lw, stream(1, r)), minlength=8)
    freq = counts / (8 * reps)
    p = w / w.sum()
    se = np.sqrt(p * (1 - p) / (8 * reps))
    assert np.all(np.abs(freq - p) < 4 * se + 1e-4)


def test_resample_all_minus_inf_uniform_fallback():
    anc = resample_block(np.full(16, -np.inf), stream(0, 4))
    assert len(anc) == 16
    assert set(anc.tolist()) <= set(range(16))


def test_block_log_weights_unit_density_one():
    model = ConstDensityModel(2, log_density=0.0)
    states = np.zeros((5, 2, 1))
    params = np.zeros((5, 2, 0))
    lw = block_log_weights(model, np.array([1.0, 2.0]), states, params, (0,))
    assert np.all(lw == 0.0)


def test_block_log_weights_missing_contributes_zero():
    model = ConstDensityModel(2, log_density=-3.0)
    states = np.zeros((4, 2, 1))
    params = np.zeros((4, 2, 0))
    lw = block_log_weights(
        model, np.array([np.nan, np.nan]), states, params, (0, 1)
    )
    assert np.all(lw == 0.0)


def test_block_log_weights_product_rule():
    table = np.log(np.array([[[0.2, 0.5]]]))  # one time, one particle, two units
    model = TableDensityModel(table)
    states = model.rinit(np.zeros((1, 2, 0)), None)
    lw = block_log_weights(model, np.array([0.0, 0.0]), states, np.zeros((1, 2, 0)), (0, 1))
    assert lw[0] == pytest.approx(np.log(0.1), rel=1e-12)


@pytest.mark.parametrize("J", [1, 7, 64])
def test_bpf_deterministic_unit_density_one(J):
    model = ConstDensityModel(1, log_density=0.0)
    data = np.zeros((1, 6))
    res = bpf_run(model, data, grid_for(6), params=np.zeros((1, 0)), n_particles=J, seed=3)
    assert res.loglik == 0.0
    assert np.all(res.ess == J)


def test_bpf_loglik_sums_cond_loglik():
    model = ConstDensityModel(3, log_density=-1.25)
    data = np.zeros((3, 4))
    res = bpf_run(model, data, grid_for(4), params=np.zeros((3, 0)), n_particles=10, seed=0)
    assert res.cond_loglik.shape == (4, 3)
    assert res.loglik == pytest.approx(res.cond_loglik.sum(), rel=1e-12)
    assert res.loglik == pytest.approx(-1.25 * 12, rel=1e-12)


def test_bpf_log_sum_exp_stability():
    # Log-weights at the extremes of the stated range must not overflow.
    J = 4
    table = np.zeros((2, J, 1))
    table[0, :, 0] = 700.0
    table[1, :, 0] = -700.0
    model = TableDensityModel(table)
    data = np.zeros((1, 2))
    res = bpf_run(model, data, grid_for(2), params=np.zeros((1, 0)), n_particles=J, seed=0)
    assert np.isfinite(res.loglik)
    assert res.cond_loglik[0, 0] == pytest.approx(700.0)
    assert res.cond_loglik[1, 0] == pytest.approx(-700.0)


def test_bpf_filtering_failure_floor_and_flag():
    J = 8
    table = np.zeros((3, J, 2))
    table[1, :, 0] = -np.inf  # block 0 fails at time 2
    model = TableDensityModel(table)
    data = np.zeros((2, 3))
    res = bpf_run(model, data, grid_for(3), params=np.zeros((2, 0)), n_particles=J, seed=0)
    assert res.failures == [(2, 0)]
    assert res.cond_loglik[1, 0] == LOG_FLOOR
    assert res.cond_loglik[1, 1] == 0.0
    assert np.isfinite(res.loglik)


def test_bpf_nan_density_is_hard_error():
    J = 4
    table = np.zeros((2, J, 1))
    table[1, 2, 0] = np.nan
    model = TableDensityModel(table)
    data = np.zeros((1, 2))
    with pytest.raises(FilterError, match=r"particle 2, unit 0, time 2"):
        bpf_run(model, data, grid_for(2), params=np.zeros((1, 0)), n_particles=J, seed=0)


def test_bpf_missing_observations_zero_weight_column():
    model = ConstDensityModel(2, log_density=-2.0)
    data = np.array([[np.nan, 0.0], [np.nan, np.nan]])
    res = bpf_run(model, data, grid_for(2), params=np.zeros((2, 0)), n_particles=6, seed=0)
    # time 1: both units missing -> 0; time 2: only unit 0 observed.
    assert res.cond_loglik[0, 0] == 0.0
    assert res.cond_loglik[0, 1] == 0.0
    assert res.cond_loglik[1, 0] == pytest.approx(-2.0)
    assert res.cond_loglik[1, 1] == 0.0


def test_bpf_seed_reproducibility():
    rng = np.random.default_rng(5)
    table = rng.normal(size=(4, 16, 3))
    data = np.zeros((3, 4))
    r1 = bpf_run(TableDensityModel(table), data, grid_for(4), params=np.zeros((3, 0)), n_particles=16, seed=11)
    r2 = bpf_run(TableDensityModel(table), data, grid_for(4), params=np.zeros((3, 0)), n_particles=16, seed=11)
    assert r1.loglik == r2.loglik
    assert np.array_equal(r1.cond_loglik, r2.cond_loglik)
    assert np.array_equal(r1.ess, r2.ess)


def test_bpf_trace_csv_round_trip(tmp_path):
    model = ConstDensityModel(2, log_density=-0.5)
    data = np.zeros((2, 3))
    res = bpf_run(model, data, grid_for(3), params=np.zeros((2, 0)), n_particles=4, seed=0)
    path = tmp_path / "trace.csv"
    res.save_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "n,block,cond_loglik,ess"
    assert len(lines) == 1 + 3 * 2


def test_swarm_shape_validation(two_unit_layout):
    with pytest.raises(ValueError):
        Swarm(np.zeros((4, 2, 1)), np.zeros((5, 2, 2)), two_unit_layout)


def test_filter_mean_tracking():
    model = ConstDensityModel(1, log_density=0.0)
    data = np.zeros((1, 2))
    res = bpf_run(
        model, data, grid_for(2), params=np.zeros((1, 0)), n_particles=3,
        seed=0, track_filter_mean=True,
    )
    assert res.filter_mean.shape == (2, 1, 1)
    assert np.all(res.filter_mean == 0.0)
