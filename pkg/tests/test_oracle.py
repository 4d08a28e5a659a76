import itertools

import numpy as np
import pytest

from blockpf import FiniteSpatHMM, HmmModel, TimeGrid, bpf_run, exact_loglik, plain_pf_loglik
from blockpf.oracle import product_hmm, random_coupled_hmm, simulate_hmm, unit_marginal

from conftest import combined_se


def brute_force_loglik(hmm: FiniteSpatHMM, data: np.ndarray) -> float:
    """Sum the joint probability over every latent path (small cases only).

    Paths run over the states at observation times 1..N; the state at the
    time origin is marginalized into the first factor.
    """
    U, N = data.shape
    S = hmm.n_joint
    obs = np.array([hmm.obs_probs(data[:, n]) for n in range(N)])
    first = hmm.init @ hmm.kernel
    paths = np.array(list(itertools.product(range(S), repeat=N)))
    prob = first[paths[:, 0]] * obs[0, paths[:, 0]]
    for n in range(1, N):
        prob = prob * hmm.kernel[paths[:, n - 1], paths[:, n]] * obs[n, paths[:, n]]
    return float(np.log(prob.sum()))


def test_exact_single_state_is_sum_of_emissions():
    # One latent state per unit: the likelihood is just the emission terms.
    emissions = np.array([[[0.7, 0.3]], [[0.4, 0.6]]])
    hmm = FiniteSpatHMM(2, 1, np.array([[1.0]]), emissions, np.array([1.0]))
    data = np.array([[0, 1, 1], [1, 1, 0]])
    expected = np.log(
        np.array([0.7, 0.3, 0.3]).prod() * np.array([0.6, 0.6, 0.4]).prod()
    )
    assert exact_loglik(hmm, data) == pytest.approx(expected, rel=1e-12)


def test_exact_two_state_hand_example():
    # Uniform kernel and init, emissions putting 0.9 on the matching symbol,
    # observing symbol 1 twice: the four-path sum is
    # 0.25*(0.1*0.1 + 0.1*0.9 + 0.9*0.1 + 0.9*0.9) = 0.25.
    hmm = FiniteSpatHMM(
        1,
        2,
        np.full((2, 2), 0.5),
        np.array([[[0.9, 0.1], [0.1, 0.9]]]),
        np.array([0.5, 0.5]),
    )
    data = np.array([[1, 1]])
    assert exact_loglik(hmm, data) == pytest.approx(np.log(0.25), rel=1e-12)
    assert brute_force_loglik(hmm, data) == pytest.approx(np.log(0.25), rel=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_exact_matches_brute_force_coupled(seed):
    hmm = random_coupled_hmm(2, 3, 3, seed=seed)
    data = simulate_hmm(hmm, 6, seed=seed + 10)
    assert exact_loglik(hmm, data) == pytest.approx(
        brute_force_loglik(hmm, data), abs=1e-10
    )


def test_exact_matches_brute_force_with_missing():
    hmm = random_coupled_hmm(2, 2, 3, seed=5)
    data = simulate_hmm(hmm, 5, seed=7).astype(float)
    data[0, 2] = np.nan
    data[1, 4] = np.nan
    assert exact_loglik(hmm, data) == pytest.approx(
        brute_force_loglik(hmm, data), abs=1e-10
    )


def test_joint_state_space_cap():
    with pytest.raises(ValueError, match="exceeds"):
        FiniteSpatHMM(
            7,
            10,
            np.eye(10**7),
            np.ones((7, 10, 1)),
            np.ones(10**7),
        )


def test_plain_pf_density_one_gives_zero():
    # A single observation symbol makes every emission probability one.
    hmm = FiniteSpatHMM(
        2,
        2,
        np.full((4, 4), 0.25),
        np.ones((2, 2, 1)),
        np.full(4, 0.25),
    )
    data = np.zeros((2, 8), dtype=int)
    assert plain_pf_loglik(hmm, data, n_particles=64, seed=0) == pytest.approx(0.0)


def test_plain_pf_requires_two_particles():
    hmm = random_coupled_hmm(1, 2, 2, seed=0)
    with pytest.raises(ValueError):
        plain_pf_loglik(hmm, np.zeros((1, 2), dtype=int), n_particles=1)


def test_plain_pf_within_three_se_of_exact():
    hmm = random_coupled_hmm(2, 3, 3, seed=3)
    data = simulate_hmm(hmm, 10, seed=4)
    exact = exact_loglik(hmm, data)
    vals = np.array(
        [plain_pf_loglik(hmm, data, n_particles=5000, seed=(100, r)) for r in range(12)]
    )
    se = vals.std(ddof=1) / np.sqrt(len(vals))
    assert abs(vals.mean() - exact) < 3 * se + 1e-9


def test_uncoupled_two_unit_factorizes():
    rng = np.random.default_rng(8)
    kernels, inits = [], []
    for _ in range(2):
        K = rng.random((3, 3)) + 0.3
        K /= K.sum(axis=1, keepdims=True)
        kernels.append(K)
        p = rng.random(3) + 0.3
        inits.append(p / p.sum())
    emissions = rng.random((2, 3, 3)) + 0.2
    for u in range(2):
        for x in range(3):
            emissions[u, x, x] += 2.5
    emissions /= emissions.sum(axis=2, keepdims=True)
    joint = product_hmm(kernels, [emissions[0], emissions[1]], inits)
    data = simulate_hmm(joint, 8, seed=9)

    joint_runs = np.array(
        [plain_pf_loglik(joint, data, n_particles=4000, seed=(5, r)) for r in range(20)]
    )
    unit_runs = []
    for r in range(20):
        total = 0.0
        for u in range(2):
            marg = unit_marginal(joint, u, kernels[u], inits[u])
            total += plain_pf_loglik(
                marg, data[[u]], n_particles=4000, seed=(6, u, r)
            )
        unit_runs.append(total)
    unit_runs = np.array(unit_runs)

    # Exact factorization: the joint likelihood is the product of the units'.
    exact_joint = exact_loglik(joint, data)
    exact_sum = sum(
        exact_loglik(unit_marginal(joint, u, kernels[u], inits[u]), data[[u]])
        for u in range(2)
    )
    assert exact_joint == pytest.approx(exact_sum, abs=1e-10)
    se = combined_se(joint_runs, unit_runs)
    assert abs(joint_runs.mean() - unit_runs.mean()) < 3 * se


def test_bpf_unbiasedness_on_uncoupled_model():
    # Singleton-block filtering of an uncoupled model is unbiased for the
    # likelihood: the mean of exp(loglik - exact) should be near one.
    rng = np.random.default_rng(12)
    kernels, inits = [], []
    for _ in range(2):
        K = rng.random((2, 2)) + 0.5
        K /= K.sum(axis=1, keepdims=True)
        kernels.append(K)
        p = rng.random(2) + 0.5
        inits.append(p / p.sum())
    emissions = np.array([[[0.8, 0.2], [0.3, 0.7]], [[0.6, 0.4], [0.2, 0.8]]])
    joint = product_hmm(kernels, [emissions[0], emissions[1]], inits)
    data = simulate_hmm(joint, 6, seed=13)
    exact = exact_loglik(joint, data)

    model = HmmModel(joint)
    grid = TimeGrid(0.0, np.arange(1.0, 7.0), 1.0)
    ratios = []
    for r in range(50):
        res = bpf_run(
            model, data.astype(float), grid, params=np.zeros((2, 0)),
            n_particles=10_000, seed=(77, r),
        )
        ratios.append(np.exp(res.loglik - exact))
    mean_ratio = np.mean(ratios)
    assert 0.9 < mean_ratio < 1.1


def test_hmm_json_round_trip():
    hmm = random_coupled_hmm(2, 2, 2, seed=1)
    clone = FiniteSpatHMM.from_json(hmm.to_json())
    assert np.array_equal(clone.kernel, hmm.kernel)
    assert np.array_equal(clone.emissions, hmm.emissions)
    assert np.array_equal(clone.init, hmm.init)


def test_row_sum_validation():
    with pytest.raises(ValueError, match="kernel rows"):
        FiniteSpatHMM(
            1, 2, np.array([[0.6, 0.5], [0.5, 0.5]]),
            np.ones((1, 2, 1)), np.array([0.5, 0.5]),
        )
