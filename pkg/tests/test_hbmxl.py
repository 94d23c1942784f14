import numpy as np
import pytest

from conjnash.designgen import DesignSpec, generate_design
from conjnash.hbmxl import (HyperPriors, _Data, _draw_iw, fractional_information, load_chain,
                            log_likelihood, logit_prob, mnl_information, run_chain, save_chain)
from conjnash.prefgen import PreferenceSpec, generate_preferences
from conjnash.respsim import simulate_responses


def test_logit_prob_cases():
    assert np.allclose(logit_prob(np.ones(3), np.ones((5, 3))), 0.2)
    x = np.array([[1.0], [0.0]])
    assert np.allclose(logit_prob(np.array([np.log(2)]), x), [2 / 3, 1 / 3])
    u = np.array([[3.0, 1.0], [0.5, 2.0], [1.0, 1.0]])
    b = np.array([0.3, -0.7])
    # a constant column adds the same utility to every alternative
    shifted = logit_prob(np.append(b, 5.0), np.column_stack([u, np.ones(3)]))
    assert np.allclose(logit_prob(b, u), shifted)
    big = logit_prob(np.array([1000.0]), np.array([[1.0], [0.0]]))
    assert np.all(np.isfinite(big)) and big.sum() == pytest.approx(1)


def test_log_likelihood_cases(rng):
    x = rng.integers(0, 2, size=(15, 5, 4)).astype(float)
    ch = rng.integers(0, 5, size=15)
    assert log_likelihood(np.zeros(4), ch, x) == pytest.approx(15 * np.log(0.2))
    # direct product of conditional logit terms
    b = rng.normal(size=4)
    x2, c2 = x[:2], ch[:2]
    direct = np.log(logit_prob(b, x2[0])[c2[0]] * logit_prob(b, x2[1])[c2[1]])
    assert log_likelihood(b, c2, x2) == pytest.approx(direct)
    f = np.eye(5)[c2]
    assert log_likelihood(b, f, x2) == pytest.approx(direct)


def test_dominance_limit():
    x = np.zeros((3, 2, 1))
    x[:, 0, 0] = 1
    ch = np.zeros(3, dtype=int)
    vals = [log_likelihood(np.array([s]), ch, x) for s in (1, 5, 20)]
    assert vals[0] < vals[1] < vals[2] < 0 and vals[2] > -1e-7


def test_information_matches_numerical_hessian(rng):
    x = rng.normal(size=(6, 4, 3))
    ch = rng.integers(0, 4, size=6)
    b = rng.normal(size=3)
    h = 1e-4
    num = np.empty((3, 3))
    for a in range(3):
        for c in range(3):
            ea, ec = np.eye(3)[a] * h, np.eye(3)[c] * h
            num[a, c] = (log_likelihood(b + ea + ec, ch, x) - log_likelihood(b + ea - ec, ch, x)
                         - log_likelihood(b - ea + ec, ch, x)
                         + log_likelihood(b - ea - ec, ch, x)) / (4 * h * h)
    assert np.allclose(mnl_information(b, x), -num, atol=1e-5)


def test_fractional_modes(rng):
    x = rng.normal(size=(12, 3, 2))
    ch = rng.integers(0, 3, size=(5, 12))
    info, modes = fractional_information(_Data(ch, x))
    assert info.shape == (5, 2, 2) and modes.shape == (5, 2)
    for i in range(5):
        np.linalg.cholesky(info[i])
    # with w = 0 each mode is the respondent's own MLE (finite when not separated)
    _, own = fractional_information(_Data(ch, x), w=0.0)
    for i in range(5):
        g = np.zeros(2)
        for k in range(12):
            p = logit_prob(own[i], x[k])
            g += x[k, ch[i, k]] - p @ x[k]
        assert np.allclose(g, 0, atol=1e-4)


def test_priors():
    p = HyperPriors.default(4)
    assert p.nu == 7 and np.array_equal(p.psi, 7 * np.eye(4))
    with pytest.raises(ValueError):
        HyperPriors(np.zeros(3), np.eye(3), 2.0, np.eye(3))


def test_inverse_wishart_mean():
    # E[Sigma] = scale / (df - p - 1)
    g = np.random.default_rng(0)
    scale = np.array([[2.0, 0.5], [0.5, 1.0]])
    draws = np.array([_draw_iw(g, 10, scale) for _ in range(20000)])
    assert np.allclose(draws.mean(axis=0), scale / 7, atol=0.01)


@pytest.fixture(scope="module")
def small_data():
    p = generate_preferences(PreferenceSpec(2, 5, 60, seed=2))
    tr, ho = generate_design(DesignSpec(2, 5, 5, 15, 5, n_random_starts=2, seed=2))
    cal, train, hold = simulate_responses(p.B, tr.sets, ho.sets, 0.125, seed=2)
    return p, tr, train, cal


def test_chain_determinism_and_shapes(small_data):
    _, tr, train, _ = small_data
    a = run_chain(train, tr.sets, burn_in=50, keep=50, seed=3)
    b = run_chain(train, tr.sets, burn_in=50, keep=50, seed=3)
    assert a.beta_draws.shape == (100, 60, 8)
    assert np.array_equal(a.beta_draws, b.beta_draws)
    assert np.array_equal(a.sigma_draws, b.sigma_draws)
    sig = a.sigma_draws
    assert np.allclose(sig, sig.transpose(0, 2, 1))
    assert np.all(np.linalg.eigvalsh(sig) > 0)


def test_checkpoint_resume(small_data, tmp_path):
    _, tr, train, _ = small_data
    full = run_chain(train, tr.sets, burn_in=30, keep=40, seed=5)
    ck = str(tmp_path / "ck.npz")
    stop = []

    def interrupt(it):
        if it == 44:
            stop.append(it)
            raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        run_chain(train, tr.sets, burn_in=30, keep=40, seed=5, checkpoint=ck,
                  checkpoint_every=20, progress=interrupt)
    resumed = run_chain(train, tr.sets, burn_in=30, keep=40, seed=5, checkpoint=ck,
                        checkpoint_every=20)
    assert np.array_equal(full.beta_draws, resumed.beta_draws)
    assert np.array_equal(full.sigma_draws, resumed.sigma_draws)


def test_save_load(small_data, tmp_path):
    _, tr, train, _ = small_data
    a = run_chain(train, tr.sets, burn_in=10, keep=10, seed=1, beta_store_every=2)
    save_chain(a, tmp_path / "c.npz")
    b = load_chain(tmp_path / "c.npz")
    assert np.array_equal(a.beta_draws, b.beta_draws) and b.beta_store_every == 2
    assert b.beta_draws.shape[0] == 10


def test_recovery_and_acceptance():
    p = generate_preferences(PreferenceSpec(2, 5, 200, seed=7))
    tr, ho = generate_design(DesignSpec(2, 5, 5, 15, 5, n_random_starts=3, seed=7))
    cal, train, _ = simulate_responses(p.B, tr.sets, ho.sets, 0.01, seed=7)
    ch = run_chain(train, tr.sets, burn_in=1000, keep=1000, seed=7)
    post = ch.beta_draws[1000:].mean(axis=0)
    r = [np.corrcoef(post[i], p.B[i])[0, 1] for i in range(200)]
    assert np.mean(r) >= 0.8
    assert 0.05 < ch.acceptance_rate < 0.6


def test_proposal_and_init_variants(small_data):
    _, tr, train, _ = small_data
    for kw in ({"proposal": "sigma"}, {"init": "modes"}):
        a = run_chain(train, tr.sets, burn_in=20, keep=20, seed=4, **kw)
        b = run_chain(train, tr.sets, burn_in=20, keep=20, seed=4, **kw)
        assert np.array_equal(a.betabar_draws, b.betabar_draws)
    c = run_chain(train, tr.sets, burn_in=20, keep=20, seed=4, init="modes")
    d = run_chain(train, tr.sets, burn_in=20, keep=20, seed=9, init="modes")
    assert not np.array_equal(c.beta_draws[0], d.beta_draws[0])  # jittered starts differ
    with pytest.raises(ValueError):
        run_chain(train, tr.sets, burn_in=2, keep=2, proposal="gibbs")
    with pytest.raises(ValueError):
        run_chain(train, tr.sets, burn_in=2, keep=2, init="random")
