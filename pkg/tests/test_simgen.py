import json
import os

import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, strategies as st

from causil import simgen
from causil.core import Cardinalities, pool_tuples
from causil.errors import DomainError, ShapeError
from causil.simgen import ShiftSpec

import oracles
from conftest import FIXTURES

P = simgen.default_params()


def test_default_constants():
    assert P.Omega_U[0, 0] == 1.5
    assert P.A_U[1, 1] == -0.5
    assert np.array_equal(P.gamma_0, np.zeros(4))
    assert np.allclose(P.A_S, 0.6 * np.eye(4)) and np.allclose(P.A_A, 0.15 * np.eye(4))
    assert np.allclose(P.B_U, 0.15 * np.eye(4)) and np.allclose(P.B_U_minus, 0.1 * np.eye(4))
    assert np.allclose(P.B_S, 0.35 * np.eye(4)) and np.allclose(P.B_A, 0.15 * np.eye(4))
    assert np.allclose(P.Gamma_S, 0.15 * np.eye(4)) and np.allclose(P.Gamma_U, 1.5 * np.eye(4))
    assert np.allclose(P.init_u, 0.25)


def test_rectangular_defaults():
    p = simgen.default_params(Cardinalities(3, 4, 2, 3))
    assert p.Omega_U.shape == (2, 3) and np.allclose(p.Omega_U, 1.5 * np.eye(2, 3))


def test_params_json_round_trip():
    back = simgen.CategoricalDgpParams.from_dict(json.loads(P.to_json()))
    for name in simgen.COEF_FIELDS:
        assert np.array_equal(getattr(back, name), getattr(P, name))


def test_simulate_deterministic():
    assert simgen.simulate(P, 1, 5, seed=4) == simgen.simulate(P, 1, 5, seed=4)
    assert simgen.simulate(P, 3, 5, seed=4) != simgen.simulate(P, 3, 5, seed=5)


def test_latent_driven_expert():
    p = replace(P, Gamma_U=10 * P.Gamma_U, Gamma_S=np.zeros((4, 4)))
    smp = pool_tuples(simgen.simulate(p, 50, 10, seed=0))
    assert np.array_equal(smp.a, smp.u)


def test_proxy_diagonal_mass():
    ref = np.exp(1.5) / (np.exp(1.5) + 3)
    batch = simgen.simulate(P, 1000, 20, seed=0)
    hit = np.mean(np.concatenate([e.proxies == e.latents for e in batch.episodes]))
    assert abs(ref - 0.599) < 5e-4
    assert hit == pytest.approx(ref, abs=0.02)


def test_values_within_cardinality():
    p = simgen.default_params(Cardinalities(2, 3, 4, 3))
    smp = pool_tuples(simgen.simulate(p, 40, 6, seed=1))
    assert smp.z.max() < 3 and smp.s.max() < 3 and smp.w.max() < 4 and smp.a.max() < 3 and smp.u.max() < 2


def test_shift_shape_mismatch():
    with pytest.raises(ShapeError):
        simgen.simulate(P, 2, 3, shift=ShiftSpec("measurement", {"Omega_U": np.eye(3)}))
    with pytest.raises(DomainError):
        ShiftSpec("none", {"Omega_U": np.eye(4)})
    with pytest.raises(DomainError):
        ShiftSpec("measurement", {"A_U": np.eye(4)})


def test_measurement_shift_keeps_states():
    base = simgen.simulate(P, 20, 8, seed=3)
    shifted = simgen.simulate(P, 20, 8, shift=simgen.measurement_flip(P), seed=3)
    for a, b in zip(base.episodes, shifted.episodes):
        assert np.array_equal(a.states, b.states) and np.array_equal(a.actions, b.actions)
    assert any(not np.array_equal(a.proxies, b.proxies) for a, b in zip(base.episodes, shifted.episodes))


# exact law vs an independent chain-rule enumeration -------------------------

def _random_params(gen, cards):
    p = simgen.default_params(cards)
    shapes = simgen._shapes(cards)
    kw = {k: gen.normal(scale=1.0, size=shapes[k]) for k in simgen.COEF_FIELDS}
    kw["init_u"] = gen.dirichlet(np.ones(cards.k_u))
    kw["init_s"] = gen.dirichlet(np.ones(cards.k_s))
    kw["init_a"] = gen.dirichlet(np.ones(cards.k_a))
    return replace(p, **kw)


def test_exact_joint_matches_enumeration_default():
    ref = oracles.pooled_tuple_joint(P, 10)
    assert np.allclose(simgen.exact_tuple_joint(P, 10), ref, atol=1e-13, rtol=0)


@pytest.mark.parametrize("seed", range(4))
def test_exact_joint_matches_enumeration_random(seed):
    gen = np.random.default_rng(seed)
    p = _random_params(gen, Cardinalities(2, 3, 2, 3))
    ref = oracles.pooled_tuple_joint(p, 5)
    assert np.allclose(simgen.exact_tuple_joint(p, 5), ref, atol=1e-13, rtol=0)


def test_stationary_law_is_fixed_point():
    mu = simgen.stationary_chain_law(P)
    assert np.allclose(mu @ simgen.chain_transition(P), mu, atol=1e-14)


# oracles --------------------------------------------------------------------

def test_oracle_point_mass():
    for u in range(4):
        m = np.eye(4)[u]
        for s in range(4):
            out = simgen.oracle_interventional(P, s, m)
            assert np.array_equal(out, np.eye(4)[oracles.expert_action(P, s, u)])
        pol = simgen.oracle_pi_opt(P, m)
        assert all(pol.table[(s,)] == oracles.expert_action(P, s, u) for s in range(4))


def _two_action_params():
    # at every s, latents {0,1} pick action 1 and {2,3} pick action 3
    G = np.zeros((4, 4))
    G[1, [0, 1]] = 5.0
    G[3, [2, 3]] = 5.0
    return replace(P, Gamma_U=G, Gamma_S=np.zeros((4, 4)))


def test_oracle_counting_measure():
    p = _two_action_params()
    assert np.allclose(simgen.oracle_interventional(p, 2, np.full(4, 0.25)), [0, 0.5, 0, 0.5])
    pol = simgen.oracle_pi_opt(p, np.full(4, 0.25))
    assert pol.table[(2,)] == 1


def test_oracle_rejects_bad_marginal():
    with pytest.raises(DomainError):
        simgen.oracle_interventional(P, 0, [0.5, 0.5, 0.1, 0.0])
    with pytest.raises(DomainError):
        simgen.oracle_interventional(P, 0, [0.5, 0.5])


def test_oracle_default_table_and_monte_carlo():
    m = simgen.estimate_latent_marginal(P, horizon=100_000, seed=0)
    pol = simgen.oracle_pi_opt(P, m)
    assert set(pol.table) == {(s,) for s in range(4)}
    # Monte Carlo of do(S_t = s): the expert reads the forced s and the realized U_{t-1}
    batch = simgen.simulate(P, 1, 101_000, seed=1)
    u = batch.episodes[0].latents[1000:]
    for s in range(4):
        acts = np.array([oracles.expert_action(P, s, k) for k in range(4)])[u]
        mc = np.bincount(acts, minlength=4) / len(acts)
        assert np.allclose(simgen.oracle_interventional(P, s, m), mc, atol=0.01)


def test_marginal_point_dynamics():
    p = replace(P, A_U=50 * np.eye(4), A_S=np.zeros((4, 4)), A_A=np.zeros((4, 4)),
                init_u=np.eye(4)[2])
    assert np.array_equal(simgen.estimate_latent_marginal(p, burn_in=10, horizon=1000), np.eye(4)[2])


def test_marginal_symmetric_kernel():
    m = simgen.estimate_latent_marginal(P, horizon=100_000, seed=0)
    assert abs(m.sum() - 1) < 1e-12
    assert np.allclose(m, 0.25, atol=0.02)


def test_marginal_reference_fixture():
    with open(os.path.join(FIXTURES, "latent_marginal_default.json")) as fh:
        ref = json.load(fh)
    m = simgen.estimate_latent_marginal(P, burn_in=ref["burn_in"], horizon=ref["horizon"], seed=ref["seed"])
    assert np.array_equal(m, np.array(ref["marginal"]))


def test_marginal_horizon_precondition():
    with pytest.raises(DomainError):
        simgen.estimate_latent_marginal(P, horizon=39)


# invariants -------------------------------------------------------------------

def _random_marginal(gen):
    return gen.dirichlet(np.ones(4))


def test_robustness_bound_random_pairs():
    gen = np.random.default_rng(2024)
    for _ in range(100):
        p0, p1 = _random_marginal(gen), _random_marginal(gen)
        l1 = np.abs(p0 - p1).sum()
        for s in range(4):
            gap = np.abs(simgen.oracle_interventional(P, s, p0) - simgen.oracle_interventional(P, s, p1))
            assert np.all(gap <= l1)


@given(st.lists(st.floats(0.01, 1.0), min_size=4, max_size=4),
       st.lists(st.floats(0.01, 1.0), min_size=4, max_size=4),
       st.integers(0, 3))
def test_robustness_bound_property(a, b, s):
    p0 = np.array(a) / sum(a)
    p1 = np.array(b) / sum(b)
    p0 /= p0.sum()
    p1 /= p1.sum()
    p = _two_action_params()
    gap = np.abs(simgen.oracle_interventional(p, s, p0) - simgen.oracle_interventional(p, s, p1))
    assert np.all(gap <= np.abs(p0 - p1).sum() + 1e-15)


def test_oracle_ignores_measurement_shift():
    m = np.array([0.1, 0.2, 0.3, 0.4])
    shifts = [simgen.measurement_flip(P),
              ShiftSpec("measurement", {"omega_0": np.arange(4.0), "Omega_U": np.ones((4, 4))})]
    base = simgen.oracle_pi_opt(P, m)
    for sh in shifts:
        moved = simgen.oracle_pi_opt(simgen.apply_shift(P, sh), m)
        assert moved.table == base.table
        assert moved.metadata == base.metadata


def test_bc1_equals_oracle_when_latent_independent_of_state():
    # the latent chain must not read S or A, and S must not read U, for U_{t-1} to be independent of S_t
    zero = np.zeros((4, 4))
    p = replace(P, alpha_0=np.array([0.6, -0.2, 0.3, -0.7]), A_S=zero, A_A=zero,
                B_U=zero, B_U_minus=zero, B_A=zero)
    J = simgen.exact_tuple_joint(p, 10)
    m = simgen.exact_latent_marginal(p, 10)
    bc1 = simgen.exact_bc_tables(J)["bc1"]
    for s in range(4):
        orc = simgen.oracle_interventional(p, s, m)
        assert np.allclose(bc1[s], orc, atol=1e-12)
        best = set(np.flatnonzero(orc >= orc.max() - 1e-12))
        assert int(np.argmax(bc1[s])) in best


def test_bc1_differs_from_oracle_in_default():
    J = simgen.exact_tuple_joint(P, 10)
    m = simgen.exact_latent_marginal(P, 10)
    bc1 = simgen.exact_bc_tables(J)["bc1"]
    orc = simgen.oracle_pi_opt(P, m)
    diffs = [s for s in range(4) if int(np.argmax(bc1[s])) != orc.table[(s,)]]
    assert diffs
