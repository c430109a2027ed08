from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from constrained_defer.oracle import (
    FiniteInstance, KnapsackInstance, OracleLimitError, budget_deterministic, budget_loss,
    budget_lp_loss, compositionality_demo, exchange_improves, impossibility_instances,
    knapsack_brute, knapsack_to_l2d, l2d_brute, lp_exact, verify_impossibility,
)

F = Fraction


def scipy_lp(inst, deltas, two_sided):
    n, d = inst.psi0.shape
    A, b = [], []
    for psi, delta, two in zip(inst.psis, deltas, two_sided):
        row = (inst.probs[:, None] * psi).ravel()
        A.append(row)
        b.append(delta)
        if two:
            A.append(-row)
            b.append(delta)
    res = linprog(-(inst.probs[:, None] * inst.psi0).ravel(), A_ub=A, b_ub=b,
                  A_eq=np.kron(np.eye(n), np.ones((1, d))), b_eq=np.ones(n),
                  bounds=(0, None), method="highs")
    return None if res.status == 2 else -res.fun


def test_knapsack_textbook():
    kp = KnapsackInstance(np.array([6.0, 10, 12]), np.array([1.0, 2, 3]), 5.0)
    assert knapsack_brute(kp) == 22
    red = knapsack_to_l2d(kp)
    obj, _ = l2d_brute(red.instance, [red.budget])
    assert red.to_knapsack_value(obj) == pytest.approx(22, abs=1e-9)


def test_brute_force_size_cap():
    inst = FiniteInstance.empirical(np.zeros((30, 2)), np.zeros((30, 2)))
    with pytest.raises(OracleLimitError):
        l2d_brute(inst, [0.0])


def test_three_atom_budget_example():
    # deferring helps on atoms 0 and 2; budget allows one and a half deferrals
    loss_h = np.array([0.0, 1.0, 0.0])
    loss_ai = np.array([1.0, 0.0, 1.0])
    r = budget_deterministic(loss_h, loss_ai, 0.5)
    assert r.sum() == 1
    assert budget_loss(loss_h, loss_ai, r) == pytest.approx(1 / 3)
    assert budget_lp_loss(loss_h, loss_ai, 0.5) == pytest.approx(1 / 6)
    assert not exchange_improves(loss_h, loss_ai, r, 0.5)


@pytest.mark.parametrize("seed", range(25))
def test_lp_routes_agree_with_scipy(seed):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(2, 12)), int(rng.integers(2, 5))
    m = 1 + seed % 3
    two = [bool(rng.integers(0, 2)) for _ in range(m)]
    psis = [rng.standard_normal((n, d)) if t else rng.random((n, d)) for t in two]
    inst = FiniteInstance(rng.dirichlet(np.ones(n)), rng.random((n, d)), tuple(psis))
    deltas = list(rng.uniform(0.05, 0.5, m))
    ref = scipy_lp(inst, deltas, two)
    ours = lp_exact(inst, deltas, two, method="simplex")
    if ref is None:
        assert not ours.feasible
        return
    assert ours.objective == pytest.approx(ref, abs=1e-9)
    if m == 1:
        assert lp_exact(inst, deltas, two, method="greedy").objective == pytest.approx(ref, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 7), st.integers(2, 3), st.floats(0.0, 1.0), st.integers(0, 2**32 - 1))
def test_randomized_optimum_dominates_deterministic(n, d, delta, seed):
    rng = np.random.default_rng(seed)
    inst = FiniteInstance.empirical(rng.random((n, d)), rng.random((n, d)))
    det, _ = l2d_brute(inst, [delta])
    lp = lp_exact(inst, [delta])
    if det == -np.inf:
        return
    assert lp.feasible and lp.objective >= det - 1e-12


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=30),
       st.floats(0.0, 1.0))
def test_budget_rule_within_one_over_n(losses, b):
    loss_h = np.array([x for x, _ in losses]) / 4
    loss_ai = np.array([y for _, y in losses]) / 4
    n = len(losses)
    r = budget_deterministic(loss_h, loss_ai, b)
    assert r.sum() <= np.floor(b * n + 1e-12)
    assert budget_loss(loss_h, loss_ai, r) <= budget_lp_loss(loss_h, loss_ai, b) + 1 / n + 1e-12
    assert not exchange_improves(loss_h, loss_ai, r, b)


# loss tables derived by hand: (own_1, own_2, cross_1 with r*_2, cross_2 with r*_1)
HAND_TABLES = {
    (0, 0): (F(0), F(1, 3), F(1, 3), F(2, 3)),
    (1, 0): (F(1, 3), F(0), F(2, 3), F(1, 3)),
    (0, 1): (F(1, 3), F(0), F(2, 3), F(1, 3)),
    (1, 1): (F(1, 3), F(1, 3), F(2, 3), F(2, 3)),
}


def test_impossibility_tables_by_enumeration():
    for row in verify_impossibility():
        assert row["computed"] == HAND_TABLES[row["a"], row["b"]]
        assert row["same_rhat"]
        assert row["own_at_most_third"]
        assert row["not_interchangeable"]


def test_impossibility_measures_are_distributions():
    for case in impossibility_instances():
        assert sum(case.mu1.values()) == 1
        assert sum(case.mu2.values()) == 1


def test_compositionality():
    rep = compositionality_demo()
    assert (rep.classifier_gap, rep.expert_gap, rep.system_gap) == (0, 0, F(1, 2))
    assert rep.system_loss == F(1, 4)
    assert rep.min_fair_loss == F(1, 2)
    assert not rep.fair_rule_below_half
