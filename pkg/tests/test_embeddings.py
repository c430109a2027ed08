import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from constrained_defer.embeddings import (
    ConstraintSpec, GroupCoefficients, budget_embedding, build_embeddings, ood_embedding,
    required_columns, typek_embedding,
)
from constrained_defer.scores import Marginals, MissingScoreError, ScoreTable


def population(rng, n_atoms=12, L=2):
    """Equiprobable atoms with an exact joint law of (Y, M) per atom."""
    q = rng.dirichlet(np.ones(L * L), size=n_atoms).reshape(n_atoms, L, L)   # [x, y, m]
    g = np.arange(n_atoms) % 2
    p_y = q.sum(axis=2)
    idx = np.arange(L)
    extra = {}
    if L == 2:
        extra = dict(p_m1=q[:, :, 1].sum(axis=1), p_m1_y1=q[:, 1, 1], p_m0_y0=q[:, 0, 0])
    p_a = np.array([np.mean(g == 0), np.mean(g == 1)])
    p_ya = np.array([[p_y[g == a, y].sum() / n_atoms for a in (0, 1)] for y in range(L)])
    table = ScoreTable.create(
        p_y, q[:, idx, idx].sum(axis=1), g, Marginals(p_a, p_ya),
        p_mneq_y={k: p_y[:, k] - q[:, k, k] for k in range(L)}, **extra,
    )
    return q, g, table


def outcome_law(q, masses):
    """Exact joint law of (Y, Yhat, deferred) per atom, shape [x, y, yhat, r]."""
    n, L, _ = q.shape
    out = np.zeros((n, L, L, 2))
    p_y = q.sum(axis=2)
    for c in range(L):
        out[:, :, c, 0] = p_y * masses[:, [c]]
    out[:, :, :, 1] = q * masses[:, [L]][:, :, None]
    return out


def random_masses(rng, n, d):
    return rng.dirichlet(np.ones(d) * 0.5, size=n)


@pytest.mark.parametrize("seed", range(5))
def test_fairness_embeddings_equal_enumerated_gaps(seed):
    rng = np.random.default_rng(seed)
    q, g, table = population(rng)
    emb = build_embeddings(table, [ConstraintSpec("dp", 1.0), ConstraintSpec("eodds", 1.0)])
    masses = random_masses(rng, len(g), 3)
    law = outcome_law(q, masses)
    pos = law[:, :, 1, :].sum(axis=2)                 # [x, y] -> Pr(Yhat=1, Y=y)

    def rate(a, y=None):
        sel = g == a
        if y is None:
            return pos[sel].sum() / q[sel].sum()
        return pos[sel, y].sum() / q[sel, y, :].sum()

    _, vals = emb.values(masses)
    names = [c.name for c in emb.constraints]
    assert vals[names.index("dp")] == pytest.approx(rate(1) - rate(0), abs=1e-12)
    assert vals[names.index("eodds_tpr")] == pytest.approx(rate(1, 1) - rate(0, 1), abs=1e-12)
    assert vals[names.index("eodds_fpr")] == pytest.approx(rate(1, 0) - rate(0, 0), abs=1e-12)


@pytest.mark.parametrize("L", [2, 3, 4])
def test_accuracy_and_typek_equal_enumeration(L):
    rng = np.random.default_rng(L)
    q, g, table = population(rng, 10, L)
    specs = [ConstraintSpec("typek", 1.0, {"k": k}) for k in range(L)] + [ConstraintSpec("budget", 1)]
    emb = build_embeddings(table, specs)
    masses = random_masses(rng, len(g), L + 1)
    law = outcome_law(q, masses)
    obj, vals = emb.values(masses)
    n = len(g)
    acc = sum(law[:, y, y, :].sum() for y in range(L)) / n
    assert obj == pytest.approx(acc, abs=1e-12)
    for k in range(L):
        p_k = q[:, k, :].sum() / n
        err = (law[:, k, :, :].sum() - law[:, k, k, :].sum()) / n / p_k
        assert vals[k] == pytest.approx(err, abs=1e-12)
    assert vals[-1] == pytest.approx(masses[:, L].mean(), abs=1e-12)


def test_longtail_embeddings_equal_enumeration():
    rng = np.random.default_rng(9)
    L = 3
    q, g, table = population(rng, 10, L)
    partition, alphas = [[0], [1, 2]], [0.8, 1.2]
    emb = build_embeddings(table, [ConstraintSpec("longtail", 0.01,
                                                  {"partition": partition, "alphas": alphas})])
    masses = random_masses(rng, len(g), L + 1)
    law = outcome_law(q, masses)
    n = len(g)
    obj, vals = emb.values(masses)
    want_obj = 0.0
    for i, (grp, alpha) in enumerate(zip(partition, alphas)):
        p_G = q[:, grp, :].sum() / n
        kept = law[:, grp][..., 0]                   # [x, y in grp, yhat]
        wrong = kept.sum() - sum(kept[:, j, c].sum() for j, c in enumerate(grp))
        want_obj -= wrong / n / (alpha * p_G)
        coverage = kept.sum() / n / p_G
        assert vals[i] == pytest.approx(coverage - alpha / len(partition), abs=1e-12)
    assert obj == pytest.approx(want_obj, abs=1e-12)


def test_group_coefficients_example():
    m = Marginals([0.6, 0.4], [[0.2, 0.3], [0.4, 0.1]])
    c = GroupCoefficients.from_marginals(m)
    np.testing.assert_allclose(c.s_of_a, [-1 / 0.6, 1 / 0.4])
    np.testing.assert_allclose(c.t(1), [-1 / 0.4, 1 / 0.1])


def test_empty_cell_is_named():
    m = Marginals([0.6, 0.4], [[0.6, 0.4], [0.0, 0.0]])
    table = ScoreTable.create([[0.5, 0.5]] * 2, [0.5, 0.5], [0, 1], m,
                              p_m1=[0.5, 0.5], p_m1_y1=[0.2, 0.2])
    with pytest.raises(ValueError, match="label=1, group=0"):
        build_embeddings(table, [ConstraintSpec("eopp", 0.1)])


def test_missing_column_is_named():
    table = ScoreTable.create([[0.5, 0.5]] * 2, [0.5, 0.5], [0, 1],
                              Marginals([0.5, 0.5], [[0.25, 0.25], [0.25, 0.25]]))
    with pytest.raises(MissingScoreError, match="p_m1"):
        build_embeddings(table, [ConstraintSpec("dp", 0.1)])
    assert required_columns([{"kind": "dp", "delta": 0.1}]) == ("p_agree", "p_y_0", "p_y_1", "p_m1")


def test_budget_and_ood_shapes():
    np.testing.assert_array_equal(budget_embedding(2, 2), [[0, 0, 1], [0, 0, 1]])
    table = ScoreTable.create([[0.5, 0.5]], [0.5], [0], Marginals([1.0], [[0.5], [0.5]]),
                              density_ratio=[2.0])
    np.testing.assert_array_equal(ood_embedding(table), [[2.0, 2.0, 0.0]])


def test_typek_defer_slot():
    table = ScoreTable.create([[0.25, 0.75]], [0.5], [0], Marginals([1.0], [[0.5], [0.5]]),
                              p_mneq_y={1: [0.125]})
    np.testing.assert_allclose(typek_embedding(table, 1), [[1.5, 0.0, 0.25]])


def test_spec_parsing():
    spec = ConstraintSpec.from_dict({"kind": "typek", "delta": 0.2, "k": 1})
    assert spec.params == {"k": 1}
    with pytest.raises(ValueError):
        ConstraintSpec.from_dict({"kind": "dp"})
    with pytest.raises(ValueError):
        ConstraintSpec("parity", 0.1)


@settings(max_examples=40, deadline=None)
@given(arrays(float, (6, 3), elements=st.floats(0, 1)), arrays(float, (6, 3), elements=st.floats(0, 1)),
       st.floats(0, 1))
def test_values_are_linear_in_masses(a, b, w):
    rng = np.random.default_rng(0)
    _, _, table = population(rng, 6)
    emb = build_embeddings(table, [ConstraintSpec("dp", 1.0), ConstraintSpec("eodds", 1.0)])
    oa, va = emb.values(a)
    ob, vb = emb.values(b)
    om, vm = emb.values(w * a + (1 - w) * b)
    assert om == pytest.approx(w * oa + (1 - w) * ob, abs=1e-9)
    np.testing.assert_allclose(vm, w * va + (1 - w) * vb, atol=1e-9)
