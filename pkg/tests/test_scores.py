import pathlib
import tempfile
import warnings

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from constrained_defer.core import LabeledDataset
from constrained_defer.scores import (
    EPS_P, Marginals, MissingScoreError, ScoreConfig, ScoreTable, emit_scores, fit_scores,
    ingest_scores,
)


def table(n=4):
    p1 = np.linspace(0.1, 0.9, n)
    g = np.arange(n) % 2
    return ScoreTable.create(
        np.column_stack([1 - p1, p1]), np.full(n, 0.7), g,
        Marginals([0.5, 0.5], [[0.2, 0.3], [0.3, 0.2]]),
        p_m1=p1 * 0.8, p_m1_y1=p1 * 0.7, p_m0_y0=(1 - p1) * 0.7,
        p_mneq_y={0: (1 - p1) * 0.3, 1: p1 * 0.3},
    )


def test_create_clips_and_validates():
    t = ScoreTable.create([[0.0, 1.0]], [1.0], [0], Marginals([1.0], [[0.5], [0.5]]))
    assert t.p_y[0, 1] == 1 - EPS_P
    assert t.p_y[0, 0] == EPS_P
    with pytest.raises(ValueError):
        ScoreTable.create([[0.4, 0.7]], [0.5], [0], Marginals([1.0], [[0.5], [0.5]]))
    with pytest.raises(ValueError):
        ScoreTable.create([[0.4, 0.6]], [1.01], [0], Marginals([1.0], [[0.5], [0.5]]))


def test_stored_values_are_kept():
    t = ScoreTable.create([[0.4, 0.6]], [0.5], [0], Marginals([1.0], [[0.5], [0.5]]))
    np.testing.assert_array_equal(t.p_y, [[0.4, 0.6]])


def test_require_names_missing_column():
    t = ScoreTable.create([[0.4, 0.6]], [0.5], [0], Marginals([1.0], [[0.5], [0.5]]))
    with pytest.raises(MissingScoreError, match="p_m1"):
        t.require("p_m1")
    with pytest.raises(MissingScoreError, match="p_mneq_y_1"):
        t.require("p_mneq_y_1")


def test_emit_ingest_round_trip(tmp_path):
    t = table(6)
    emit_scores(t, tmp_path / "s.csv")
    back = ingest_scores(tmp_path / "s.csv", t.group)
    pd.testing.assert_frame_equal(back.to_frame(), t.to_frame())
    np.testing.assert_array_equal(back.marginals.p_ya, t.marginals.p_ya)


def test_ingest_row_count_and_columns(tmp_path):
    t = table(6)
    emit_scores(t, tmp_path / "s.csv")
    with pytest.raises(ValueError, match="rows"):
        ingest_scores(tmp_path / "s.csv", t.group[:5])
    t.to_frame().drop(columns=["p_m1"]).to_csv(tmp_path / "s.csv", index=False)
    with pytest.raises(MissingScoreError, match="p_m1"):
        ingest_scores(tmp_path / "s.csv", t.group, required=("p_m1",))


def test_ingest_range_check(tmp_path):
    t = table(4)
    df = t.to_frame()
    df.loc[0, "p_agree"] = 1.0 + 1e-6
    df.to_csv(tmp_path / "s.csv", index=False)
    with pytest.raises(ValueError, match="outside"):
        ingest_scores(tmp_path / "s.csv", t.group, marginals=t.marginals)
    df.loc[0, "p_agree"] = 1.0
    df.to_csv(tmp_path / "s.csv", index=False)
    assert ingest_scores(tmp_path / "s.csv", t.group, marginals=t.marginals).p_agree[0] == 1 - EPS_P


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=20), st.data())
def test_ingest_emit_identity_up_to_clipping(values, data):
    n = len(values)
    p1 = np.array(values)
    agree = np.array(data.draw(st.lists(st.floats(0.0, 1.0), min_size=n, max_size=n)))
    t = ScoreTable.create(np.column_stack([1 - p1, p1]), agree, np.zeros(n, int),
                          Marginals([1.0], [[0.5], [0.5]]))
    with tempfile.TemporaryDirectory() as d:
        path = pathlib.Path(d) / "s.csv"
        emit_scores(t, path)
        back = ingest_scores(path, t.group)
    np.testing.assert_array_equal(back.p_y, t.p_y)
    np.testing.assert_array_equal(back.p_agree, t.p_agree)


def test_marginals_counting():
    n = 100
    g = np.r_[np.zeros(70, int), np.ones(30, int)]
    ds = LabeledDataset(np.zeros(n), g, np.zeros(n, int), np.zeros(n, int), 2)
    m = Marginals.from_dataset(ds)
    assert m.p_a[1] == pytest.approx(0.3)
    with pytest.raises(ValueError, match="label=1, group=0"):
        m.require_cell(1, 0)


def test_marginals_from_scores_sum_to_one():
    t = table(8)
    m = Marginals.from_scores(t)
    assert m.p_ya.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(m.p_ya.sum(axis=0), m.p_a)


def _discrete(rng, n):
    x = rng.integers(0, 2, n)
    g = rng.integers(0, 2, n)
    return x, g


def test_deterministic_label_is_learned():
    rng = np.random.default_rng(0)
    x, g = _discrete(rng, 400)
    y = x.copy()
    ds = LabeledDataset(x[:, None].astype(float), g, y, y, 2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = fit_scores(ds, ScoreConfig(basis="onehot", max_iter=20000))
    s = model.predict(ds)
    assert np.all(s.p_y[x == 1, 1] >= 0.99)
    assert np.all(s.p_agree >= 0.99)           # expert equals label


def test_cell_frequencies_recovered():
    rng = np.random.default_rng(1)
    n = 4000
    x, g = _discrete(rng, n)
    rate = np.array([[0.2, 0.5], [0.7, 0.9]])[x, g]
    y = (rng.random(n) < rate).astype(int)
    m = np.where(rng.random(n) < 0.8, y, 1 - y)
    ds = LabeledDataset(x[:, None].astype(float), g, m, y, 2)
    s = fit_scores(ds, ScoreConfig(basis="onehot")).predict(ds)
    for xi in (0, 1):
        for gi in (0, 1):
            cell = (x == xi) & (g == gi)
            assert abs(s.p_y[cell, 1][0] - y[cell].mean()) < 0.05


def test_joint_model_keeps_identities():
    rng = np.random.default_rng(2)
    n = 2000
    x, g = _discrete(rng, n)
    y = (rng.random(n) < 0.3 + 0.4 * x).astype(int)
    m = np.where(rng.random(n) < 0.75, y, 1 - y)
    ds = LabeledDataset(x[:, None].astype(float), g, m, y, 2)
    s = fit_scores(ds, ScoreConfig(basis="onehot", joint=True)).predict(ds)
    np.testing.assert_allclose(s.p_agree, s.p_m0_y0 + s.p_m1_y1, atol=1e-12)
    np.testing.assert_allclose(s.p_mneq_y[1], s.p_y[:, 1] - s.p_m1_y1, atol=1e-12)


def test_nonconvergence_is_a_warning():
    rng = np.random.default_rng(3)
    n = 200
    ds = LabeledDataset(rng.standard_normal((n, 2)), rng.integers(0, 2, n),
                        rng.integers(0, 2, n), rng.integers(0, 2, n), 2)
    with pytest.warns(RuntimeWarning):
        model = fit_scores(ds, ScoreConfig(max_iter=2))
    assert model.metadata["not_converged"]
