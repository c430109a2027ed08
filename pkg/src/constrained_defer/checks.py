"""Cross-route verification suite: the fast solver against exact oracles.

Each check returns a :class:`CheckResult`; ``run_all`` gathers them for the
``oracle-check`` command.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .embeddings import Constraint, ConstraintSpec, EmbeddingSet, build_embeddings
from .oracle import (
    FiniteInstance, KnapsackInstance, budget_deterministic, budget_loss, budget_lp_loss,
    compositionality_demo, knapsack_brute, knapsack_to_l2d, l2d_brute, lp_exact,
    verify_impossibility,
)
from .scores import Marginals, ScoreTable
from .solver import NotFeasible, constraint_curve, solve_single


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    informational: bool = False
    data: dict = field(default_factory=dict)


def random_score_table(rng, n: int, num_classes: int = 2) -> ScoreTable:
    """Scores with a consistent joint law of ``(Y, M)`` given ``x``.

    Every class and both groups appear with positive mass so group and
    class marginals are well defined.
    """
    L = num_classes
    p_y = rng.dirichlet(np.ones(L), size=n)
    # expert confusion rows P(M = j | Y = y, x)
    conf = rng.dirichlet(np.ones(L), size=(n, L))
    joint = p_y[:, :, None] * conf                    # [x, y, m]
    group = rng.integers(0, 2, size=n)
    group[:2] = (0, 1)
    idx = np.arange(L)
    p_agree = joint[:, idx, idx].sum(axis=1)
    mneq = {k: p_y[:, k] - joint[:, k, k] for k in range(L)}
    extra = {}
    if L == 2:
        extra = dict(p_m1=joint[:, :, 1].sum(axis=1), p_m1_y1=joint[:, 1, 1],
                     p_m0_y0=joint[:, 0, 0])
    p_a = np.array([np.mean(group == 0), np.mean(group == 1)])
    p_ya = np.stack([[p_y[group == a, y].sum() / n for a in (0, 1)] for y in range(L)])
    return ScoreTable.create(p_y, p_agree, group, Marginals(p_a, p_ya), p_mneq_y=mneq, **extra)


def random_single_problem(rng, kind: str, n: int, d: int):
    """Random tuning embeddings with one ``kind`` constraint.

    The tolerance is a random fraction of the constraint value of the
    unconstrained rule, so most draws bind and a few are infeasible.
    """
    L = d - 1
    scores = random_score_table(rng, n, L)
    params = {"k": int(rng.integers(0, L))} if kind == "typek" else {}
    emb = build_embeddings(scores, [ConstraintSpec(kind, np.inf, params)])
    con = emb.constraints[0]
    masses = np.zeros_like(emb.psi0)
    masses[np.arange(n), np.argmax(emb.psi0, axis=1)] = 1.0
    free = float(np.mean(np.sum(masses * con.psi, axis=1)))
    free = abs(free) if con.two_sided else free
    delta = float(rng.uniform(0.0, 1.1) * free)
    return EmbeddingSet(emb.psi0, (Constraint(con.psi, delta, con.kind, con.two_sided, con.name),))


def check_solver_vs_lp(instances: int = 100, seed: int = 0, tol: float = 1e-9,
                       max_n: int = 200) -> CheckResult:
    """Tuned single-constraint objective equals the exact randomized LP optimum."""
    rng = np.random.default_rng(seed)
    kinds = ("budget", "dp", "typek")
    worst_obj = worst_cons = 0.0
    bad = []
    counts = {"solved": 0, "infeasible": 0}
    for t in range(instances):
        kind = kinds[t % 3]
        d = 3 if kind == "dp" else int(rng.choice([3, 4]))
        n = int(rng.integers(10, max_n + 1))
        emb = random_single_problem(rng, kind, n, d)
        con = emb.constraints[0]
        inst = FiniteInstance.empirical(emb.psi0, con.psi)
        ref = lp_exact(inst, [con.delta], [con.two_sided])
        try:
            policy = solve_single(emb)
        except NotFeasible:
            counts["infeasible"] += 1
            if ref.feasible:
                bad.append((t, kind, "solver infeasible, LP feasible"))
            continue
        counts["solved"] += 1
        obj, cons = emb.values(policy.masses(emb))
        v = abs(cons[0]) if con.two_sided else cons[0]
        worst_obj = max(worst_obj, abs(obj - ref.objective))
        worst_cons = max(worst_cons, v - con.delta)
        if abs(obj - ref.objective) > tol or v > con.delta + tol:
            bad.append((t, kind, obj - ref.objective, v - con.delta))
    detail = (f"{instances} instances ({counts['solved']} feasible), max |obj - LP| = "
              f"{worst_obj:.2e}, max excess = {max(worst_cons, 0.0):.2e}")
    return CheckResult("solver_vs_lp", not bad, detail,
                       data={"failures": bad, "max_obj_diff": worst_obj, **counts})


def check_lp_routes(instances: int = 60, seed: int = 1) -> CheckResult:
    """Greedy and simplex LP oracles agree on one-constraint instances."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    bad = []
    for t in range(instances):
        n = int(rng.integers(2, 30))
        d = int(rng.integers(2, 5))
        two = bool(t % 2)
        psi0 = rng.random((n, d))
        psi1 = rng.standard_normal((n, d)) if two else rng.random((n, d))
        inst = FiniteInstance(rng.dirichlet(np.ones(n)), psi0, (psi1,))
        delta = float(rng.uniform(0.0, 0.5))
        g = lp_exact(inst, [delta], [two], method="greedy")
        s = lp_exact(inst, [delta], [two], method="simplex")
        if g.feasible != s.feasible:
            bad.append((t, "feasibility"))
            continue
        if g.feasible:
            worst = max(worst, abs(g.objective - s.objective))
            if abs(g.objective - s.objective) > 1e-9:
                bad.append((t, g.objective - s.objective))
    return CheckResult("lp_greedy_vs_simplex", not bad,
                       f"{instances} instances, max |greedy - simplex| = {worst:.2e}",
                       data={"failures": bad})


def check_curve_monotone(instances: int = 100, seed: int = 2, tol: float = 1e-9) -> CheckResult:
    """The constraint curve never increases between consecutive breakpoints."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    total = 0
    for t in range(instances):
        kind = ("budget", "dp", "typek")[t % 3]
        d = 3 if kind == "dp" else int(rng.choice([3, 4]))
        emb = random_single_problem(rng, kind, int(rng.integers(5, 200)), d)
        for sign in (1.0, -1.0):
            try:
                curve = constraint_curve(emb.psi0, sign * emb.constraints[0].psi)
            except AssertionError:
                return CheckResult("curve_monotone", False, f"instance {t}: assertion raised")
            worst = max(worst, curve.monotone_violation())
            total += curve.breakpoints.size
    return CheckResult("curve_monotone", worst <= tol,
                       f"{2 * instances} curves, {total} breakpoints, "
                       f"max increase = {worst:.2e}")


def check_budget_bound(datasets: int = 50, n: int = 50, seed: int = 3) -> CheckResult:
    """Deterministic budget rule is within ``1/n`` of the randomized optimum."""
    rng = np.random.default_rng(seed)
    worst = -np.inf
    bad = []
    for t in range(datasets):
        loss_h = rng.random(n) if t % 2 else rng.integers(0, 2, n).astype(float)
        loss_ai = rng.random(n) if t % 2 else rng.integers(0, 2, n).astype(float)
        b = float(rng.uniform(0.0, 1.0))
        det = budget_loss(loss_h, loss_ai, budget_deterministic(loss_h, loss_ai, b))
        opt = budget_lp_loss(loss_h, loss_ai, b)
        worst = max(worst, det - opt)
        if det > opt + 1.0 / n:
            bad.append((t, det - opt))
    return CheckResult("budget_rule_bound", not bad,
                       f"{datasets} datasets (n={n}), max loss - LP = {worst:.4f} "
                       f"vs bound {1.0 / n:.4f}", data={"failures": bad})


def check_knapsack(instances: int = 50, max_n: int = 15, seed: int = 4,
                   tol: float = 1e-9) -> CheckResult:
    """The reduced deferral problem has the knapsack optimum."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    bad = []
    for t in range(instances):
        n = int(rng.integers(1, max_n + 1))
        values = rng.integers(1, 50, n).astype(float)
        weights = rng.integers(1, 30, n).astype(float)
        cap = float(rng.integers(1, int(weights.sum()) + 1))
        kp = KnapsackInstance(values, weights, cap)
        red = knapsack_to_l2d(kp)
        obj, _ = l2d_brute(red.instance, [red.budget])
        got = red.to_knapsack_value(obj)
        want = knapsack_brute(kp)
        worst = max(worst, abs(got - want))
        if abs(got - want) > tol:
            bad.append((t, got, want))
    return CheckResult("knapsack_reduction", not bad,
                       f"{instances} instances, max |reduced - knapsack| = {worst:.2e}",
                       data={"failures": bad})


def check_impossibility() -> list[CheckResult]:
    """Structural claims of the two-measure construction plus its stated table."""
    rows = verify_impossibility()
    out = []
    for r in rows:
        tag = f"a={r['a']},b={r['b']}"
        structural = r["same_rhat"] and r["own_at_most_third"] and r["not_interchangeable"]
        out.append(CheckResult(f"impossibility_structure[{tag}]", bool(structural),
                               f"own=({r['own_1']}, {r['own_2']}) "
                               f"cross=({r['cross_1_with_r2']}, {r['cross_2_with_r1']})"))
        out.append(CheckResult(
            f"impossibility_table[{tag}]", bool(r["matches_claim"]),
            "computed " + ", ".join(map(str, r["computed"])) +
            " / stated " + ", ".join(map(str, r["claimed"])), informational=True))
    return out


def check_compositionality() -> CheckResult:
    rep = compositionality_demo()
    ok = (rep.classifier_gap == 0 and rep.expert_gap == 0 and rep.system_gap == 0.5
          and not rep.fair_rule_below_half and rep.min_fair_loss == 0.5)
    return CheckResult("compositionality", ok,
                       f"gaps (h, m, system) = ({rep.classifier_gap}, {rep.expert_gap}, "
                       f"{rep.system_gap}); system loss {rep.system_loss}; "
                       f"best fair loss {rep.min_fair_loss}")


def run_all(seed: int = 0, quick: bool = False) -> list[CheckResult]:
    scale = 0.2 if quick else 1.0

    def count(x):
        return max(int(x * scale), 3)

    out = []
    checks = [
        lambda: check_solver_vs_lp(count(100), seed),
        lambda: check_lp_routes(count(60), seed + 1),
        lambda: check_curve_monotone(count(100), seed + 2),
        lambda: check_budget_bound(count(50), 50, seed + 3),
        lambda: check_knapsack(count(50), 15 if not quick else 10, seed + 4),
    ]
    for fn in checks:
        t0 = time.perf_counter()
        res = fn()
        res.data["seconds"] = time.perf_counter() - t0
        out.append(res)
    out += check_impossibility()
    out.append(check_compositionality())
    return out
