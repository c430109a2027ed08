"""Exact small-instance solvers and analytic counterexamples.

These routines are deliberately independent of :mod:`constrained_defer.solver`
so they can be used to check it: a fractional multiple-choice knapsack greedy
for one constraint, a dense tableau simplex for several, brute-force
enumeration for deterministic policies, and exact rational arithmetic for the
small analytic examples.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .lp import simplex_max

SIMPLEX_CAP = 200
BRUTE_CAP = 25
TOL = 1e-12


class OracleLimitError(ValueError):
    """Instance too large for an exact oracle."""


@dataclass(frozen=True)
class FiniteInstance:
    """Discrete distribution with atoms ``i`` of mass ``probs[i]``.

    ``psi0[i]`` is the reward vector and ``psis[j][i]`` the ``j``-th
    constraint vector of atom ``i``.
    """

    probs: np.ndarray
    psi0: np.ndarray
    psis: tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        psi0 = np.atleast_2d(np.asarray(self.psi0, dtype=float))
        psis = tuple(np.atleast_2d(np.asarray(p, dtype=float)) for p in self.psis)
        if np.any(probs <= 0):
            raise ValueError("atom probabilities must be positive")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError(f"atom probabilities sum to {probs.sum()!r}, not 1")
        if psi0.shape[0] != probs.shape[0] or any(p.shape != psi0.shape for p in psis):
            raise ValueError("embedding shapes do not match the atoms")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "psi0", psi0)
        object.__setattr__(self, "psis", psis)

    @property
    def n(self) -> int:
        return self.probs.shape[0]

    @property
    def d(self) -> int:
        return self.psi0.shape[1]

    @classmethod
    def empirical(cls, psi0, *psis) -> "FiniteInstance":
        n = np.asarray(psi0).shape[0]
        return cls(np.full(n, 1.0 / n), psi0, psis)

    def value(self, masses: np.ndarray) -> tuple[float, np.ndarray]:
        obj = float(self.probs @ np.sum(masses * self.psi0, axis=1))
        cons = np.array([self.probs @ np.sum(masses * p, axis=1) for p in self.psis])
        return obj, cons


@dataclass
class LPResult:
    objective: float
    masses: np.ndarray | None
    constraint_values: np.ndarray
    feasible: bool = True
    min_achievable: float | None = None


# -- single constraint: fractional multiple-choice knapsack ---------------------

def _hull_increments(w: np.ndarray, v: np.ndarray, start: int):
    """Upper concave chain of options to the right of ``start``.

    Returns a list of ``(slope, dw, dv, from_option, to_option)`` with
    positive, decreasing slopes.
    """
    chain = [start]
    cur = start
    while True:
        dw = w - w[cur]
        dv = v - v[cur]
        cand = np.flatnonzero((dw > TOL) & (dv > TOL * max(1.0, abs(v[cur]))))
        if cand.size == 0:
            break
        slopes = dv[cand] / dw[cand]
        best = slopes.max()
        # among equal best slopes take the farthest point
        top = cand[slopes >= best * (1 - 1e-15)]
        nxt = int(top[np.argmax(w[top])])
        chain.append(nxt)
        cur = nxt
    return [((v[b] - v[a]) / (w[b] - w[a]), w[b] - w[a], v[b] - v[a], a, b)
            for a, b in zip(chain[:-1], chain[1:])]


def _greedy_single(inst: FiniteInstance, psi1: np.ndarray, delta: float) -> LPResult:
    p = inst.probs
    W = p[:, None] * psi1
    V = p[:, None] * inst.psi0
    n, d = W.shape
    choice = np.empty(n, dtype=int)
    incs = []
    for i in range(n):
        wmin = W[i].min()
        cand = np.flatnonzero(W[i] <= wmin + TOL * max(1.0, abs(wmin)))
        choice[i] = int(cand[np.argmax(V[i, cand])])
        for slope, dw, dv, a, b in _hull_increments(W[i], V[i], choice[i]):
            incs.append((slope, i, dw, dv, a, b))
    masses = np.zeros((n, d))
    masses[np.arange(n), choice] = 1.0
    used = float(W[np.arange(n), choice].sum())
    if used > delta + TOL:
        return LPResult(-np.inf, None, np.array([used]), feasible=False, min_achievable=used)
    # apply increments by decreasing slope; an atom's chain is already ordered
    incs.sort(key=lambda t: -t[0])
    for slope, i, dw, dv, a, b in incs:
        room = delta - used
        if room <= 0:
            break
        frac = 1.0 if dw <= room else room / dw
        masses[i, a] -= frac
        masses[i, b] += frac
        used += frac * dw
        if frac < 1.0:
            break
    masses = np.clip(masses, 0.0, 1.0)
    obj, cons = inst.value(masses)
    return LPResult(obj, masses, cons)


def _greedy_two_sided(inst, psi1, delta) -> LPResult:
    """``|mean <f, psi1>| <= delta`` with a single row.

    The unconstrained optimal face gives an interval of achievable constraint
    values; if it misses ``[-delta, delta]`` only the nearer side can bind.
    """
    p = inst.probs
    n = inst.n
    best = inst.psi0.max(axis=1, keepdims=True)
    face = inst.psi0 >= best - TOL * np.maximum(1.0, np.abs(best))
    lo = float(p @ np.where(face, psi1, np.inf).min(axis=1))
    hi = float(p @ np.where(face, psi1, -np.inf).max(axis=1))
    if lo > delta:
        res = _greedy_single(inst, psi1, delta)
    elif hi < -delta:
        res = _greedy_single(inst, -psi1, delta)
        if res.feasible:
            res.constraint_values = -res.constraint_values
    else:
        # pick a face point whose value lies in [-delta, delta]
        target = float(np.clip(0.0, lo, hi)) if lo <= 0 <= hi else (lo if lo > 0 else hi)
        target = float(np.clip(target, -delta, delta))
        i_lo = np.argmin(np.where(face, psi1, np.inf), axis=1)
        i_hi = np.argmax(np.where(face, psi1, -np.inf), axis=1)
        t = 0.0 if hi - lo <= 0 else (target - lo) / (hi - lo)
        masses = np.zeros_like(inst.psi0)
        masses[np.arange(n), i_lo] += 1 - t
        masses[np.arange(n), i_hi] += t
        obj, _ = inst.value(masses)
        res = LPResult(obj, masses, np.array([float(p @ np.sum(masses * psi1, axis=1))]))
    if not res.feasible:
        res.min_achievable = min(abs(lo), abs(hi)) if res.min_achievable is None else res.min_achievable
    return res


# -- several constraints: dense two-phase simplex -------------------------------

def _simplex_lp(inst: FiniteInstance, rows, deltas, cap: int) -> LPResult:
    n, d = inst.n, inst.d
    if n * d > cap:
        raise OracleLimitError(f"dense simplex limited to n*d <= {cap}, got {n * d}")
    m = len(rows)
    N = n * d + m                                   # f variables then slacks
    A = np.zeros((n + m, N))
    b = np.zeros(n + m)
    for i in range(n):
        A[i, i * d:(i + 1) * d] = 1.0
        b[i] = 1.0
    for j, (psi, delta) in enumerate(zip(rows, deltas)):
        A[n + j, :n * d] = (inst.probs[:, None] * psi).ravel()
        A[n + j, n * d + j] = 1.0
        b[n + j] = delta
    c = np.concatenate([(inst.probs[:, None] * inst.psi0).ravel(), np.zeros(m)])
    sol = simplex_max(c, A, b)
    x, val = sol.x, sol.value
    if x is None:
        return LPResult(-np.inf, None, np.full(m, np.nan), feasible=False)
    masses = np.clip(x[:n * d].reshape(n, d), 0.0, None)
    obj, cons = inst.value(masses)
    return LPResult(val, masses, cons)


def lp_exact(inst: FiniteInstance, deltas, two_sided=None, method: str = "auto",
             cap: int = SIMPLEX_CAP) -> LPResult:
    """Optimal randomized policy on a finite instance.

    ``max sum_i p_i <f_i, psi0_i>`` subject to ``sum_i p_i <f_i, psi_j,i> <= delta_j``
    (or ``|.| <= delta_j`` for two-sided rows).  One constraint is solved by
    the fractional greedy; several by the dense simplex.
    """
    deltas = [float(x) for x in np.atleast_1d(deltas)]
    two_sided = [False] * len(deltas) if two_sided is None else list(two_sided)
    if len(deltas) != len(inst.psis):
        raise ValueError("one delta per constraint required")
    if not deltas:
        m = np.zeros_like(inst.psi0)
        m[np.arange(inst.n), np.argmax(inst.psi0, axis=1)] = 1.0
        return LPResult(inst.value(m)[0], m, np.zeros(0))
    if method == "auto":
        method = "greedy" if len(deltas) == 1 else "simplex"
    if method == "greedy":
        if len(deltas) != 1:
            raise ValueError("greedy oracle handles exactly one constraint")
        if two_sided[0]:
            return _greedy_two_sided(inst, inst.psis[0], deltas[0])
        return _greedy_single(inst, inst.psis[0], deltas[0])
    rows, ds = [], []
    for psi, delta, two in zip(inst.psis, deltas, two_sided):
        rows.append(psi)
        ds.append(delta)
        if two:
            rows.append(-psi)
            ds.append(delta)
    res = _simplex_lp(inst, rows, ds, cap)
    if res.feasible:
        res.constraint_values = np.array(inst.value(res.masses)[1])
    return res


# -- deterministic policies -----------------------------------------------------

def l2d_brute(inst: FiniteInstance, deltas, feas_tol: float = TOL) -> tuple[float, np.ndarray]:
    """Best one-hot policy by enumerating all ``d**n`` option assignments."""
    n, d = inst.n, inst.d
    if n > BRUTE_CAP or d ** n > 2 ** BRUTE_CAP:
        raise OracleLimitError(f"brute force limited to {BRUTE_CAP} binary atoms")
    deltas = np.atleast_1d(np.asarray(deltas, dtype=float))
    V = inst.probs[:, None] * inst.psi0
    Ws = [inst.probs[:, None] * p for p in inst.psis]
    best, best_assign = -np.inf, None
    total = d ** n
    chunk = 1 << 16
    powers = d ** np.arange(n)
    for start in range(0, total, chunk):
        codes = np.arange(start, min(total, start + chunk))
        assign = (codes[:, None] // powers) % d                     # (c, n)
        obj = V[np.arange(n), assign].sum(axis=1)
        ok = np.ones(len(codes), dtype=bool)
        for W, delta in zip(Ws, deltas):
            ok &= W[np.arange(n), assign].sum(axis=1) <= delta + feas_tol
        if ok.any():
            j = np.flatnonzero(ok)[np.argmax(obj[ok])]
            if obj[j] > best:
                best, best_assign = float(obj[j]), assign[j].copy()
    return best, best_assign


@dataclass(frozen=True)
class KnapsackInstance:
    values: np.ndarray
    weights: np.ndarray
    capacity: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if v.shape != w.shape or v.ndim != 1:
            raise ValueError("values and weights must be 1-D and aligned")
        if np.any(v <= 0) or np.any(w <= 0) or self.capacity <= 0:
            raise ValueError("values, weights and capacity must be positive")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "weights", w)


def knapsack_brute(kp: KnapsackInstance) -> float:
    """0-1 knapsack optimum by enumerating all subsets."""
    n = kp.values.size
    if n > BRUTE_CAP:
        raise OracleLimitError(f"brute force limited to n <= {BRUTE_CAP}")
    best = 0.0
    chunk = 1 << 16
    bits = 1 << np.arange(n)
    for start in range(0, 1 << n, chunk):
        codes = np.arange(start, min(1 << n, start + chunk))
        take = (codes[:, None] & bits) > 0
        w = take @ kp.weights
        v = take @ kp.values
        ok = w <= kp.capacity + 1e-12
        if ok.any():
            best = max(best, float(v[ok].max()))
    return best


@dataclass(frozen=True)
class KnapsackReduction:
    instance: FiniteInstance
    budget: float
    base: float        # objective of never deferring
    scale: float       # sum_i w_i * sum_i (c_i / w_i)

    def to_knapsack_value(self, l2d_objective: float) -> float:
        return (l2d_objective - self.base) * self.scale


def knapsack_to_l2d(kp: KnapsackInstance) -> KnapsackReduction:
    """Budgeted deferral instance whose deterministic optimum encodes ``kp``.

    Item ``i`` becomes an atom of mass ``w_i / W`` on which the classifier's
    loss is ``(c_i / w_i) / S`` and the expert is always right; deferring an
    atom spends its mass from the budget ``K / W``.
    """
    W = float(kp.weights.sum())
    ratio = kp.values / kp.weights
    S = float(ratio.sum())
    loss = ratio / S
    probs = kp.weights / W
    probs = probs / probs.sum()
    n = kp.values.size
    psi0 = np.column_stack([1.0 - loss, np.ones(n)])
    psi1 = np.column_stack([np.zeros(n), np.ones(n)])
    inst = FiniteInstance(probs, psi0, (psi1,))
    base = float(probs @ (1.0 - loss))
    return KnapsackReduction(inst, kp.capacity / W, base, W * S)


def budget_deterministic(loss_h, loss_ai, b: float) -> np.ndarray:
    """Defer the records where the expert helps most, within the budget.

    Records with ``loss_h - loss_ai <= 0`` are candidates; at most
    ``floor(b * n)`` of them (smallest differences first, ties by index) are
    deferred.
    """
    loss_h = np.asarray(loss_h, dtype=float)
    loss_ai = np.asarray(loss_ai, dtype=float)
    n = loss_h.size
    diff = loss_h - loss_ai
    cand = np.flatnonzero(diff <= 0)
    cap = int(np.floor(b * n + 1e-12))
    order = cand[np.argsort(diff[cand], kind="stable")]
    r = np.zeros(n, dtype=bool)
    r[order[:min(len(order), cap)]] = True
    return r


def budget_loss(loss_h, loss_ai, r) -> float:
    r = np.asarray(r, dtype=float)
    return float(np.mean(r * loss_h + (1 - r) * loss_ai))


def budget_lp_loss(loss_h, loss_ai, b: float) -> float:
    """Optimal randomized deferral loss under ``mean r <= b``."""
    loss_h = np.asarray(loss_h, dtype=float)
    loss_ai = np.asarray(loss_ai, dtype=float)
    psi0 = np.column_stack([-loss_ai, -loss_h])
    psi1 = np.column_stack([np.zeros_like(loss_h), np.ones_like(loss_h)])
    res = lp_exact(FiniteInstance.empirical(psi0, psi1), [b])
    return -res.objective


def exchange_improves(loss_h, loss_ai, r, b: float) -> bool:
    """True if some deferred/kept swap, or an extra deferral, lowers the loss."""
    diff = np.asarray(loss_h, dtype=float) - np.asarray(loss_ai, dtype=float)
    r = np.asarray(r, dtype=bool)
    n = diff.size
    if r.any() and (~r).any() and diff[~r].min() < diff[r].max() - 1e-15:
        return True
    if r.sum() + 1 <= np.floor(b * n + 1e-12) and (~r).any() and diff[~r].min() < -1e-15:
        return True
    return False


# -- analytic counterexamples ---------------------------------------------------

# cells are (expert correct, classifier correct)
CELLS = ((True, True), (True, False), (False, True), (False, False))


def _rule(a: int, b: int):
    """Empirical deferral label as a function of (expert correct, classifier correct)."""
    return {(True, False): 1, (False, True): 0, (False, False): a, (True, True): b}


def _loss(measure: dict, r: int) -> Fraction:
    """Deferral loss of the constant rule ``r`` under a measure on CELLS."""
    total = Fraction(0)
    for (m_ok, h_ok), pr in measure.items():
        err = (not m_ok) if r == 1 else (not h_ok)
        total += pr * int(err)
    return total


def _best_constant(measure: dict) -> int:
    return min((0, 1), key=lambda r: (_loss(measure, r), r))


@dataclass(frozen=True)
class ImpossibilityCase:
    a: int
    b: int
    mu1: dict
    mu2: dict
    claimed: tuple[Fraction, Fraction, Fraction, Fraction]  # own1, own2, cross12, cross21

    def rule_distribution(self, measure) -> Fraction:
        rule = _rule(self.a, self.b)
        return sum((pr for cell, pr in measure.items() if rule[cell] == 1), Fraction(0))

    def table(self) -> dict:
        r1, r2 = _best_constant(self.mu1), _best_constant(self.mu2)
        return {
            "r_star_1": r1, "r_star_2": r2,
            "own_1": _loss(self.mu1, r1), "own_2": _loss(self.mu2, r2),
            "cross_1_with_r2": _loss(self.mu1, r2), "cross_2_with_r1": _loss(self.mu2, r1),
            "rhat_rate_1": self.rule_distribution(self.mu1),
            "rhat_rate_2": self.rule_distribution(self.mu2),
        }


def impossibility_instances() -> list[ImpossibilityCase]:
    """The four label-rule variants and their stated measure pairs.

    ``claimed`` holds the loss values asserted alongside each construction:
    own losses of the two optimal constant rules, then the two cross losses.
    """
    F = Fraction
    t, tt = F(1, 3), F(2, 3)
    return [
        ImpossibilityCase(0, 0, {(True, True): tt, (True, False): t},
                          {(False, True): tt, (True, False): t}, (F(0), t, tt, tt)),
        ImpossibilityCase(1, 0, {(True, False): t, (False, True): tt},
                          {(True, False): t, (True, True): tt}, (t, F(0), tt, tt)),
        ImpossibilityCase(0, 1, {(False, True): t, (True, False): tt},
                          {(False, True): t, (True, True): tt}, (t, F(0), tt, tt)),
        ImpossibilityCase(1, 1, {(False, True): t, (True, False): tt},
                          {(False, True): t, (False, False): t, (True, True): t},
                          (t, t, tt, tt)),
    ]


def verify_impossibility() -> list[dict]:
    """Per-variant checks of the structural claims and the stated loss values."""
    rows = []
    for case in impossibility_instances():
        tab = case.table()
        computed = (tab["own_1"], tab["own_2"], tab["cross_1_with_r2"], tab["cross_2_with_r1"])
        rows.append({
            "a": case.a, "b": case.b, **tab,
            "same_rhat": tab["rhat_rate_1"] == tab["rhat_rate_2"],
            "own_at_most_third": max(tab["own_1"], tab["own_2"]) <= Fraction(1, 3),
            "not_interchangeable": (tab["cross_1_with_r2"] > tab["own_1"]
                                    and tab["cross_2_with_r1"] > tab["own_2"]),
            "claimed": case.claimed, "computed": computed,
            "matches_claim": computed == case.claimed,
        })
    return rows


@dataclass(frozen=True)
class CompositionalityReport:
    classifier_gap: Fraction
    expert_gap: Fraction
    system_gap: Fraction
    system_loss: Fraction
    classifier_loss: Fraction
    fair_rules: tuple[tuple[int, ...], ...]
    min_fair_loss: Fraction
    fair_rule_below_half: bool


def compositionality_demo() -> CompositionalityReport:
    """Four equiprobable points, ``Y = 1`` everywhere, equality of opportunity.

    Group 0 holds ``x1, x2``, group 1 holds ``x3, x4``.  The classifier and
    expert are each fair on their own, but the loss-minimizing combination
    (keep ``x1``, defer ``x2``) is not; every fair deferral rule has loss at
    least 1/2.
    """
    group = (0, 0, 1, 1)
    h = (1, 0, 1, 0)
    m = (0, 1, 1, 0)
    px = Fraction(1, 4)

    def gap(pred):
        # Pr(Yhat=1 | Y=1, A=1) - Pr(Yhat=1 | Y=1, A=0)
        rate = [sum(Fraction(pred[i]) for i in range(4) if group[i] == a) / 2 for a in (0, 1)]
        return rate[1] - rate[0]

    def system(r):
        return tuple(m[i] if r[i] else h[i] for i in range(4))

    def loss(pred):
        return sum(px * (1 - pred[i]) for i in range(4))

    rules = list(itertools.product((0, 1), repeat=4))
    losses = {r: loss(system(r)) for r in rules}
    best = min(losses.values())
    # among optimal rules pick the one that classifies x1 and defers x2, deferring nothing else
    optimal = min((r for r in rules if losses[r] == best), key=lambda r: sum(r))
    fair = tuple(r for r in rules if gap(system(r)) == 0)
    min_fair = min(losses[r] for r in fair)
    return CompositionalityReport(
        classifier_gap=gap(h), expert_gap=gap(m), system_gap=abs(gap(system(optimal))),
        system_loss=losses[optimal], classifier_loss=loss(h), fair_rules=fair,
        min_fair_loss=min_fair, fair_rule_below_half=min_fair < Fraction(1, 2),
    )
