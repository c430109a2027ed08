"""Lagrangian argmax rule with randomized tie-breaking for constrained deferral.

A fitted rule scores each option by ``psi0 - sum_j k_j * psi_j`` and picks the
argmax.  With a single constraint, ties at the chosen multiplier are broken
by mixing two selections: the first tied index with the smallest constraint
entry (the conservative selection ``f_{k,0}``) and the first tied index with the
largest reward entry (``f_{k,1}``).  The mixing weight makes the constraint
hold with equality when the constraint curve jumps across ``delta``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .core import DecisionBatch, DeferralDecision
from .embeddings import EmbeddingSet
from .lp import solve_inequality_lp

EPS_TIE = 1e-12
EPS_LEFT = 1e-8
FEAS_TOL = 1e-12
MONO_TOL = 1e-9
BREAKPOINT_CAP = 10_000_000


class NotFeasible(RuntimeError):
    """No multiplier satisfies the constraint(s) on the tuning data."""

    def __init__(self, message: str, min_achievable=None, report=None):
        super().__init__(message)
        self.min_achievable = min_achievable
        self.report = report or {}


# -- tie-breaking ---------------------------------------------------------------

def _tie_tol(score: np.ndarray, eps_tie: float) -> np.ndarray:
    return eps_tie * (1.0 + np.abs(score).max(axis=-1))


def tau_select_batch(score, psi0, psi1, p: float = 0.0, eps_tie: float = EPS_TIE,
                     hi_key=None):
    """Row-wise randomized argmax.

    Returns ``(lo, hi, masses)``: ``lo`` is the first tied index minimizing
    ``psi1``, ``hi`` the first tied index maximizing ``psi0`` (or minimizing
    ``hi_key`` when given); ``masses`` puts ``1 - p`` on ``lo`` and ``p`` on
    ``hi``.
    """
    score = np.atleast_2d(np.asarray(score, dtype=float))
    psi0 = np.atleast_2d(np.asarray(psi0, dtype=float))
    psi1 = np.atleast_2d(np.asarray(psi1, dtype=float))
    top = score.max(axis=1, keepdims=True)
    tied = score >= top - _tie_tol(score, eps_tie)[:, None]
    lo = np.argmin(np.where(tied, psi1, np.inf), axis=1)
    if hi_key is None:
        hi = np.argmax(np.where(tied, psi0, -np.inf), axis=1)
    else:
        hi = np.argmin(np.where(tied, np.atleast_2d(hi_key), np.inf), axis=1)
    rows = np.arange(score.shape[0])
    masses = np.zeros_like(score)
    masses[rows, lo] += 1.0 - p
    masses[rows, hi] += p
    return lo, hi, masses


def tau_select(score_vec, psi0_vec, psi1_vec, p: float = 0.0, eps_tie: float = EPS_TIE):
    """Simplex vector for a single instance; see :func:`tau_select_batch`."""
    return tau_select_batch(score_vec, psi0_vec, psi1_vec, p, eps_tie)[2][0]


# -- constraint curve -----------------------------------------------------------

@dataclass
class ConstraintCurve:
    """Right-continuous step function ``C(k) = mean <f_{k,0}, psi1>``.

    ``values[j]`` is ``C`` on ``[breakpoints[j], breakpoints[j+1])``;
    ``left_values[j]`` is the limit from the left at ``breakpoints[j]``.
    ``start_value`` is ``C`` below the first breakpoint.  The matching
    objective values are kept alongside.
    """

    breakpoints: np.ndarray
    values: np.ndarray
    left_values: np.ndarray
    objectives: np.ndarray
    left_objectives: np.ndarray
    start_value: float
    start_objective: float
    exact: bool = True
    # per-instance selection tables (exact mode only)
    _inst_breaks: np.ndarray | None = field(default=None, repr=False)
    _inst_select: np.ndarray | None = field(default=None, repr=False)

    def __call__(self, k: float) -> float:
        j = np.searchsorted(self.breakpoints, k, side="right") - 1
        return self.start_value if j < 0 else float(self.values[j])

    def objective(self, k: float) -> float:
        j = np.searchsorted(self.breakpoints, k, side="right") - 1
        return self.start_objective if j < 0 else float(self.objectives[j])

    def monotone_violation(self) -> float:
        seq = np.concatenate([[self.start_value], self.values])
        return float(max(np.max(np.diff(seq), initial=0.0), 0.0))

    def selections(self, k: float, tol: float):
        """Per-instance ``(lo, hi)`` option indices at multiplier ``k``."""
        if self._inst_breaks is None:
            raise RuntimeError("selection table not stored for this curve")
        B = self._inst_breaks
        right = np.sum(B <= k + tol, axis=1)
        left = np.sum(B < k - tol, axis=1)
        rows = np.arange(B.shape[0])
        return self._inst_select[rows, right], self._inst_select[rows, left]


def _pairwise_breakpoints(psi0, psi1):
    n, d = psi0.shape
    i, j = np.triu_indices(d, k=1)
    num = psi0[:, i] - psi0[:, j]
    den = psi1[:, i] - psi1[:, j]
    with np.errstate(divide="ignore", invalid="ignore"):
        B = np.where(np.abs(den) > 1e-12, num / den, np.inf)
    return np.sort(B, axis=1)


def _probes(B):
    """Points strictly inside each interval between a row's breakpoints."""
    n, P = B.shape
    finite = np.isfinite(B)
    count = finite.sum(axis=1)
    # pad the unused tail with the row's last finite breakpoint
    last = np.where(count > 0, B[np.arange(n), np.maximum(count - 1, 0)], 0.0)
    Bf = np.where(finite, B, last[:, None])
    if P == 0:
        return np.zeros((n, 1)), Bf
    first = Bf[:, :1] - 1.0 - np.abs(Bf[:, :1])
    after = Bf[:, -1:] + 1.0 + np.abs(Bf[:, -1:])
    mids = 0.5 * (Bf[:, 1:] + Bf[:, :-1])
    return np.hstack([first, mids, after]), Bf


def _select_at(psi0, psi1, k, eps_tie):
    """Conservative selection (min psi1 among ties) at per-row multipliers ``k``."""
    # k: (n, Q) -> scores (n, Q, d)
    score = psi0[:, None, :] - k[..., None] * psi1[:, None, :]
    top = score.max(axis=2, keepdims=True)
    tol = eps_tie * (1.0 + np.abs(score).max(axis=2, keepdims=True))
    tied = score >= top - tol
    return np.argmin(np.where(tied, psi1[:, None, :], np.inf), axis=2)


def constraint_curve(psi0, psi1, eps_tie: float = EPS_TIE,
                     cap: int = BREAKPOINT_CAP) -> ConstraintCurve:
    """Exact constraint curve over all per-instance breakpoints.

    Each instance's argmax can only change where two options swap, at
    ``k = (psi0_i - psi0_j) / (psi1_i - psi1_j)``.  Selections are evaluated
    between consecutive breakpoints of every instance and the jumps are
    accumulated over the global sorted order, so values are exact at every
    breakpoint.  Above ``cap`` pairwise breakpoints a bisection grid is used.
    """
    psi0 = np.asarray(psi0, dtype=float)
    psi1 = np.asarray(psi1, dtype=float)
    n, d = psi0.shape
    if n == 0:
        raise ValueError("empty tuning data")
    if n * d * d > cap:
        return _grid_curve(psi0, psi1, eps_tie)
    B = _pairwise_breakpoints(psi0, psi1)
    probes, Bf = _probes(B)
    sel = _select_at(psi0, psi1, probes, eps_tie)              # (n, P+1)
    c = np.take_along_axis(psi1, sel, axis=1)
    o = np.take_along_axis(psi0, sel, axis=1)
    start_c = float(c[:, 0].mean())
    start_o = float(o[:, 0].mean())
    if Bf.shape[1] == 0:
        empty = np.zeros(0)
        return ConstraintCurve(empty, empty, empty, empty, empty, start_c, start_o,
                               True, Bf, sel)
    dc = np.diff(c, axis=1) / n
    do = np.diff(o, axis=1) / n
    changed = sel[:, 1:] != sel[:, :-1]
    pts, jc, jo = Bf[changed], dc[changed], do[changed]
    order = np.argsort(pts, kind="stable")
    pts, jc, jo = pts[order], jc[order], jo[order]
    if pts.size == 0:
        empty = np.zeros(0)
        return ConstraintCurve(empty, empty, empty, empty, empty, start_c, start_o,
                               True, Bf, sel)
    # cluster numerically equal breakpoints
    gap = np.diff(pts) > 1e-12 * np.maximum(1.0, np.abs(pts[1:]))
    cluster = np.concatenate([[0], np.cumsum(gap)])
    m = int(cluster[-1]) + 1
    heads = np.flatnonzero(np.concatenate([[True], gap]))
    bps = pts[heads]
    vals = start_c + np.cumsum(np.bincount(cluster, weights=jc, minlength=m))
    objs = start_o + np.cumsum(np.bincount(cluster, weights=jo, minlength=m))
    left = np.concatenate([[start_c], vals[:-1]])
    left_o = np.concatenate([[start_o], objs[:-1]])
    curve = ConstraintCurve(bps, vals, left, objs, left_o, start_c, start_o, True, Bf, sel)
    viol = curve.monotone_violation()
    if viol > MONO_TOL:
        raise AssertionError(f"constraint curve increases by {viol:.3e}")
    return curve


def _grid_curve(psi0, psi1, eps_tie, lo=-1e6, hi=1e6, num=4001) -> ConstraintCurve:
    """Direct evaluation on a symmetric log grid; used above the breakpoint cap."""
    pos = np.logspace(-6, np.log10(hi), (num - 1) // 2)
    ks = np.concatenate([-pos[::-1], [0.0], pos])
    vals, objs, lvals, lobjs = [], [], [], []
    for k in ks:
        lo_idx, _, _ = tau_select_batch(psi0 - k * psi1, psi0, psi1, 0.0, eps_tie)
        rows = np.arange(psi0.shape[0])
        vals.append(psi1[rows, lo_idx].mean())
        objs.append(psi0[rows, lo_idx].mean())
        kl = k - EPS_LEFT * max(1.0, abs(k))
        lo_l, _, _ = tau_select_batch(psi0 - kl * psi1, psi0, psi1, 0.0, eps_tie)
        lvals.append(psi1[rows, lo_l].mean())
        lobjs.append(psi0[rows, lo_l].mean())
    first, _, _ = tau_select_batch(psi0 - lo * psi1, psi0, psi1, 0.0, eps_tie)
    rows = np.arange(psi0.shape[0])
    return ConstraintCurve(ks, np.array(vals), np.array(lvals), np.array(objs),
                           np.array(lobjs), float(psi1[rows, first].mean()),
                           float(psi0[rows, first].mean()), exact=False)


# -- predictor and policy -------------------------------------------------------

@dataclass(frozen=True)
class ParametricPredictor:
    """``f_{k,p}``: argmax of ``psi0 - sum_j k_j s_j psi_j`` with two-way tie mixing.

    ``signs`` orients two-sided constraints; ``tie_weights`` combines the
    constraint rows into the vector whose minimum picks the conservative
    selection (the single active row for one constraint).  When
    ``hi_tie_weights`` is set, the second selection minimizes that
    combination instead of maximizing ``psi0``.
    """

    k: tuple[float, ...]
    signs: tuple[float, ...]
    p: float = 0.0
    eps_tie: float = EPS_TIE
    tie_weights: tuple[float, ...] | None = None
    hi_tie_weights: tuple[float, ...] | None = None

    def _combine(self, emb: EmbeddingSet, weights):
        out = np.zeros_like(emb.psi0)
        for w, s, c in zip(weights, self.signs, emb.constraints):
            if w != 0.0:
                out += (w * s) * c.psi
        return out

    def scores(self, emb: EmbeddingSet) -> np.ndarray:
        if len(emb.constraints) != len(self.k):
            raise ValueError(f"predictor has {len(self.k)} multipliers, "
                             f"embeddings have {len(emb.constraints)} constraints")
        return emb.psi0 - self._combine(emb, self.k)

    def tie_vector(self, emb: EmbeddingSet) -> np.ndarray:
        return self._combine(emb, self.tie_weights if self.tie_weights is not None else self.k)

    def masses(self, emb: EmbeddingSet) -> np.ndarray:
        hi_key = None if self.hi_tie_weights is None else self._combine(emb, self.hi_tie_weights)
        _, _, m = tau_select_batch(self.scores(emb), emb.psi0, self.tie_vector(emb),
                                   self.p, self.eps_tie, hi_key)
        return m


@dataclass
class DeferralPolicy:
    """A fitted rule: one parametric predictor or a weighted mixture of several.

    ``components`` holds ``(weight, predictor)`` pairs for mixtures; the
    single ``predictor`` is then the heaviest component and drives the
    deterministic read-out.
    """

    predictor: ParametricPredictor
    mode: str = "randomized"
    kinds: tuple[str, ...] = ()
    deltas: tuple[float, ...] = ()
    metadata: dict = field(default_factory=dict)
    components: tuple[tuple[float, ParametricPredictor], ...] = ()

    def __post_init__(self):
        if self.mode not in ("randomized", "deterministic"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def masses(self, emb: EmbeddingSet) -> np.ndarray:
        if self.mode == "deterministic":
            s = self.predictor.scores(emb)
            h, r = deterministic_rule(s)
            m = np.zeros_like(s)
            m[np.arange(len(h)), np.where(r, s.shape[1] - 1, h)] = 1.0
            return m
        if self.components:
            return sum(w * pr.masses(emb) for w, pr in self.components)
        return self.predictor.masses(emb)

    def with_mode(self, mode: str) -> "DeferralPolicy":
        return DeferralPolicy(self.predictor, mode, self.kinds, self.deltas,
                              dict(self.metadata), self.components)

    def decide(self, emb: EmbeddingSet, seed=None):
        """Decisions for every instance of ``emb``."""
        if self.mode == "deterministic":
            return decide_deterministic(self, emb)
        return decide(self, emb, seed)

    def to_dict(self) -> dict:
        return {
            **_predictor_dict(self.predictor),
            "mode": self.mode, "kinds": list(self.kinds), "deltas": list(self.deltas),
            "eps_left": EPS_LEFT, "metadata": self.metadata,
            "components": [{"weight": w, **_predictor_dict(pr)} for w, pr in self.components],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DeferralPolicy":
        comps = tuple((float(c["weight"]), _predictor_from(c)) for c in d.get("components", []))
        return cls(_predictor_from(d), d.get("mode", "randomized"), tuple(d.get("kinds", ())),
                   tuple(d.get("deltas", ())), d.get("metadata", {}), comps)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True, default=_jsonable)

    @classmethod
    def load(cls, path) -> "DeferralPolicy":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _predictor_dict(pr: ParametricPredictor) -> dict:
    return {"k": list(pr.k), "p": pr.p, "signs": list(pr.signs), "eps_tie": pr.eps_tie,
            "tie_weights": None if pr.tie_weights is None else list(pr.tie_weights),
            "hi_tie_weights": None if pr.hi_tie_weights is None else list(pr.hi_tie_weights)}


def _predictor_from(d: dict) -> ParametricPredictor:
    def opt(key):
        v = d.get(key)
        return None if v is None else tuple(float(x) for x in v)
    return ParametricPredictor(tuple(float(x) for x in d["k"]),
                               tuple(float(x) for x in d["signs"]), float(d["p"]),
                               float(d.get("eps_tie", EPS_TIE)), opt("tie_weights"),
                               opt("hi_tie_weights"))


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not serializable: {type(x)}")


def schema_hash(columns) -> str:
    return hashlib.sha256(",".join(sorted(columns)).encode()).hexdigest()[:16]


# -- single constraint ----------------------------------------------------------

@dataclass
class SingleSolution:
    k: float
    p: float
    sign: float
    value: float          # achieved constraint (oriented by sign)
    objective: float
    left_value: float
    right_value: float
    curve: ConstraintCurve


def _solve_oriented(psi0, psi1, delta, eps_tie, min_jump, cap) -> SingleSolution:
    curve = constraint_curve(psi0, psi1, eps_tie, cap)
    c0 = curve(0.0)
    if c0 <= delta + FEAS_TOL:
        return SingleSolution(0.0, 0.0, 1.0, c0, curve.objective(0.0), c0, c0, curve)
    bps, vals = curve.breakpoints, curve.values
    ok = np.flatnonzero((bps > 0) & (vals <= delta + FEAS_TOL))
    if ok.size == 0:
        low = float(min(vals.min(initial=np.inf), curve.start_value))
        raise NotFeasible(f"constraint cannot reach {delta:.6g}; minimum achievable {low:.6g}",
                          min_achievable=low)
    j = int(ok[0])
    k_hat = float(bps[j])
    right, left = float(vals[j]), float(curve.left_values[j])
    if not curve.exact:
        # the grid stores the probe at k - eps as the left value
        left = max(left, right)
    jump = left - right
    if jump <= max(min_jump, 0.0) or jump <= 0:
        p = 0.0
    else:
        p = float(np.clip((delta - right) / jump, 0.0, 1.0))
    obj = p * float(curve.left_objectives[j]) + (1 - p) * float(curve.objectives[j])
    return SingleSolution(k_hat, p, 1.0, p * left + (1 - p) * right, obj, left, right, curve)


def solve_single(emb: EmbeddingSet, index: int = 0, eps_tie: float = EPS_TIE,
                 min_jump: float = 0.0, cap: int = BREAKPOINT_CAP) -> DeferralPolicy:
    """Tune ``(k, p)`` for one constraint on the tuning embeddings.

    Picks the smallest multiplier whose conservative predictor is feasible
    and randomizes at its jump so the constraint is met with equality.  A
    jump no larger than ``min_jump`` is not randomized over.  Two-sided
    constraints try the positive orientation first and fall back to the
    negative one if the opposite side is violated.
    """
    con = emb.constraints[index]
    delta = con.delta
    if not np.isfinite(delta):
        delta = np.inf
    psi1 = con.psi
    sol = _solve_oriented(emb.psi0, psi1, delta, eps_tie, min_jump, cap)
    if con.two_sided and -sol.value > delta + FEAS_TOL:
        try:
            neg = _solve_oriented(emb.psi0, -psi1, delta, eps_tie, min_jump, cap)
        except NotFeasible as exc:
            raise NotFeasible(f"two-sided constraint {con.name or con.kind} infeasible: {exc}",
                              min_achievable=exc.min_achievable) from exc
        if -neg.value > delta + FEAS_TOL:
            if sol.k == 0.0 and neg.k == 0.0:
                return _face_mixture(emb, index, con, sol, -neg.value, eps_tie)
            raise NotFeasible(f"both sides of {con.name or con.kind} bind",
                              report={"positive": sol.value, "negative": -neg.value})
        sol = neg
        sol.sign = -1.0
    ks = [0.0] * len(emb.constraints)
    signs = [1.0] * len(emb.constraints)
    ks[index] = sol.k
    signs[index] = sol.sign
    tie_w = [0.0] * len(emb.constraints)
    tie_w[index] = 1.0
    pred = ParametricPredictor(tuple(ks), tuple(signs), sol.p, eps_tie, tuple(tie_w))
    meta = {
        "delta": delta, "achieved": sol.value, "objective": sol.objective,
        "left_value": sol.left_value, "right_value": sol.right_value,
        "constraint_inactive": sol.k == 0.0, "curve_exact": sol.curve.exact,
        "n_breakpoints": int(sol.curve.breakpoints.size),
    }
    return DeferralPolicy(pred, "randomized", (con.kind,), (con.delta,), meta)


def _face_mixture(emb, index, con, sol, high, eps_tie) -> DeferralPolicy:
    """Unconstrained optimum whose tie-breaks straddle ``[-delta, delta]``.

    The smallest-constraint tie-break lands below ``-delta`` and the largest
    above ``delta``; both are unconstrained optima, so mixing them to hit
    zero keeps the objective and satisfies both sides.
    """
    low = sol.value
    p = float(-low / (high - low))
    m = len(emb.constraints)
    tie_w = [0.0] * m
    tie_w[index] = 1.0
    hi_w = [0.0] * m
    hi_w[index] = -1.0
    pred = ParametricPredictor((0.0,) * m, (1.0,) * m, p, eps_tie, tuple(tie_w), tuple(hi_w))
    meta = {
        "delta": con.delta, "achieved": (1 - p) * low + p * high, "objective": sol.objective,
        "left_value": high, "right_value": low, "constraint_inactive": True,
        "curve_exact": sol.curve.exact, "n_breakpoints": int(sol.curve.breakpoints.size),
        "face_mixture": True,
    }
    return DeferralPolicy(pred, "randomized", (con.kind,), (con.delta,), meta)


# -- several constraints --------------------------------------------------------

@dataclass
class GridSpec:
    num: int = 40
    low: float = 1e-3
    high: float = 1e2
    block: int = 16

    def axis(self, two_sided: bool) -> np.ndarray:
        pos = np.logspace(np.log10(self.low), np.log10(self.high), self.num)
        if two_sided:
            return np.concatenate([-pos[::-1], [0.0], pos])
        return np.concatenate([[0.0], pos])


@dataclass
class Frontier:
    """Objective and constraint values at every grid vertex."""

    vertices: np.ndarray      # (V, m) multipliers
    objectives: np.ndarray    # (V,)
    values: np.ndarray        # (V, m)

    def feasible(self, deltas, two_sided) -> np.ndarray:
        deltas = np.asarray(deltas, dtype=float)
        v = np.where(np.asarray(two_sided), np.abs(self.values), self.values)
        return np.all(v <= deltas + FEAS_TOL, axis=1)


def evaluate_grid(emb: EmbeddingSet, grid: GridSpec | None = None) -> Frontier:
    """Deterministic predictors at every vertex of the multiplier grid."""
    grid = grid or GridSpec()
    axes = [grid.axis(c.two_sided) for c in emb.constraints]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
    n, d = emb.psi0.shape
    # per-option columns as contiguous (m, n) / (n,) arrays
    cols = [np.stack([c.psi[:, i] for c in emb.constraints]) for i in range(d)]
    base = [np.ascontiguousarray(emb.psi0[:, i]) for i in range(d)]
    flat0 = emb.psi0.ravel()
    flats = [c.psi.ravel() for c in emb.constraints]
    offset = np.arange(n) * d
    objs = np.empty(len(mesh))
    vals = np.empty((len(mesh), len(axes)))
    for start in range(0, len(mesh), grid.block):
        K = mesh[start:start + grid.block]                             # (b, m)
        tie = [K @ cols[i] for i in range(d)]                          # d x (b, n)
        score = [base[i] - tie[i] for i in range(d)]
        top = np.maximum.reduce(score)
        mag = np.maximum(np.abs(top), np.abs(np.minimum.reduce(score)))
        floor = top - EPS_TIE * (1.0 + mag)
        best = np.where(score[0] >= floor, tie[0], np.inf)
        sel = np.zeros(top.shape, dtype=np.intp)
        for i in range(1, d):
            cand = np.where(score[i] >= floor, tie[i], np.inf)
            better = cand < best
            best = np.where(better, cand, best)
            sel[better] = i
        idx = sel + offset
        objs[start:start + len(K)] = flat0[idx].mean(axis=1)
        for j, f in enumerate(flats):
            vals[start:start + len(K), j] = f[idx].mean(axis=1)
    return Frontier(mesh, objs, vals)


def _grid_policy(emb, frontier, feas, deltas) -> DeferralPolicy:
    idx = np.flatnonzero(feas)
    best = int(idx[np.argmax(frontier.objectives[idx])])
    k = frontier.vertices[best]
    m = len(emb.constraints)
    pred = ParametricPredictor(tuple(float(x) for x in k), (1.0,) * m, 0.0, EPS_TIE)
    meta = {
        "method": "grid", "deltas": list(deltas), "achieved": frontier.values[best].tolist(),
        "objective": float(frontier.objectives[best]), "vertex": best,
        "n_vertices": int(len(frontier.vertices)), "n_feasible": int(feas.sum()),
    }
    return DeferralPolicy(pred, "randomized", tuple(c.kind for c in emb.constraints),
                          tuple(deltas), meta)


def _master_rows(emb, deltas):
    """Inequality rows ``sign * value_j <= delta_j`` of the mixture problem."""
    rows = []
    for j, (c, delta) in enumerate(zip(emb.constraints, deltas)):
        rows.append((j, 1.0, delta))
        if c.two_sided:
            rows.append((j, -1.0, delta))
    return rows


def _solve_master(objs, vals, rows):
    C = len(objs)
    A_ub = np.array([[s * vals[t][j] for t in range(C)] for j, s, _ in rows])
    b_ub = np.array([delta for _, _, delta in rows])
    return solve_inequality_lp(np.asarray(objs), A_ub, b_ub, np.ones((1, C)), np.ones(1))


def _pricing_candidates(k, m, eps_tie):
    """Argmax predictors at ``k`` under several tie-breaking rules."""
    k = tuple(float(x) for x in k)
    ones = (1.0,) * m
    cands = [ParametricPredictor(k, ones, 0.0, eps_tie),
             ParametricPredictor(k, ones, 1.0, eps_tie)]
    for j in range(m):
        for s in (1.0, -1.0):
            w = [0.0] * m
            w[j] = s
            cands.append(ParametricPredictor(k, ones, 0.0, eps_tie, tuple(w)))
    return cands


def solve_multi(emb: EmbeddingSet, grid: GridSpec | None = None,
                frontier: Frontier | None = None, deltas=None, method: str = "mixture",
                max_iter: int = 100, eps_tie: float = EPS_TIE) -> DeferralPolicy:
    """Several constraints at once.

    Every vertex of the multiplier grid is evaluated as a deterministic
    predictor (the frontier).  ``method="grid"`` returns the best feasible
    vertex.  ``method="mixture"`` (default) also prices new argmax
    predictors at the multipliers given by the duals of the restricted
    mixture problem, with several tie-breaking rules, until no predictor
    improves it.  The result mixes a handful of predictors at nearby
    multipliers.  This is the randomized tie-breaking that equality-type
    constraints need when a whole group becomes indifferent at the optimal
    multipliers.

    ``frontier`` may be passed to reuse a grid evaluation across tolerance
    settings; ``deltas`` then overrides the constraint tolerances.
    """
    if frontier is None:
        frontier = evaluate_grid(emb, grid)
    two = [c.two_sided for c in emb.constraints]
    deltas = [c.delta for c in emb.constraints] if deltas is None else list(deltas)
    feas = frontier.feasible(deltas, two)
    if method == "grid":
        if not feas.any():
            raise NotFeasible("no feasible grid vertex", report=_violation_report(emb, frontier, deltas))
        return _grid_policy(emb, frontier, feas, deltas)
    if method != "mixture":
        raise ValueError(f"unknown method {method!r}")
    m = len(emb.constraints)
    rows = _master_rows(emb, deltas)
    preds = [ParametricPredictor(tuple(float(x) for x in k), (1.0,) * m, 0.0, eps_tie)
             for k in frontier.vertices]
    objs = list(frontier.objectives)
    vals = [list(v) for v in frontier.values]
    converged = False
    sol = None
    for it in range(max_iter):
        sol = _solve_master(objs, vals, rows)
        if not sol.feasible:
            raise NotFeasible("no mixture of evaluated predictors is feasible",
                              report=_violation_report(emb, frontier, deltas))
        y = sol.duals
        y_rows, y0 = y[:len(rows)], y[len(rows)]
        k = np.zeros(m)
        for (j, s, _), yr in zip(rows, y_rows):
            k[j] += s * yr
        added = 0
        for pred in _pricing_candidates(k, m, eps_tie):
            obj, cons = emb.values(pred.masses(emb))
            rc = obj - sum(yr * s * cons[j] for (j, s, _), yr in zip(rows, y_rows)) - y0
            if rc > 1e-12 * (1.0 + abs(obj)):
                preds.append(pred)
                objs.append(obj)
                vals.append(list(cons))
                added += 1
        if added == 0:
            converged = True
            break
    lam = np.clip(sol.x, 0.0, None)
    used = np.flatnonzero(lam > 1e-12)
    weights = lam[used] / lam[used].sum()
    comps = tuple((float(w), preds[t]) for w, t in zip(weights, used))
    heaviest = comps[int(np.argmax(weights))][1]
    policy = DeferralPolicy(heaviest, "randomized", tuple(c.kind for c in emb.constraints),
                            tuple(deltas), {}, comps)
    obj, cons = emb.values(policy.masses(emb))
    policy.metadata = {
        "method": "mixture", "deltas": list(deltas), "achieved": cons.tolist(),
        "objective": obj, "iterations": it + 1, "converged": converged,
        "n_components": len(comps), "n_vertices": int(len(frontier.vertices)),
        "n_feasible_vertices": int(feas.sum()),
        "best_vertex_objective": float(frontier.objectives[feas].max()) if feas.any() else None,
    }
    return policy


def _violation_report(emb, frontier, deltas):
    two = [c.two_sided for c in emb.constraints]
    v = np.where(two, np.abs(frontier.values), frontier.values) - np.asarray(deltas)
    return {c.name or c.kind: float(v[:, i].min()) for i, c in enumerate(emb.constraints)}


def solve(emb: EmbeddingSet, **kwargs) -> DeferralPolicy:
    """Unconstrained, single-constraint or grid solve depending on ``emb``."""
    m = len(emb.constraints)
    if m == 0:
        pred = ParametricPredictor((), (), 0.0, kwargs.get("eps_tie", EPS_TIE))
        m0 = pred.masses(emb)
        obj, _ = emb.values(m0)
        return DeferralPolicy(pred, "randomized", (), (), {"objective": obj})
    if m == 1:
        return solve_single(emb, 0, **{k: v for k, v in kwargs.items()
                                       if k in ("eps_tie", "min_jump", "cap")})
    return solve_multi(emb, kwargs.get("grid"), method=kwargs.get("method", "mixture"))


# -- decisions ------------------------------------------------------------------

def deterministic_rule(score: np.ndarray):
    """``h = argmax`` of class coordinates, defer iff the defer score is larger."""
    score = np.atleast_2d(score)
    L = score.shape[1] - 1
    h = np.argmax(score[:, :L], axis=1)
    r = score[:, L] > score[np.arange(score.shape[0]), h]
    return h, r


def decide_deterministic(policy: DeferralPolicy, emb: EmbeddingSet):
    """Classifier/rejector pair read off the predictor's score vector."""
    h, r = deterministic_rule(policy.predictor.scores(emb))
    return DecisionBatch(r, h)


def sample_from_masses(masses: np.ndarray, psi0: np.ndarray, rng):
    """Defer with probability ``f_d``, else draw a class from the renormalized rest."""
    masses = np.atleast_2d(masses)
    n, d = masses.shape
    L = d - 1
    u = rng.random(n)
    defer = u < masses[:, L]
    cls_mass = masses[:, :L].sum(axis=1)
    pred = np.empty(n, dtype=int)
    degenerate = cls_mass <= 0
    pred[degenerate] = np.argmax(np.atleast_2d(psi0)[degenerate, :L], axis=1)
    ok = ~degenerate
    if ok.any():
        cdf = np.cumsum(masses[ok, :L], axis=1) / cls_mass[ok, None]
        v = rng.random(int(ok.sum()))
        pred[ok] = np.minimum((v[:, None] > cdf).sum(axis=1), L - 1)
    return DecisionBatch(defer, pred)


def decide(policy: DeferralPolicy, emb: EmbeddingSet, seed=None):
    """Sampled decisions from the randomized policy."""
    rng = np.random.default_rng(seed)
    return sample_from_masses(policy.masses(emb), emb.psi0, rng)


def decide_one(masses_row, psi0_row, seed=None) -> DeferralDecision:
    batch = sample_from_masses(np.asarray(masses_row)[None], np.asarray(psi0_row)[None],
                               np.random.default_rng(seed))
    return DeferralDecision(bool(batch.deferred[0]), int(batch.predicted[0]))
