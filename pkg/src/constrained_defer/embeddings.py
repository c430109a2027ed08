"""Embedding vectors that turn losses and constraints into inner products.

Every vector has length ``d = L + 1``; the last coordinate is the defer
option.  For a randomized policy ``f(x)`` on the simplex, ``<f(x), psi(x)>`` is
the conditional expectation of the corresponding loss or constraint term, so
the empirical mean over a dataset estimates the population quantity.

Constraints are oriented so that ``mean <f, psi> <= delta`` is the feasible
side.  Two-sided constraints (``|mean <f, psi>| <= delta``) carry a flag and
are resolved by the solver.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scores import ScoreTable

KINDS = ("budget", "dp", "eopp", "eodds", "typek", "ood", "longtail")
TWO_SIDED = {"budget": False, "dp": True, "eopp": True, "eodds": True,
             "typek": False, "ood": False, "longtail": True}
EPS_EQ = 0.01
MIN_CLASS_MARGINAL = 1e-9


@dataclass(frozen=True)
class ConstraintSpec:
    """User-facing constraint request: ``{kind, delta, params...}``."""

    kind: str
    delta: float
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown constraint kind {self.kind!r}; expected one of {KINDS}")
        if not np.isfinite(self.delta) and self.delta != np.inf:
            raise ValueError("delta must be finite or +inf")

    @classmethod
    def from_dict(cls, d: dict) -> "ConstraintSpec":
        d = dict(d)
        kind = d.pop("kind")
        delta = float(d.pop("delta", EPS_EQ if kind == "longtail" else np.nan))
        if np.isnan(delta):
            raise ValueError(f"constraint {kind!r} needs a delta")
        params = d.pop("params", {}) or {}
        params.update(d)
        return cls(kind, delta, params)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "delta": self.delta, **self.params}


@dataclass(frozen=True)
class Constraint:
    psi: np.ndarray          # (n, d)
    delta: float
    kind: str
    two_sided: bool
    name: str = ""


@dataclass(frozen=True)
class EmbeddingSet:
    psi0: np.ndarray                       # (n, d), reward to maximize
    constraints: tuple[Constraint, ...] = ()

    def __post_init__(self):
        psi0 = np.asarray(self.psi0, dtype=float)
        if psi0.ndim != 2:
            raise ValueError("psi0 must be (n, d)")
        for c in self.constraints:
            if c.psi.shape != psi0.shape:
                raise ValueError(f"constraint {c.name or c.kind} has shape {c.psi.shape}, "
                                 f"expected {psi0.shape}")
        arrays = [psi0] + [c.psi for c in self.constraints]
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise ValueError("embeddings must be finite")
        object.__setattr__(self, "psi0", psi0)
        object.__setattr__(self, "constraints", tuple(self.constraints))

    @property
    def n(self) -> int:
        return self.psi0.shape[0]

    @property
    def d(self) -> int:
        return self.psi0.shape[1]

    def subset(self, index) -> "EmbeddingSet":
        return EmbeddingSet(
            self.psi0[index],
            tuple(Constraint(c.psi[index], c.delta, c.kind, c.two_sided, c.name)
                  for c in self.constraints),
        )

    def magnitude(self) -> float:
        """Largest absolute entry over all embeddings."""
        return max(float(np.abs(a).max(initial=0.0))
                   for a in [self.psi0] + [c.psi for c in self.constraints])

    def values(self, masses: np.ndarray) -> tuple[float, np.ndarray]:
        """Empirical objective and constraint values of per-instance masses."""
        obj = float(np.mean(np.sum(masses * self.psi0, axis=1)))
        cons = np.array([np.mean(np.sum(masses * c.psi, axis=1)) for c in self.constraints])
        return obj, cons


@dataclass(frozen=True)
class GroupCoefficients:
    """Signed inverse-marginal weights for two-group rate differences.

    ``s_of_a[a]`` reweights by ``Pr(A=a)`` and ``t_of_ay[a, y]`` by
    ``Pr(Y=y, A=a)``; group 1 is positive, group 0 negative.
    """

    s_of_a: np.ndarray
    t_of_ay: np.ndarray

    @classmethod
    def from_marginals(cls, marginals) -> "GroupCoefficients":
        p_a = marginals.p_a
        p_ya = marginals.p_ya
        if p_a.shape[0] != 2:
            raise ValueError("group coefficients need exactly two groups")
        if np.any(p_a <= 0):
            raise ValueError(f"empty group: Pr(A)={p_a.tolist()}")
        s = np.array([-1.0 / p_a[0], 1.0 / p_a[1]])
        L = p_ya.shape[0]
        t = np.full((2, L), np.nan)
        for y in range(L):
            for a, sign in ((0, -1.0), (1, 1.0)):
                if p_ya[y, a] > 0:
                    t[a, y] = sign / p_ya[y, a]
        return cls(s, t)

    def t(self, y: int) -> np.ndarray:
        col = self.t_of_ay[:, y]
        if np.any(np.isnan(col)):
            a = int(np.flatnonzero(np.isnan(col))[0])
            raise ValueError(f"empty (label, group) cell: label={y}, group={a}")
        return col


def _binary_groups(scores: ScoreTable):
    if scores.num_classes != 2:
        raise ValueError("fairness embeddings need a binary label")
    g = scores.group
    if g.size and (g.min() < 0 or g.max() > 1):
        raise ValueError("fairness embeddings need groups coded 0/1")
    return g


def accuracy_embedding(scores: ScoreTable) -> np.ndarray:
    """``[Pr(Y=0|x), ..., Pr(Y=L-1|x), Pr(Y=M|x)]``."""
    return np.column_stack([scores.p_y, scores.p_agree])


def budget_embedding(L: int, n: int = 1) -> np.ndarray:
    """Constant ``[0, ..., 0, 1]``; its mean is the deferral rate."""
    psi = np.zeros((n, L + 1))
    psi[:, L] = 1.0
    return psi


def ood_embedding(scores: ScoreTable) -> np.ndarray:
    """Density ratio on every class slot, zero on defer.

    The mean is ``E_in[ratio * (1 - r)]``, the out-of-distribution mass on
    which the classifier answers.
    """
    ratio = scores.require("density_ratio")
    psi = np.repeat(ratio[:, None], scores.num_classes + 1, axis=1)
    psi[:, -1] = 0.0
    return psi


def _class_marginals(scores: ScoreTable) -> np.ndarray:
    return scores.marginals.p_y


def typek_embedding(scores: ScoreTable, k: int, p_k: float | None = None) -> np.ndarray:
    """Embedding of ``Pr(Yhat != k | Y = k)``."""
    L = scores.num_classes
    if not 0 <= k < L:
        raise ValueError(f"class {k} out of range")
    p_k = float(_class_marginals(scores)[k]) if p_k is None else float(p_k)
    if p_k < MIN_CLASS_MARGINAL:
        raise ValueError(f"Pr(Y={k}) = {p_k} is too small")
    psi = np.repeat(scores.p_y[:, [k]], L + 1, axis=1)
    psi[:, k] = 0.0
    psi[:, L] = scores.require(f"p_mneq_y_{k}")
    return psi / p_k


def dp_embedding(scores: ScoreTable, coeffs: GroupCoefficients) -> np.ndarray:
    """Signed demographic-parity gap ``Pr(Yhat=1|A=1) - Pr(Yhat=1|A=0)``."""
    g = _binary_groups(scores)
    s = coeffs.s_of_a[g]
    base = np.column_stack([np.zeros(scores.n), np.ones(scores.n), scores.require("p_m1")])
    return s[:, None] * base


def eopp_embedding(scores: ScoreTable, coeffs: GroupCoefficients) -> np.ndarray:
    """Signed true-positive-rate gap between groups."""
    g = _binary_groups(scores)
    t = coeffs.t(1)[g]
    base = np.column_stack([np.zeros(scores.n), scores.p_y[:, 1], scores.require("p_m1_y1")])
    return t[:, None] * base


def eodds_embeddings(scores: ScoreTable, coeffs: GroupCoefficients):
    """True-positive-rate gap and false-positive-rate gap embeddings.

    The second row weights ``Pr(Yhat=1, Y=0 | x)``; its defer slot is
    ``Pr(M=1, Y=0|x) = Pr(Y=0|x) - Pr(M=0, Y=0|x)``.
    """
    g = _binary_groups(scores)
    t0 = coeffs.t(0)[g]
    p_y0 = scores.p_y[:, 0]
    neg = np.column_stack([np.zeros(scores.n), p_y0, p_y0 - scores.require("p_m0_y0")])
    return eopp_embedding(scores, coeffs), t0[:, None] * neg


def longtail_embeddings(scores: ScoreTable, partition, alphas):
    """Balanced-error objective and per-group coverage equality rows.

    Returns ``(psi0, rows)`` where ``psi0`` replaces the accuracy reward and
    each row, averaged, is ``Pr(no defer, Y in G_i) / Pr(Y in G_i) - alpha_i / K``.
    """
    L = scores.num_classes
    partition = [sorted(set(int(c) for c in grp)) for grp in partition]
    alphas = np.asarray(alphas, dtype=float)
    K = len(partition)
    if len(alphas) != K:
        raise ValueError("one alpha per group required")
    if np.any(alphas <= 0):
        raise ValueError("alphas must be positive")
    flat = sorted(c for grp in partition for c in grp)
    if flat != list(range(L)):
        raise ValueError("partition must cover every class exactly once")
    if any(len(grp) == 0 for grp in partition):
        raise ValueError("empty class group in partition")
    marg = _class_marginals(scores)
    psi0 = np.zeros((scores.n, L + 1))
    rows = []
    for grp, alpha in zip(partition, alphas):
        p_G = float(marg[grp].sum())
        if p_G <= 0:
            raise ValueError(f"class group {grp} has zero marginal")
        p_Gx = scores.p_y[:, grp].sum(axis=1)
        # Pr(Y != l, Y in G | x)
        miss = np.repeat(p_Gx[:, None], L, axis=1)
        miss[:, grp] -= scores.p_y[:, grp]
        psi0[:, :L] -= miss / (alpha * p_G)
        row = np.zeros((scores.n, L + 1))
        row[:, :L] = (p_Gx / p_G)[:, None]
        rows.append(row - alpha / K)
    return psi0, rows


def build_embeddings(scores: ScoreTable, specs) -> EmbeddingSet:
    """Assemble the objective and all requested constraint embeddings."""
    specs = [s if isinstance(s, ConstraintSpec) else ConstraintSpec.from_dict(s) for s in specs]
    L = scores.num_classes
    psi0 = accuracy_embedding(scores)
    coeffs = None
    out: list[Constraint] = []

    def group_coeffs():
        nonlocal coeffs
        if coeffs is None:
            coeffs = GroupCoefficients.from_marginals(scores.marginals)
        return coeffs

    for spec in specs:
        kind, delta = spec.kind, spec.delta
        two = TWO_SIDED[kind]
        if kind == "budget":
            out.append(Constraint(budget_embedding(L, scores.n), delta, kind, two, "budget"))
        elif kind == "ood":
            out.append(Constraint(ood_embedding(scores), delta, kind, two, "ood"))
        elif kind == "typek":
            k = int(spec.params.get("k", 0))
            out.append(Constraint(typek_embedding(scores, k), delta, kind, two, f"typek_{k}"))
        elif kind == "dp":
            out.append(Constraint(dp_embedding(scores, group_coeffs()), delta, kind, two, "dp"))
        elif kind == "eopp":
            out.append(Constraint(eopp_embedding(scores, group_coeffs()), delta, kind, two, "eopp"))
        elif kind == "eodds":
            pos, neg = eodds_embeddings(scores, group_coeffs())
            out.append(Constraint(pos, delta, kind, two, "eodds_tpr"))
            out.append(Constraint(neg, delta, kind, two, "eodds_fpr"))
        elif kind == "longtail":
            partition = spec.params.get("partition", [[c] for c in range(L)])
            alphas = spec.params.get("alphas", [1.0] * len(partition))
            psi0, rows = longtail_embeddings(scores, partition, alphas)
            for i, row in enumerate(rows):
                out.append(Constraint(row, delta, kind, two, f"longtail_{i}"))
    return EmbeddingSet(psi0, tuple(out))


def required_columns(specs, num_classes: int = 2) -> tuple[str, ...]:
    """Score columns needed by the given constraint specs."""
    cols = ["p_agree"] + [f"p_y_{j}" for j in range(num_classes)]
    for spec in specs:
        spec = spec if isinstance(spec, ConstraintSpec) else ConstraintSpec.from_dict(spec)
        if spec.kind == "dp":
            cols.append("p_m1")
        elif spec.kind == "eopp":
            cols.append("p_m1_y1")
        elif spec.kind == "eodds":
            cols += ["p_m1_y1", "p_m0_y0"]
        elif spec.kind == "typek":
            cols.append(f"p_mneq_y_{int(spec.params.get('k', 0))}")
        elif spec.kind == "ood":
            cols.append("density_ratio")
    return tuple(dict.fromkeys(cols))
