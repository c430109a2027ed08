"""Per-instance probability scores and the simple estimators that produce them."""
from __future__ import annotations

import json
import warnings
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .core import LabeledDataset

EPS_P = 1e-6
RANGE_TOL = 1e-9
SUM_TOL = 1e-6


class MissingScoreError(KeyError):
    """A score column needed by a requested constraint is absent."""

    def __str__(self):
        return str(self.args[0])


@dataclass(frozen=True)
class Marginals:
    """Plug-in marginals ``Pr(A=a)`` and ``Pr(Y=y, A=a)`` (indexed ``[y, a]``)."""

    p_a: np.ndarray
    p_ya: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p_a", np.asarray(self.p_a, dtype=float))
        object.__setattr__(self, "p_ya", np.atleast_2d(np.asarray(self.p_ya, dtype=float)))

    @property
    def p_y(self) -> np.ndarray:
        return self.p_ya.sum(axis=1)

    @classmethod
    def from_dataset(cls, ds: LabeledDataset, num_groups: int | None = None) -> "Marginals":
        G = num_groups or max(ds.num_groups, 1)
        p_a = np.bincount(ds.group, minlength=G)[:G] / ds.n
        p_ya = np.zeros((ds.num_classes, G))
        np.add.at(p_ya, (ds.label, ds.group), 1.0)
        return cls(p_a, p_ya / ds.n)

    @classmethod
    def from_scores(cls, table: "ScoreTable", num_groups: int | None = None) -> "Marginals":
        """``Pr(Y=y, A=a)`` as the mean of ``1{A=a} Pr(Y=y|x)`` over the table's rows.

        Computed on the tuning rows this turns each group-conditional
        constraint into a ratio estimate with a shared denominator, which is
        far less noisy than dividing by a fixed marginal.
        """
        g = np.asarray(table.group)
        G = num_groups or (int(g.max()) + 1 if g.size else 1)
        n = table.n
        p_a = np.bincount(g, minlength=G)[:G] / n
        p_ya = np.zeros((table.num_classes, G))
        for a in range(G):
            p_ya[:, a] = table.p_y[g == a].sum(axis=0) / n
        return cls(p_a, p_ya)

    def require_cell(self, y: int, a: int) -> float:
        v = float(self.p_ya[y, a])
        if v <= 0:
            raise ValueError(f"empty (label, group) cell: label={y}, group={a}")
        return v

    def to_json(self) -> dict:
        return {"p_a": self.p_a.tolist(), "p_ya": self.p_ya.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "Marginals":
        return cls(d["p_a"], d["p_ya"])


def _prob(name, values, n):
    arr = np.asarray(values, dtype=float)
    if arr.shape[0] != n:
        raise ValueError(f"{name}: expected {n} rows, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite values")
    if arr.min() < -RANGE_TOL or arr.max() > 1 + RANGE_TOL:
        raise ValueError(f"{name}: probability outside [0, 1]")
    return np.clip(arr, EPS_P, 1 - EPS_P)


@dataclass(frozen=True)
class ScoreTable:
    """Estimated conditionals per instance plus group marginals.

    Optional columns are ``None`` when not estimated; ``p_mneq_y`` maps a
    class ``k`` to ``Pr(M != k, Y = k | x)``.
    """

    p_y: np.ndarray
    p_agree: np.ndarray
    group: np.ndarray
    marginals: Marginals
    p_m1: np.ndarray | None = None
    p_m1_y1: np.ndarray | None = None
    p_m0_y0: np.ndarray | None = None
    p_mneq_y: dict[int, np.ndarray] = field(default_factory=dict)
    density_ratio: np.ndarray | None = None

    @classmethod
    def create(cls, p_y, p_agree, group, marginals, *, p_m1=None, p_m1_y1=None,
               p_m0_y0=None, p_mneq_y=None, density_ratio=None) -> "ScoreTable":
        """Validate raw probabilities and clip them to ``[EPS_P, 1 - EPS_P]``."""
        p_y = np.atleast_2d(np.asarray(p_y, dtype=float))
        n = p_y.shape[0]
        if np.any(np.abs(p_y.sum(axis=1) - 1) > SUM_TOL):
            raise ValueError("p_y rows must sum to 1")
        opt = {}
        for name, val in (("p_m1", p_m1), ("p_m1_y1", p_m1_y1), ("p_m0_y0", p_m0_y0)):
            opt[name] = None if val is None else _prob(name, val, n)
        mneq = {int(k): _prob(f"p_mneq_y_{k}", v, n) for k, v in (p_mneq_y or {}).items()}
        if density_ratio is not None:
            density_ratio = np.asarray(density_ratio, dtype=float)
            if density_ratio.shape != (n,) or np.any(density_ratio < 0) or \
                    not np.all(np.isfinite(density_ratio)):
                raise ValueError("density_ratio must be finite and non-negative")
        group = np.asarray(group, dtype=int)
        if group.shape != (n,):
            raise ValueError("group must have one entry per row")
        return cls(
            p_y=_prob("p_y", p_y, n), p_agree=_prob("p_agree", p_agree, n),
            group=group, marginals=marginals, p_mneq_y=mneq,
            density_ratio=density_ratio, **opt,
        )

    @property
    def n(self) -> int:
        return self.p_y.shape[0]

    @property
    def num_classes(self) -> int:
        return self.p_y.shape[1]

    def require(self, name: str) -> np.ndarray:
        if name.startswith("p_mneq_y_"):
            k = int(name.rsplit("_", 1)[1])
            if k not in self.p_mneq_y:
                raise MissingScoreError(f"missing score column {name!r}")
            return self.p_mneq_y[k]
        val = getattr(self, name, None)
        if val is None:
            raise MissingScoreError(f"missing score column {name!r}")
        return val

    def subset(self, index) -> "ScoreTable":
        def take(v):
            return None if v is None else v[index]
        return ScoreTable(
            p_y=self.p_y[index], p_agree=self.p_agree[index], group=self.group[index],
            marginals=self.marginals, p_m1=take(self.p_m1), p_m1_y1=take(self.p_m1_y1),
            p_m0_y0=take(self.p_m0_y0),
            p_mneq_y={k: v[index] for k, v in self.p_mneq_y.items()},
            density_ratio=take(self.density_ratio),
        )

    def with_marginals(self, marginals: Marginals) -> "ScoreTable":
        return dataclasses.replace(self, marginals=marginals)

    def mix(self, other: "ScoreTable", w: float) -> "ScoreTable":
        """Pointwise convex combination ``w * self + (1 - w) * other``."""
        def comb(a, b):
            if a is None or b is None:
                return None
            return w * a + (1 - w) * b
        return ScoreTable(
            p_y=comb(self.p_y, other.p_y), p_agree=comb(self.p_agree, other.p_agree),
            group=self.group, marginals=self.marginals,
            p_m1=comb(self.p_m1, other.p_m1), p_m1_y1=comb(self.p_m1_y1, other.p_m1_y1),
            p_m0_y0=comb(self.p_m0_y0, other.p_m0_y0),
            p_mneq_y={k: comb(v, other.p_mneq_y[k]) for k, v in self.p_mneq_y.items()
                      if k in other.p_mneq_y},
            density_ratio=comb(self.density_ratio, other.density_ratio),
        )

    # -- CSV ------------------------------------------------------------------
    def to_frame(self) -> pd.DataFrame:
        cols = {f"p_y_{j}": self.p_y[:, j] for j in range(self.num_classes)}
        cols["p_agree"] = self.p_agree
        for name in ("p_m1", "p_m1_y1", "p_m0_y0"):
            if getattr(self, name) is not None:
                cols[name] = getattr(self, name)
        for k in sorted(self.p_mneq_y):
            cols[f"p_mneq_y_{k}"] = self.p_mneq_y[k]
        if self.density_ratio is not None:
            cols["density_ratio"] = self.density_ratio
        return pd.DataFrame(cols)


def marginals_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".marginals.json")


def emit_scores(table: ScoreTable, path) -> None:
    """Write the score CSV and its marginals sidecar next to it."""
    table.to_frame().to_csv(path, index=False, float_format="%.17g")
    marginals_path(path).write_text(json.dumps(table.marginals.to_json(), indent=2))


def ingest_scores(path, group, marginals: Marginals | None = None,
                  required: tuple[str, ...] = ()) -> ScoreTable:
    """Read a score CSV, validate it against ``required`` columns and clip it.

    ``group`` comes from the dataset the scores will be joined to, so its
    length fixes the expected row count.
    """
    df = pd.read_csv(path, float_precision="round_trip")
    group = np.asarray(group, dtype=int)
    if len(df) != group.shape[0]:
        raise ValueError(f"score file has {len(df)} rows, dataset has {group.shape[0]}")
    for col in required:
        if col not in df.columns:
            raise MissingScoreError(f"missing score column {col!r}")
    py_cols = sorted((c for c in df.columns if c.startswith("p_y_")),
                     key=lambda c: int(c.rsplit("_", 1)[1]))
    if not py_cols:
        raise MissingScoreError("missing score column 'p_y_0'")
    if "p_agree" not in df.columns:
        raise MissingScoreError("missing score column 'p_agree'")
    if marginals is None:
        side = marginals_path(path)
        if not side.exists():
            raise FileNotFoundError(f"marginals sidecar not found: {side}")
        marginals = Marginals.from_json(json.loads(side.read_text()))

    def col(name):
        return df[name].to_numpy(float) if name in df.columns else None

    mneq = {int(c.rsplit("_", 1)[1]): df[c].to_numpy(float)
            for c in df.columns if c.startswith("p_mneq_y_")}
    return ScoreTable.create(
        df[py_cols].to_numpy(float), col("p_agree"), group, marginals,
        p_m1=col("p_m1"), p_m1_y1=col("p_m1_y1"), p_m0_y0=col("p_m0_y0"),
        p_mneq_y=mneq, density_ratio=col("density_ratio"),
    )


# -- estimators -----------------------------------------------------------------

@dataclass
class ScoreConfig:
    basis: str = "poly"            # "linear" | "poly" | "onehot"
    learning_rate: float | None = None
    tol: float = 1e-6
    max_iter: int = 3000
    l2: float = 0.0
    typek_classes: tuple[int, ...] | None = None
    # one softmax over the (label, expert) cells instead of separate targets
    joint: bool = False


class FeatureBasis:
    """Maps raw features plus group to a design matrix."""

    def __init__(self, kind: str = "poly"):
        if kind not in ("linear", "poly", "onehot"):
            raise ValueError(f"unknown basis {kind!r}")
        self.kind = kind

    def fit(self, features, group):
        self.num_groups = int(group.max()) + 1
        if self.kind == "onehot":
            keys = self._keys(features, group)
            self.cells = {k: i for i, k in enumerate(dict.fromkeys(keys))}
            return self
        raw = self._raw(features, group)
        self.mean = raw.mean(axis=0)
        self.std = raw.std(axis=0)
        self.std[self.std == 0] = 1.0
        return self

    @staticmethod
    def _keys(features, group):
        return [tuple(r) + (g,) for r, g in zip(features.tolist(), group.tolist())]

    def _raw(self, features, group):
        G = np.eye(self.num_groups)[np.clip(group, 0, self.num_groups - 1)][:, 1:]
        cols = [features, G]
        if self.kind == "poly":
            iu = np.triu_indices(features.shape[1])
            cols.append(features[:, iu[0]] * features[:, iu[1]])
            cols.extend(features * G[:, [g]] for g in range(G.shape[1]))
        return np.hstack(cols)

    def transform(self, features, group):
        if self.kind == "onehot":
            Z = np.zeros((features.shape[0], len(self.cells)))
            for i, key in enumerate(self._keys(features, group)):
                if key not in self.cells:
                    raise ValueError(f"unseen feature cell {key}")
                Z[i, self.cells[key]] = 1.0
            return Z
        Z = (self._raw(features, group) - self.mean) / self.std
        return np.hstack([np.ones((Z.shape[0], 1)), Z])


@dataclass
class SoftmaxRegression:
    """Multinomial logistic regression by accelerated full-batch gradient descent."""

    num_classes: int
    learning_rate: float | None = None
    tol: float = 1e-6
    max_iter: int = 3000
    l2: float = 0.0
    converged: bool = False
    n_iter: int = 0

    def fit(self, Z: np.ndarray, y: np.ndarray) -> "SoftmaxRegression":
        n, p = Z.shape
        K = self.num_classes
        Y = np.eye(K)[y]
        lr = self.learning_rate
        if lr is None:
            # softmax cross-entropy is (lambda_max(Z'Z)/n / 2)-smooth
            lr = 1.0 / (0.5 * np.linalg.norm(Z, 2) ** 2 / n + self.l2)
        W = np.zeros((p, K))
        V = W.copy()
        t = 1.0
        for it in range(1, self.max_iter + 1):
            grad = Z.T @ (softmax(Z @ V) - Y) / n + self.l2 * V
            if np.max(np.abs(grad)) < self.tol:
                self.converged = True
                W = V
                break
            W_next = V - lr * grad
            t_next = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
            V = W_next + ((t - 1) / t_next) * (W_next - W)
            W, t = W_next, t_next
        self.n_iter = it
        self.coef_ = W
        return self

    def predict_proba(self, Z: np.ndarray) -> np.ndarray:
        return softmax(Z @ self.coef_)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class ScoreModel:
    """Fitted estimators mapping records to :class:`ScoreTable` rows."""

    basis: FeatureBasis
    models: dict[str, SoftmaxRegression]
    marginals: Marginals
    num_classes: int
    metadata: dict = field(default_factory=dict)

    def predict(self, ds: LabeledDataset, density_ratio=None) -> ScoreTable:
        Z = self.basis.transform(np.asarray(ds.features), np.asarray(ds.group))
        if "joint" in self.models:
            return self._predict_joint(Z, ds.group, density_ratio)
        p_y = self.models["y"].predict_proba(Z)

        def binary(name):
            m = self.models.get(name)
            return None if m is None else m.predict_proba(Z)[:, 1]

        mneq = {int(name.rsplit("_", 1)[1]): binary(name)
                for name in self.models if name.startswith("mneq_")}
        return ScoreTable.create(
            p_y, binary("agree"), ds.group, self.marginals,
            p_m1=binary("m1"), p_m1_y1=binary("m1_y1"), p_m0_y0=binary("m0_y0"),
            p_mneq_y=mneq, density_ratio=density_ratio,
        )


    def _predict_joint(self, Z, group, density_ratio) -> ScoreTable:
        L = self.num_classes
        cells = self.models["joint"].predict_proba(Z).reshape(-1, L, L)   # [x, y, m]
        p_y = cells.sum(axis=2)
        diag = cells[:, np.arange(L), np.arange(L)]
        extra = {}
        if L == 2:
            extra = dict(p_m1=cells[:, :, 1].sum(axis=1), p_m1_y1=cells[:, 1, 1],
                         p_m0_y0=cells[:, 0, 0])
        ks = self.metadata.get("typek_classes", range(L))
        return ScoreTable.create(
            p_y, diag.sum(axis=1), group, self.marginals,
            p_mneq_y={k: p_y[:, k] - diag[:, k] for k in ks}, density_ratio=density_ratio,
            **extra,
        )


def fit_scores(train: LabeledDataset, config: ScoreConfig | None = None,
               num_groups: int | None = None) -> ScoreModel:
    """Fit the label model, the expert-derived binary models and the marginals.

    Joint events such as ``{M=1, Y=1}`` are fitted directly as binary targets.
    Non-convergence is recorded in ``metadata`` and raised as a warning.
    """
    config = config or ScoreConfig()
    if train.n == 0:
        raise ValueError("empty training split")
    L = train.num_classes
    basis = FeatureBasis(config.basis).fit(np.asarray(train.features), np.asarray(train.group))
    Z = basis.transform(np.asarray(train.features), np.asarray(train.group))
    m, y = train.expert, train.label
    targets = {"agree": m == y}
    if L == 2:
        targets.update(m1=m == 1, m1_y1=(m == 1) & (y == 1), m0_y0=(m == 0) & (y == 0))
    ks = range(L) if config.typek_classes is None else config.typek_classes
    for k in ks:
        targets[f"mneq_{k}"] = (m != k) & (y == k)

    def make(K):
        return SoftmaxRegression(K, config.learning_rate, config.tol, config.max_iter, config.l2)

    if config.joint:
        # every column is a sum of cells, so identities such as
        # p_agree = p_m0_y0 + p_m1_y1 hold exactly
        models = {"joint": make(L * L).fit(Z, y * L + m)}
    else:
        models = {"y": make(L).fit(Z, y)}
        for name, target in targets.items():
            models[name] = make(2).fit(Z, target.astype(int))
    meta = {name: {"converged": mdl.converged, "iterations": mdl.n_iter}
            for name, mdl in models.items()}
    stalled = [name for name, v in meta.items() if not v["converged"]]
    if stalled:
        warnings.warn(f"score models did not converge within max_iter: {stalled}",
                      RuntimeWarning, stacklevel=2)
    return ScoreModel(basis, models, Marginals.from_dataset(train, num_groups), L,
                      metadata={"models": meta, "not_converged": stalled,
                                "typek_classes": list(ks)})
