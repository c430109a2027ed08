"""Shared data model: datasets, decisions, metrics and bootstrap."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd

SPLITS = ("train", "val", "test")
SIMPLEX_TOL = 1e-9


def _frozen(a, dtype=None) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class LabeledDataset:
    """Records ``(x, a, m, y)`` with an optional split tag per record.

    ``group`` is kept as its own column; the score models still see it as an
    input feature.
    """

    features: np.ndarray
    group: np.ndarray
    expert: np.ndarray
    label: np.ndarray
    num_classes: int
    split: np.ndarray | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=float)
        if feats.ndim == 1:
            feats = feats[:, None]
        object.__setattr__(self, "features", _frozen(feats))
        for name in ("group", "expert", "label"):
            object.__setattr__(self, name, _frozen(getattr(self, name), dtype=int))
        n = feats.shape[0]
        if not (self.group.shape == self.expert.shape == self.label.shape == (n,)):
            raise ValueError("features, group, expert and label must have one row per record")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        L = self.num_classes
        for name in ("expert", "label"):
            col = getattr(self, name)
            if n and (col.min() < 0 or col.max() >= L):
                raise ValueError(f"{name} indices must lie in [0, {L - 1}]")
        if n and self.group.min() < 0:
            raise ValueError("group indices must be non-negative")
        if self.split is not None:
            split = _frozen(np.asarray(self.split, dtype=object).astype(str))
            if split.shape != (n,):
                raise ValueError("split must have one tag per record")
            bad = set(np.unique(split)) - set(SPLITS)
            if bad:
                raise ValueError(f"unknown split tags: {sorted(bad)}")
            object.__setattr__(self, "split", split)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    def __len__(self) -> int:
        return self.n

    @property
    def num_groups(self) -> int:
        return int(self.group.max()) + 1 if self.n else 0

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index)
        return LabeledDataset(
            features=self.features[index],
            group=self.group[index],
            expert=self.expert[index],
            label=self.label[index],
            num_classes=self.num_classes,
            split=None if self.split is None else self.split[index],
        )

    def get_split(self, name: str) -> "LabeledDataset":
        if self.split is None:
            raise ValueError("dataset has no split column")
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        part = self.subset(np.flatnonzero(self.split == name))
        if part.n == 0:
            raise ValueError(f"split {name!r} is empty")
        return part

    def with_random_split(self, seed: int = 0, fractions=(0.6, 0.2, 0.2)) -> "LabeledDataset":
        """Assign train/val/test tags by a seeded shuffle."""
        rng = np.random.default_rng(seed)
        order = rng.permutation(self.n)
        cuts = np.floor(np.cumsum(fractions)[:-1] * self.n).astype(int)
        tags = np.empty(self.n, dtype=object)
        for name, idx in zip(SPLITS, np.split(order, cuts)):
            tags[idx] = name
        return LabeledDataset(self.features, self.group, self.expert, self.label,
                              self.num_classes, tags)

    # -- CSV ------------------------------------------------------------------
    @classmethod
    def from_csv(cls, path, num_classes: int | None = None, seed: int = 0) -> "LabeledDataset":
        df = pd.read_csv(path, float_precision="round_trip")
        feat_cols = sorted((c for c in df.columns if c.startswith("feature_")),
                           key=lambda c: int(c.split("_", 1)[1]))
        missing = [c for c in ("group", "expert", "label") if c not in df.columns]
        if missing:
            raise ValueError(f"dataset CSV is missing columns: {missing}")
        if not feat_cols:
            raise ValueError("dataset CSV has no feature_* columns")
        if num_classes is None:
            num_classes = int(max(df["label"].max(), df["expert"].max())) + 1
        ds = cls(
            features=df[feat_cols].to_numpy(float),
            group=df["group"].to_numpy(int),
            expert=df["expert"].to_numpy(int),
            label=df["label"].to_numpy(int),
            num_classes=num_classes,
            split=df["split"].to_numpy(str) if "split" in df.columns else None,
        )
        if ds.split is None:
            ds = ds.with_random_split(seed)
        return ds

    def to_frame(self) -> pd.DataFrame:
        cols = {f"feature_{j}": self.features[:, j] for j in range(self.features.shape[1])}
        cols.update(group=self.group, expert=self.expert, label=self.label)
        if self.split is not None:
            cols["split"] = self.split
        return pd.DataFrame(cols)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")


@dataclass(frozen=True)
class DeferralDecision:
    deferred: bool
    predicted_class: int


@dataclass(frozen=True)
class DecisionBatch:
    """Vectorised decisions: a defer flag and a classifier output per record."""

    deferred: np.ndarray
    predicted: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "deferred", _frozen(self.deferred, dtype=bool))
        object.__setattr__(self, "predicted", _frozen(self.predicted, dtype=int))
        if self.deferred.shape != self.predicted.shape:
            raise ValueError("deferred and predicted must have the same shape")

    def __len__(self) -> int:
        return self.deferred.shape[0]

    def __iter__(self):
        for r, h in zip(self.deferred, self.predicted):
            yield DeferralDecision(bool(r), int(h))


def as_batch(decisions) -> DecisionBatch:
    if isinstance(decisions, DecisionBatch):
        return decisions
    decisions = list(decisions)
    return DecisionBatch(
        deferred=[d.deferred for d in decisions],
        predicted=[d.predicted_class for d in decisions],
    )


def check_simplex(masses: np.ndarray) -> np.ndarray:
    """Validate rows of ``masses`` as points of the probability simplex."""
    masses = np.asarray(masses, dtype=float)
    if masses.ndim == 1:
        masses = masses[None, :]
    if np.any(masses < -SIMPLEX_TOL) or np.any(masses > 1 + SIMPLEX_TOL):
        raise ValueError("simplex entries must lie in [0, 1]")
    if np.any(np.abs(masses.sum(axis=1) - 1.0) > SIMPLEX_TOL):
        raise ValueError("simplex rows must sum to 1")
    return masses


# -- metrics ------------------------------------------------------------------

def system_prediction(dataset: LabeledDataset, decisions) -> np.ndarray:
    batch = as_batch(decisions)
    if len(batch) != dataset.n:
        raise ValueError(f"got {len(batch)} decisions for {dataset.n} records")
    return np.where(batch.deferred, dataset.expert, batch.predicted)


def deferral_loss(dataset: LabeledDataset, decisions, human_loss=None, ai_loss=None) -> float:
    """Mean of ``r * loss_H + (1 - r) * loss_AI`` over the records.

    ``human_loss`` is an ``(n,)`` table and ``ai_loss`` an ``(n, L)`` table of
    per-record losses; both default to the 0-1 loss.
    """
    batch = as_batch(decisions)
    if len(batch) != dataset.n:
        raise ValueError(f"got {len(batch)} decisions for {dataset.n} records")
    if dataset.n == 0:
        raise ValueError("empty dataset")
    if human_loss is None:
        human_loss = (dataset.expert != dataset.label).astype(float)
    if ai_loss is None:
        ai = (batch.predicted != dataset.label).astype(float)
    else:
        ai = np.asarray(ai_loss, dtype=float)[np.arange(dataset.n), batch.predicted]
    r = batch.deferred.astype(float)
    return float(np.mean(r * np.asarray(human_loss, dtype=float) + (1 - r) * ai))


def outcome_probabilities(dataset: LabeledDataset, masses: np.ndarray) -> np.ndarray:
    """``P(Yhat = c)`` per record when decisions are drawn from ``masses``."""
    masses = np.asarray(masses, dtype=float)
    L = dataset.num_classes
    if masses.shape != (dataset.n, L + 1):
        raise ValueError(f"masses must have shape ({dataset.n}, {L + 1})")
    probs = masses[:, :L].copy()
    probs[np.arange(dataset.n), dataset.expert] += masses[:, L]
    return probs


@dataclass(frozen=True)
class FairnessGaps:
    dp_gap: float
    eopp_gap: float
    eodds_gap: float
    signed_dp: float
    signed_eopp: float
    signed_fpr: float


def _group_rate(values, mask, cell: str) -> float:
    if not np.any(mask):
        raise ValueError(f"empty group-conditional cell: {cell}")
    return float(np.mean(values[mask]))


def _gaps(positive: np.ndarray, group: np.ndarray, label: np.ndarray) -> FairnessGaps:
    rate = {}
    for a in (0, 1):
        rate["dp", a] = _group_rate(positive, group == a, f"group={a}")
        for y in (0, 1):
            rate[y, a] = _group_rate(positive, (group == a) & (label == y),
                                     f"group={a}, label={y}")
    dp = rate["dp", 1] - rate["dp", 0]
    tpr = rate[1, 1] - rate[1, 0]
    fpr = rate[0, 1] - rate[0, 0]
    return FairnessGaps(abs(dp), abs(tpr), max(abs(tpr), abs(fpr)), dp, tpr, fpr)


def fairness_gaps(dataset: LabeledDataset, decisions) -> FairnessGaps:
    """Demographic parity, equal opportunity and equalized odds gaps.

    Signed values are group 1 minus group 0.  Binary task, two groups.
    """
    if dataset.num_classes != 2:
        raise ValueError("fairness gaps need a binary task")
    yhat = system_prediction(dataset, decisions)
    return _gaps((yhat == 1).astype(float), dataset.group, dataset.label)


def expected_fairness_gaps(dataset: LabeledDataset, masses: np.ndarray) -> FairnessGaps:
    """Fairness gaps in expectation over a randomized policy's masses."""
    if dataset.num_classes != 2:
        raise ValueError("fairness gaps need a binary task")
    positive = outcome_probabilities(dataset, masses)[:, 1]
    return _gaps(positive, dataset.group, dataset.label)


def expected_accuracy(dataset: LabeledDataset, masses: np.ndarray) -> float:
    probs = outcome_probabilities(dataset, masses)
    return float(np.mean(probs[np.arange(dataset.n), dataset.label]))


# -- reports ------------------------------------------------------------------

@dataclass(frozen=True)
class BootstrapInterval:
    low: float
    high: float
    q05: float
    q95: float


@dataclass
class EvalReport:
    objective: float
    constraint_values: dict[str, float]
    violations: dict[str, float]
    deferral_rate: float
    accuracy: float
    bootstrap_intervals: dict[str, BootstrapInterval] | None = None
    extra: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if any(v < 0 for v in self.violations.values()):
            raise ValueError("violations must be non-negative")
        for name in ("deferral_rate", "accuracy"):
            v = getattr(self, name)
            if not -1e-12 <= v <= 1 + 1e-12:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    def to_dict(self) -> dict:
        out = {
            "objective": self.objective,
            "constraint_values": dict(self.constraint_values),
            "violations": dict(self.violations),
            "deferral_rate": self.deferral_rate,
            "accuracy": self.accuracy,
            "extra": dict(self.extra),
        }
        if self.bootstrap_intervals is not None:
            out["bootstrap_intervals"] = {
                k: vars(v).copy() for k, v in self.bootstrap_intervals.items()
            }
        return out


def violation(value: float, delta: float, two_sided: bool = False) -> float:
    v = abs(value) if two_sided else value
    return max(v - delta, 0.0)


def bootstrap(
    evaluator: Callable[[LabeledDataset], Mapping[str, float]],
    dataset: LabeledDataset,
    iterations: int = 10,
    seed: int = 0,
    pass_index: bool = False,
) -> dict[str, BootstrapInterval]:
    """Resample records with replacement and summarise each metric.

    Each iteration draws from its own child of ``SeedSequence(seed)`` so the
    result does not depend on evaluation order.  With ``pass_index`` the
    evaluator also receives the resampled row indices, for callers that keep
    aligned per-record arrays.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if dataset.n == 0:
        raise ValueError("cannot bootstrap an empty dataset")
    samples: dict[str, list[float]] = {}
    for child in np.random.SeedSequence(seed).spawn(iterations):
        idx = np.random.default_rng(child).integers(0, dataset.n, size=dataset.n)
        sub = dataset.subset(idx)
        result = evaluator(sub, idx) if pass_index else evaluator(sub)
        for name, value in result.items():
            samples.setdefault(name, []).append(float(value))
    out = {}
    for name, vals in samples.items():
        arr = np.asarray(vals)
        out[name] = BootstrapInterval(
            low=float(arr.min()), high=float(arr.max()),
            q05=float(np.quantile(arr, 0.05)), q95=float(np.quantile(arr, 0.95)),
        )
    return out
