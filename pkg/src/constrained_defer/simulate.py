"""Synthetic two-group populations with known conditional probabilities.

A record draws a group ``a``, a latent score ``u ~ U(0, 1)`` and a label
``y ~ Bernoulli(sigmoid(w * (u - 1/2) + bias_a))``.  The expert reports the
true label with a group-specific accuracy and flips it otherwise.  Features
expose ``u`` plus independent noise columns, so every conditional used by the
embeddings has a closed form.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import LabeledDataset
from .scores import Marginals, ScoreTable


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def softplus(z):
    return np.logaddexp(0.0, z)


@dataclass
class ScenarioConfig:
    n_train: int = 5000
    n_val: int = 10_000
    n_test: int = 10_000
    p_group1: float = 0.4
    weight: float = 6.0
    bias: tuple[float, float] = (0.8, -0.8)
    expert_accuracy: tuple[float, float] = (0.85, 0.60)
    n_noise: int = 2
    seed: int = 0
    # out-of-distribution latent density is 2u on [0, 1]
    ood_ratio: bool = True

    def __post_init__(self):
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.n_train + self.n_val + self.n_test < 1:
            raise ValueError("need at least one record")
        probs = [self.p_group1, *self.expert_accuracy]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.weight == 0:
            raise ValueError("weight must be non-zero")
        self.bias = tuple(float(b) for b in self.bias)
        self.expert_accuracy = tuple(float(a) for a in self.expert_accuracy)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        for key in ("bias", "expert_accuracy"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Scenario:
    """Closed-form conditionals of a :class:`ScenarioConfig`."""

    config: ScenarioConfig = field(default_factory=ScenarioConfig)

    def p_y1(self, u, group):
        c = self.config
        return sigmoid(c.weight * (np.asarray(u) - 0.5) + np.asarray(c.bias)[group])

    def label_rate(self, a: int) -> float:
        """``Pr(Y=1 | A=a)`` integrated over the uniform latent score."""
        c = self.config
        w, b = c.weight, c.bias[a]
        return float((softplus(w / 2 + b) - softplus(-w / 2 + b)) / w)

    def marginals(self) -> Marginals:
        pa = np.array([1 - self.config.p_group1, self.config.p_group1])
        rate = np.array([self.label_rate(0), self.label_rate(1)])
        return Marginals(pa, np.vstack([pa * (1 - rate), pa * rate]))

    def scores(self, ds: LabeledDataset) -> ScoreTable:
        """Exact score table for the records of ``ds``."""
        u = np.asarray(ds.features)[:, 0]
        g = np.asarray(ds.group)
        p1 = self.p_y1(u, g)
        acc = np.asarray(self.config.expert_accuracy)[g]
        p_y = np.column_stack([1 - p1, p1])
        ratio = 2.0 * u if self.config.ood_ratio else None
        return ScoreTable.create(
            p_y, acc, g, self.marginals(),
            p_m1=acc * p1 + (1 - acc) * (1 - p1),
            p_m1_y1=acc * p1, p_m0_y0=acc * (1 - p1),
            p_mneq_y={0: (1 - acc) * (1 - p1), 1: (1 - acc) * p1},
            density_ratio=ratio,
        )

    def sample(self, n: int, rng, split: str | None = None, ood: bool = False) -> LabeledDataset:
        c = self.config
        g = (rng.random(n) < c.p_group1).astype(int)
        # out-of-distribution latent: density 2u, sampled as sqrt of a uniform
        u = np.sqrt(rng.random(n)) if ood else rng.random(n)
        y = (rng.random(n) < self.p_y1(u, g)).astype(int)
        correct = rng.random(n) < np.asarray(c.expert_accuracy)[g]
        m = np.where(correct, y, 1 - y)
        noise = rng.standard_normal((n, c.n_noise))
        feats = np.column_stack([u, noise])
        return LabeledDataset(feats, g, m, y, 2,
                              None if split is None else np.full(n, split))


def generate(config: ScenarioConfig | None = None):
    """Sample train/val/test splits and return them with exact scores.

    Each split draws from its own child of the configured seed, so changing
    one split size leaves the others unchanged.
    """
    config = config or ScenarioConfig()
    scen = Scenario(config)
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    parts = []
    for name, n, ss in zip(("train", "val", "test"),
                           (config.n_train, config.n_val, config.n_test), seeds):
        if n > 0:
            parts.append(scen.sample(n, np.random.default_rng(ss), name))
    ds = parts[0] if len(parts) == 1 else _concat(parts)
    return ds, scen.scores(ds)


def _concat(parts) -> LabeledDataset:
    return LabeledDataset(
        np.vstack([p.features for p in parts]),
        np.concatenate([p.group for p in parts]),
        np.concatenate([p.expert for p in parts]),
        np.concatenate([p.label for p in parts]),
        parts[0].num_classes,
        np.concatenate([p.split for p in parts]),
    )
