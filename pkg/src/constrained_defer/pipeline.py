"""End-to-end runs: scores, tuning, evaluation, sweeps and the sample-size study."""
from __future__ import annotations

import hashlib
import json
import os
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .core import (
    SPLITS, EvalReport, LabeledDataset, bootstrap, expected_fairness_gaps, outcome_probabilities,
    violation,
)
from .embeddings import ConstraintSpec, EmbeddingSet, build_embeddings, required_columns
from .scores import Marginals, ScoreConfig, ScoreTable, fit_scores, ingest_scores
from .simulate import Scenario, ScenarioConfig, generate
from .solver import (
    DeferralPolicy, GridSpec, NotFeasible, evaluate_grid, schema_hash, solve_multi, solve_single,
)

OUTPUT_ENV = "CDEFER_OUTPUT_ROOT"


# -- configuration --------------------------------------------------------------

@dataclass
class ScoreSource:
    source: str = "fit"                 # "fit" | "ingest" | "truth"
    path: str | None = None             # score CSV for "ingest"
    basis: str = "poly"
    max_iter: int = 3000
    tol: float = 1e-6
    joint: bool = False                 # one model over (label, expert) cells


@dataclass
class SolverOptions:
    mode: str = "randomized"            # "randomized" | "deterministic"
    method: str = "mixture"             # several constraints: "mixture" | "grid"
    min_jump: float = 0.0
    eps_tie: float = 1e-12
    grid_num: int = 40
    grid_low: float = 1e-3
    grid_high: float = 1e2


@dataclass
class EvalOptions:
    bootstrap: int = 10
    seed: int = 0
    split: str = "test"


@dataclass
class RunConfig:
    data: str | None = None
    scenario: dict | None = None
    scores: ScoreSource = field(default_factory=ScoreSource)
    constraints: list = field(default_factory=list)
    unconstrained: bool = False
    solver: SolverOptions = field(default_factory=SolverOptions)
    evaluation: EvalOptions = field(default_factory=EvalOptions)
    output_dir: str = "run"
    seed: int = 0
    tune_split: str = "val"
    # group marginals: "tuning" re-estimates them from the tuning-split scores,
    # "source" keeps the ones that came with the scores
    marginals: str = "tuning"

    def __post_init__(self):
        if isinstance(self.scores, dict):
            self.scores = ScoreSource(**self.scores)
        if isinstance(self.solver, dict):
            self.solver = SolverOptions(**self.solver)
        if isinstance(self.evaluation, dict):
            self.evaluation = EvalOptions(**self.evaluation)
        if (self.data is None) == (self.scenario is None):
            raise ValueError("give exactly one of 'data' or 'scenario'")
        if self.scores.source not in ("fit", "ingest", "truth"):
            raise ValueError(f"unknown score source {self.scores.source!r}")
        if self.scores.source == "ingest" and not self.scores.path:
            raise ValueError("score source 'ingest' needs a path")
        if self.scores.source == "truth" and self.scenario is None:
            raise ValueError("ground-truth scores are only available for simulated data")
        if self.marginals not in ("tuning", "source"):
            raise ValueError(f"unknown marginals option {self.marginals!r}")
        if not self.constraints and not self.unconstrained:
            raise ValueError("give at least one constraint or set unconstrained: true")
        if self.constraints and self.unconstrained:
            raise ValueError("'unconstrained' conflicts with the listed constraints")
        self.constraints = [c if isinstance(c, ConstraintSpec) else ConstraintSpec.from_dict(c)
                            for c in self.constraints]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["constraints"] = [c.to_dict() for c in self.constraints]
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()

    def grid(self) -> GridSpec:
        s = self.solver
        return GridSpec(s.grid_num, s.grid_low, s.grid_high)


def load_config(path) -> dict:
    """Read a JSON or YAML config file into a dict."""
    text = Path(path).read_text()
    if str(path).endswith((".yaml", ".yml")):
        import yaml
        return yaml.safe_load(text) or {}
    return json.loads(text)


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def resolve_output(path: str | os.PathLike) -> Path:
    p = Path(path)
    out = p if p.is_absolute() else output_root() / p
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_plain) + "\n")


def _plain(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


# -- data and scores ------------------------------------------------------------

@dataclass
class Prepared:
    dataset: LabeledDataset
    scores: ScoreTable
    metadata: dict = field(default_factory=dict)

    def split(self, name: str):
        mask = np.asarray(self.dataset.split) == name
        if not mask.any():
            raise ValueError(f"split {name!r} is empty")
        return self.dataset.subset(mask), self.scores.subset(mask)


def prepare(config: RunConfig) -> Prepared:
    """Load or simulate the records and attach scores for every record."""
    truth = None
    if config.scenario is not None:
        scen = dict(config.scenario)
        scen.setdefault("seed", config.seed)
        ds, truth = generate(ScenarioConfig.from_dict(scen))
    else:
        ds = LabeledDataset.from_csv(config.data, seed=config.seed)
    src = config.scores
    meta = {"score_source": src.source}
    if src.source == "truth":
        scores = truth
    elif src.source == "ingest":
        req = required_columns(config.constraints, ds.num_classes)
        scores = ingest_scores(src.path, ds.group, required=req)
    else:
        train = ds.get_split("train")
        model = fit_scores(train, ScoreConfig(basis=src.basis, max_iter=src.max_iter, tol=src.tol,
                                                 joint=src.joint),
                           num_groups=max(ds.num_groups, 1))
        scores = model.predict(ds, density_ratio=None if truth is None else truth.density_ratio)
        meta["fit"] = model.metadata
    if config.marginals == "tuning" and ds.split is not None:
        # the same marginals are used on every split, so the tuned policy is
        # one fixed function of the scores
        tune = np.asarray(ds.split) == config.tune_split
        if tune.any():
            marg = Marginals.from_scores(scores.subset(tune), max(ds.num_groups, 1))
            scores = scores.with_marginals(marg)
    meta["marginals"] = scores.marginals.to_json()
    return Prepared(ds, scores, meta)


# -- solving and evaluation -----------------------------------------------------

def _specs_with_delta(specs, delta):
    return [ConstraintSpec(s.kind, float(delta), dict(s.params)) for s in specs]


def fit_policy(emb: EmbeddingSet, config: RunConfig, frontier=None, deltas=None) -> DeferralPolicy:
    opts = config.solver
    m = len(emb.constraints)
    if m == 0:
        from .solver import solve
        policy = solve(emb, eps_tie=opts.eps_tie)
    elif m == 1:
        policy = solve_single(emb, 0, eps_tie=opts.eps_tie, min_jump=opts.min_jump)
    else:
        policy = solve_multi(emb, config.grid(), frontier=frontier, deltas=deltas,
                             method=opts.method, eps_tie=opts.eps_tie)
    return policy.with_mode(opts.mode) if opts.mode != policy.mode else policy


def realized_constraints(ds: LabeledDataset, emb: EmbeddingSet, masses, specs) -> dict:
    """Constraint values measured against observed labels and expert answers.

    Values are expectations over the policy's randomization.  Constraints
    without a label-based counterpart (out-of-distribution mass) fall back to
    the plug-in estimate.
    """
    out = {}
    L = ds.num_classes
    probs = outcome_probabilities(ds, masses)
    gaps = None
    by_name = {c.name: c for c in emb.constraints}
    longtail = [s for s in specs if s.kind == "longtail"]
    for c in emb.constraints:
        if c.kind == "budget":
            out[c.name] = float(masses[:, L].mean())
        elif c.kind in ("dp", "eopp", "eodds"):
            if gaps is None:
                gaps = expected_fairness_gaps(ds, masses)
            out[c.name] = {"dp": gaps.signed_dp, "eopp": gaps.signed_eopp,
                           "eodds_tpr": gaps.signed_eopp, "eodds_fpr": gaps.signed_fpr}[c.name]
        elif c.kind == "typek":
            k = int(c.name.rsplit("_", 1)[1])
            mask = ds.label == k
            out[c.name] = float(1 - probs[mask, k].mean()) if mask.any() else float("nan")
        elif c.kind == "longtail":
            spec = longtail[0]
            partition = spec.params.get("partition", [[j] for j in range(L)])
            alphas = spec.params.get("alphas", [1.0] * len(partition))
            i = int(c.name.rsplit("_", 1)[1])
            in_g = np.isin(ds.label, partition[i])
            keep = 1 - masses[:, L]
            out[c.name] = (float((keep * in_g).mean() / in_g.mean()) - alphas[i] / len(partition)
                           if in_g.any() else float("nan"))
        else:
            out[c.name] = float(np.mean(np.sum(masses * by_name[c.name].psi, axis=1)))
    return out


def evaluate_policy(policy: DeferralPolicy, ds: LabeledDataset, scores: ScoreTable, specs,
                    iterations: int = 10, seed: int = 0) -> EvalReport:
    """Plug-in and label-based metrics of ``policy`` on one split."""
    emb = build_embeddings(scores, specs)
    masses = policy.masses(emb)
    L = ds.num_classes
    obj, plug = emb.values(masses)

    def metrics(sub, idx):
        sub_emb = emb.subset(idx)
        m = masses[idx]
        probs = outcome_probabilities(sub, m)
        vals = realized_constraints(sub, sub_emb, m, specs)
        res = {"accuracy": float(probs[np.arange(sub.n), sub.label].mean()),
               "deferral_rate": float(m[:, L].mean())}
        res.update({f"constraint:{k}": v for k, v in vals.items()})
        return res

    full = metrics(ds, np.arange(ds.n))
    values = {c.name: full[f"constraint:{c.name}"] for c in emb.constraints}
    viol = {c.name: violation(values[c.name], c.delta, c.two_sided) for c in emb.constraints}
    intervals = None
    if iterations > 0 and ds.n > 0:
        try:
            intervals = bootstrap(metrics, ds, iterations, seed, pass_index=True)
        except ValueError:
            intervals = None       # a resample lost a group-conditional cell
    extra = {f"plugin:{c.name}": float(v) for c, v in zip(emb.constraints, plug)}
    return EvalReport(obj, values, viol, full["deferral_rate"], full["accuracy"], intervals, extra)


def run_manifest(config: RunConfig, extra: dict | None = None) -> dict:
    return {
        "config_sha256": config.digest(), "seed": config.seed,
        "versions": {"package": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "pandas": pd.__version__},
        **(extra or {}),
    }


def run_solve(config: RunConfig, out_dir=None) -> dict:
    """Tune on the tuning split and write the policy, tuning report and manifest.

    Raises :class:`NotFeasible` when the constraints cannot be met.
    """
    prep = prepare(config)
    ds_t, sc_t = prep.split(config.tune_split)
    emb = build_embeddings(sc_t, config.constraints)
    policy = fit_policy(emb, config)
    policy.metadata["score_schema"] = schema_hash(sc_t.to_frame().columns)
    report = evaluate_policy(policy, ds_t, sc_t, config.constraints,
                             config.evaluation.bootstrap, config.evaluation.seed)
    out = resolve_output(out_dir or config.output_dir)
    policy.save(out / "policy.json")
    _write_json(out / "report_tuning.json", report.to_dict())
    _write_json(out / "manifest.json", run_manifest(config, {"scores": prep.metadata}))
    _write_json(out / "config.json", config.to_dict())
    return {"policy": policy, "report": report, "out_dir": out}


def run_evaluate(config: RunConfig, policy: DeferralPolicy, split: str | None = None,
                 out_dir=None) -> EvalReport:
    prep = prepare(config)
    ds, sc = prep.split(split or config.evaluation.split)
    report = evaluate_policy(policy, ds, sc, config.constraints,
                             config.evaluation.bootstrap, config.evaluation.seed)
    if out_dir is not None:
        out = resolve_output(out_dir)
        _write_json(out / f"report_{split or config.evaluation.split}.json", report.to_dict())
    return report


SWEEP_COLUMNS = ("delta", "status", "k", "p", "tuning_objective", "tuning_max_violation",
                 "test_accuracy", "test_deferral_rate", "test_max_violation",
                 "test_accuracy_q05", "test_accuracy_q95", "test_violation_q05",
                 "test_violation_q95", "message")


def run_sweep(config: RunConfig, deltas, out_dir=None) -> pd.DataFrame:
    """One row per tolerance: tuning objective, test accuracy and violation.

    Every constraint gets the row's tolerance.  Infeasible tolerances are
    recorded with ``status = not_feasible``.
    """
    prep = prepare(config)
    ds_t, sc_t = prep.split(config.tune_split)
    ds_e, sc_e = prep.split(config.evaluation.split)
    base_emb = build_embeddings(sc_t, config.constraints)
    frontier = None
    if len(base_emb.constraints) > 1:
        frontier = evaluate_grid(base_emb, config.grid())
    rows = []
    for delta in deltas:
        specs = _specs_with_delta(config.constraints, delta)
        emb = build_embeddings(sc_t, specs)
        row = dict.fromkeys(SWEEP_COLUMNS, "")
        row["delta"] = float(delta)
        try:
            policy = fit_policy(emb, config, frontier,
                                [c.delta for c in emb.constraints] if frontier is not None else None)
        except NotFeasible as exc:
            row.update(status="not_feasible", message=str(exc))
            rows.append(row)
            continue
        tune = evaluate_policy(policy, ds_t, sc_t, specs, 0)
        test = evaluate_policy(policy, ds_e, sc_e, specs, config.evaluation.bootstrap,
                               config.evaluation.seed)
        tv = [violation(v, c.delta, c.two_sided)
              for c, v in zip(emb.constraints, emb.values(policy.masses(emb))[1])]
        row.update(status="ok", k=";".join(f"{x:.12g}" for x in policy.predictor.k),
                   p=policy.predictor.p, tuning_objective=tune.objective,
                   tuning_max_violation=max(tv, default=0.0),
                   test_accuracy=test.accuracy, test_deferral_rate=test.deferral_rate,
                   test_max_violation=max(test.violations.values(), default=0.0))
        if test.bootstrap_intervals:
            bi = test.bootstrap_intervals
            row.update(test_accuracy_q05=bi["accuracy"].q05, test_accuracy_q95=bi["accuracy"].q95)
            names = [f"constraint:{c.name}" for c in emb.constraints if f"constraint:{c.name}" in bi]
            if names:
                row.update(test_violation_q05=max(bi[n].q05 for n in names),
                           test_violation_q95=max(bi[n].q95 for n in names))
        rows.append(row)
    df = pd.DataFrame(rows, columns=list(SWEEP_COLUMNS))
    if out_dir is not None:
        out = resolve_output(out_dir)
        df.to_csv(out / "sweep.csv", index=False, float_format="%.12g")
        _write_json(out / "manifest.json", run_manifest(config, {"deltas": list(map(float, deltas))}))
    return df


# -- sample-size study ----------------------------------------------------------

def generalization_margin(n: int, eps: float = 0.05, constant: float = 1.0) -> float:
    """``c * (sqrt(log n) + sqrt(log(1/eps))) / sqrt(n)``."""
    return constant * (np.sqrt(np.log(n)) + np.sqrt(np.log(1.0 / eps))) / np.sqrt(n)


@dataclass
class StudyConfig:
    scenario: dict = field(default_factory=dict)
    kind: str = "dp"
    delta: float = 0.15
    n_grid: tuple = (1000, 10_000, 100_000)
    seeds: int = 20
    eps: float = 0.05
    constant: float = 1.0
    n_test: int = 200_000
    seed: int = 0


def run_generalization_study(study: StudyConfig, out_dir=None) -> pd.DataFrame:
    """Tune with margin ``delta - d_n`` on ``n`` records, measure on a large held-out set.

    Uses exact simulator scores so the trend isolates sampling of the tuning
    set.  Returns one row per ``(n, seed)``; ``summary`` rows carry medians.
    """
    # only the population parameters matter here; sizes come from the study
    scen = Scenario(ScenarioConfig.from_dict({**study.scenario, "seed": study.seed}))
    ss_test, ss_runs = np.random.SeedSequence(study.seed).spawn(2)
    test = scen.sample(study.n_test, np.random.default_rng(ss_test), "test")
    test_scores = scen.scores(test)
    spec = [ConstraintSpec(study.kind, study.delta)]
    test_emb = build_embeddings(test_scores, spec)
    rows = []
    run_seeds = ss_runs.spawn(len(study.n_grid) * study.seeds)
    for i, n in enumerate(study.n_grid):
        margin = generalization_margin(int(n), study.eps, study.constant)
        tuned_delta = max(study.delta - margin, 0.0)
        for s in range(study.seeds):
            rng = np.random.default_rng(run_seeds[i * study.seeds + s])
            val = scen.sample(int(n), rng, "val")
            emb = build_embeddings(scen.scores(val), [ConstraintSpec(study.kind, tuned_delta)])
            policy = solve_single(emb)
            _, tune_vals = emb.values(policy.masses(emb))
            masses = policy.masses(test_emb)
            held = realized_constraints(test, test_emb, masses, spec)[test_emb.constraints[0].name]
            _, plug = test_emb.values(masses)
            two = test_emb.constraints[0].two_sided
            rows.append({
                "n": int(n), "seed": s, "margin": margin, "tuned_delta": tuned_delta,
                "tuning_value": float(abs(tune_vals[0]) if two else tune_vals[0]),
                "heldout_value": float(abs(held) if two else held),
                "heldout_plugin": float(abs(plug[0]) if two else plug[0]),
            })
    df = pd.DataFrame(rows)
    df["heldout_violation"] = np.maximum(df["heldout_value"] - study.delta, 0.0)
    df["generalization_gap"] = (df["heldout_value"] - df["tuning_value"]).abs()
    if out_dir is not None:
        out = resolve_output(out_dir)
        df.to_csv(out / "gen_study.csv", index=False, float_format="%.12g")
        summarize_study(df).to_csv(out / "gen_study_summary.csv", index=False,
                                   float_format="%.12g")
    return df


def summarize_study(df: pd.DataFrame) -> pd.DataFrame:
    return df.groupby("n", as_index=False).agg(
        margin=("margin", "first"),
        median_heldout=("heldout_value", "median"),
        median_violation=("heldout_violation", "median"),
        median_generalization_gap=("generalization_gap", "median"),
    )


def write_scenario(config: ScenarioConfig, out_dir) -> dict:
    """Simulate and write the records plus exact scores."""
    from .scores import emit_scores
    ds, truth = generate(config)
    out = resolve_output(out_dir)
    ds.to_csv(out / "data.csv")
    emit_scores(truth, out / "scores_truth.csv")
    _write_json(out / "scenario.json", asdict(config))
    return {"data": out / "data.csv", "scores": out / "scores_truth.csv"}


def fit_and_emit(data_path, out_path, basis: str = "poly", seed: int = 0) -> dict:
    from .scores import emit_scores
    ds = LabeledDataset.from_csv(data_path, seed=seed)
    model = fit_scores(ds.get_split("train"), ScoreConfig(basis=basis),
                       num_groups=max(ds.num_groups, 1))
    table = model.predict(ds)
    out_path = Path(out_path)
    if not out_path.is_absolute():
        out_path = resolve_output(out_path.parent) / out_path.name
    emit_scores(table, out_path)
    return {"scores": out_path, "metadata": model.metadata}


__all__ = ["RunConfig", "StudyConfig", "run_solve", "run_evaluate", "run_sweep",
           "run_generalization_study", "evaluate_policy", "prepare", "generalization_margin",
           "SPLITS", "Marginals"]
