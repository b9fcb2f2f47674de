"""Sex-ratio leave-one-subject-out sweeps.

For every (model, ratio, seed) the harness holds out each subject in turn,
draws a training pool whose male:female subject counts follow the ratio,
trains, predicts every held-out trial and writes one results row per fold.
Per-fold MAE is reported for the held-out subject's sex; SP/PRD/NRD need
both sexes and are computed on the trial predictions pooled over all folds
of the (model, ratio, seed) triple.

Ratio realisation: with ``a_m, a_f`` subjects of each sex left after the
hold-out and fractions ``f_m, f_f``, the budget is
``min(floor(a_m / f_m), floor(a_f / f_f))`` (sexes with fraction 0 are
ignored), ``n_m = round(f_m * budget)`` with exact halves rounded toward the
larger fraction, and ``n_f = budget - n_m``.  Subjects are drawn uniformly
without replacement from a Philox stream keyed by seed, ratio and fold.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dvae
from .baselines import knn_fit, knn_predict
from .errors import DataError, FairloadError, ParameterError
from .fairmetrics import GroupedPredictions, mae, report
from .pipeline import Dataset, normalize

logger = logging.getLogger(__name__)

RESULTS_HEADER = ["model", "ratio_m", "ratio_f", "seed", "fold_subject", "test_sex",
                  "n_trials", "mae", "sp", "prd", "nrd", "status"]
MODELS = ("dvae", "plain_vae", "knn")
DEFAULT_RATIOS = [(0.9, 0.1), (0.7, 0.3), (0.5, 0.5), (0.3, 0.7), (0.1, 0.9)]


@dataclass
class ExperimentConfig:
    dataset: str | None = None
    models: list[str] = field(default_factory=lambda: list(MODELS))
    ratios: list[tuple[float, float]] = field(default_factory=lambda: list(DEFAULT_RATIOS))
    seeds: list[int] = field(default_factory=lambda: [0])
    train: dict[str, dict] = field(default_factory=dict)
    arch: dict = field(default_factory=dict)
    knn_k: int = 5
    output_dir: str = "run"
    persist_models: bool = True
    threads: int = 1

    def __post_init__(self):
        self.ratios = [tuple(float(v) for v in r) for r in self.ratios]
        if not self.models or not self.ratios or not self.seeds:
            raise ParameterError("need at least one model, ratio and seed")
        for m in self.models:
            if m not in MODELS:
                raise ParameterError(f"unknown model {m!r}; choose from {MODELS}")
        for fm, ff in self.ratios:
            if not (0 <= fm <= 1 and 0 <= ff <= 1) or abs(fm + ff - 1) > 1e-9:
                raise ParameterError(f"ratio ({fm}, {ff}) must be fractions summing to 1")
            if "dvae" in self.models and min(fm, ff) == 0:
                raise ParameterError("dvae needs both sexes: ratio fractions must be > 0")
        for m in self.train:
            if m not in MODELS:
                raise ParameterError(f"train overrides for unknown model {m!r}")
        if self.threads < 1:
            raise ParameterError("threads must be >= 1")

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            return cls(**json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ParameterError(f"bad experiment config {path}: {exc}") from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratios"] = [list(r) for r in self.ratios]
        return d


@dataclass
class FoldPlan:
    fold_index: int
    held_out_subject: str
    held_out_sex: str
    training_subjects: list[str]
    n_male: int
    n_female: int
    requested_ratio: tuple[float, float]

    @property
    def realized_ratio(self) -> float:
        return self.n_male / (self.n_male + self.n_female)


def _ratio_key(ratio):
    return int(round(ratio[0] * 1_000_000))


def _fold_rng(seed, ratio, fold_index):
    seq = np.random.SeedSequence(entropy=seed & (2**64 - 1),
                                 spawn_key=(_ratio_key(ratio), fold_index))
    return np.random.Generator(np.random.Philox(seq))


def ratio_counts(avail_m: int, avail_f: int, ratio) -> tuple[int, int]:
    """Per-sex subject counts realising ``ratio`` from the available pool."""
    fm, ff = ratio
    caps = [math.floor(a / f + 1e-9) for a, f in ((avail_m, fm), (avail_f, ff)) if f > 0]
    budget = min(caps)
    x = fm * budget
    base = math.floor(x + 1e-9)
    if abs(x - base - 0.5) < 1e-9:
        n_m = base + 1 if fm > ff else base
    else:
        n_m = int(round(x))
    return n_m, budget - n_m


def plan_folds(subjects, ratio, seed: int) -> list[FoldPlan]:
    """One fold per subject in roster order.  ``subjects`` is a roster
    ``[(id, sex), ...]`` or a Dataset."""
    roster = list(subjects.subjects if isinstance(subjects, Dataset) else subjects)
    ratio = tuple(float(v) for v in ratio)
    males = [s for s, x in roster if x == "male"]
    females = [s for s, x in roster if x == "female"]
    if len(males) < 2 or len(females) < 2:
        raise ParameterError("fold planning needs at least two subjects of each sex")
    plans = []
    for i, (sid, sex) in enumerate(roster):
        pool_m = [s for s in males if s != sid]
        pool_f = [s for s in females if s != sid]
        n_m, n_f = ratio_counts(len(pool_m), len(pool_f), ratio)
        if (ratio[0] > 0 and n_m < 1) or (ratio[1] > 0 and n_f < 1):
            logger.warning("fold %s skipped: pool %dM/%dF cannot realise ratio %s",
                           sid, len(pool_m), len(pool_f), ratio)
            continue
        rng = _fold_rng(seed, ratio, i)
        chosen_m = [pool_m[j] for j in sorted(rng.choice(len(pool_m), n_m, replace=False))]
        chosen_f = [pool_f[j] for j in sorted(rng.choice(len(pool_f), n_f, replace=False))]
        plans.append(FoldPlan(i, sid, sex, chosen_m + chosen_f, n_m, n_f, ratio))
    if not plans:
        raise ParameterError(f"no fold can realise ratio {ratio}")
    return plans


def audit_plans(plans, roster=None) -> list[str]:
    """Leakage and ratio-rule violations in a list of FoldPlans.

    With a ``roster`` the per-sex counts and sexes are re-derived and checked
    against the rounding rule as well.
    """
    problems = []
    sex_of = dict(roster) if roster is not None else None
    for p in plans:
        if p.held_out_subject in p.training_subjects:
            problems.append(f"fold {p.fold_index}: held-out {p.held_out_subject} in training")
        if len(set(p.training_subjects)) != len(p.training_subjects):
            problems.append(f"fold {p.fold_index}: duplicated training subject")
        if sex_of is None:
            continue
        sexes = [sex_of.get(s) for s in p.training_subjects]
        if sexes.count("male") != p.n_male or sexes.count("female") != p.n_female:
            problems.append(f"fold {p.fold_index}: per-sex counts disagree with the roster")
        avail_m = sum(1 for s, x in sex_of.items() if x == "male" and s != p.held_out_subject)
        avail_f = sum(1 for s, x in sex_of.items() if x == "female" and s != p.held_out_subject)
        if ratio_counts(avail_m, avail_f, p.requested_ratio) != (p.n_male, p.n_female):
            problems.append(f"fold {p.fold_index}: counts ({p.n_male}, {p.n_female}) break "
                            f"the rounding rule for ratio {p.requested_ratio}")
    return problems


# ---------------------------------------------------------------- fold execution


def _train_seed(seed, ratio, fold_index, model):
    key = (_ratio_key(ratio), fold_index, MODELS.index(model))
    return int(np.random.SeedSequence(seed & (2**64 - 1), spawn_key=key).generate_state(1)[0])


def train_config_for(config: ExperimentConfig, model: str, seed: int) -> dvae.TrainConfig:
    overrides = dict(config.train.get(model, {}))
    overrides.update(mode=model, seed=seed)
    return dvae.TrainConfig.from_dict(overrides)


def run_fold(dataset: Dataset, plan: FoldPlan, model: str, config: ExperimentConfig,
             seed: int, model_dir: Path | None = None):
    """Train on the plan's subjects and predict each held-out trial.

    Returns a list of ``(trial_id, sex, y_true, y_pred)``.
    """
    train_raw = dataset.select_subjects(plan.training_subjects)
    test_raw = dataset.select_subjects([plan.held_out_subject])
    if plan.held_out_subject in set(train_raw.subject_ids):
        raise DataError("held-out subject leaked into the training set")
    if not len(test_raw):
        raise DataError(f"subject {plan.held_out_subject} has no cycles")
    train_ds = normalize(train_raw)
    test_ds = normalize(test_raw, train_ds.channel_stats)
    trials = test_ds.trials()

    if model == "knn":
        k = min(config.knn_k, len(train_ds))
        fitted = knn_fit(train_ds, k)
        preds = {t: float(np.mean(knn_predict(fitted, test_ds.data[idx])))
                 for t, idx in trials.items()}
        if model_dir is not None:
            fitted.save(model_dir)
    else:
        tc = train_config_for(config, model, _train_seed(seed, plan.requested_ratio,
                                                         plan.fold_index, model))
        arch = dvae.default_arch(train_ds, **config.arch)
        params, log = dvae.train(train_ds, tc, arch)
        preds = {t: dvae.predict_trial(params, test_ds.data[idx],
                                       [test_ds.trial_ids[i] for i in idx])
                 for t, idx in trials.items()}
        if model_dir is not None:
            dvae.save_model(params, model_dir)
            dvae.write_training_log(log, model_dir / "train_log.csv")
    out = []
    for t, idx in trials.items():
        out.append((t, test_ds.sexes[idx[0]], float(test_ds.weights[idx[0]]), preds[t]))
    return out


def _fmt(v):
    return "" if v is None else repr(float(v))


def _ratio_tag(ratio):
    return f"{ratio[0]:g}-{ratio[1]:g}"


@dataclass
class SweepResult:
    run_dir: Path
    rows: list[dict]
    n_folds: int
    n_failed: int

    @property
    def failure_fraction(self) -> float:
        return self.n_failed / self.n_folds if self.n_folds else 0.0


def run_experiment(config: ExperimentConfig, dataset: Dataset | None = None) -> SweepResult:
    """Run the full (model x ratio x seed x fold) sweep and write the run directory."""
    if dataset is None:
        if config.dataset is None:
            raise ParameterError("experiment config names no dataset")
        dataset = Dataset.load(config.dataset)
    run_dir = Path(config.output_dir)
    (run_dir / "folds").mkdir(parents=True, exist_ok=True)
    (run_dir / "plots").mkdir(exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=1))

    rows, n_folds, n_failed = [], 0, 0
    for model in config.models:
        for ratio in config.ratios:
            for seed in config.seeds:
                plans = plan_folds(dataset, ratio, seed)
                tag = f"{model}_{_ratio_tag(ratio)}_s{seed}"
                (run_dir / "folds" / f"{tag}.json").write_text(json.dumps(
                    {"roster": [list(r) for r in dataset.subjects],
                     "plans": [asdict(p) for p in plans]}, indent=1))

                def job(plan):
                    mdir = (run_dir / "models" / tag / plan.held_out_subject
                            if config.persist_models else None)
                    try:
                        return run_fold(dataset, plan, model, config, seed, mdir), None
                    except (FairloadError, ArithmeticError, ValueError) as exc:
                        logger.warning("fold %s/%s failed: %s", tag, plan.held_out_subject, exc)
                        return None, exc

                if config.threads > 1:
                    with ThreadPoolExecutor(config.threads) as pool:
                        outcomes = list(pool.map(job, plans))
                else:
                    outcomes = [job(p) for p in plans]

                pooled = []
                triple_rows = []
                for plan, (preds, err) in zip(plans, outcomes):
                    n_folds += 1
                    row = {"model": model, "ratio_m": ratio[0], "ratio_f": ratio[1],
                           "seed": seed, "fold_subject": plan.held_out_subject,
                           "test_sex": plan.held_out_sex}
                    if err is not None:
                        n_failed += 1
                        row.update(n_trials=0, mae=None, status=f"failed: {err}".replace("\n", " "))
                    else:
                        pooled += [(plan.held_out_subject, *p) for p in preds]
                        row.update(n_trials=len(preds),
                                   mae=mae([p[2] for p in preds], [p[3] for p in preds]),
                                   status="ok")
                    triple_rows.append(row)
                sp = prd = nrd = None
                if pooled:
                    g = GroupedPredictions.from_arrays(
                        [p[2] for p in pooled], [p[3] for p in pooled], [p[4] for p in pooled],
                        [p[0] for p in pooled], [p[1] for p in pooled])
                    try:
                        rep = report(g)
                        sp, prd, nrd = rep.sp, rep.prd, rep.nrd
                    except ParameterError as exc:
                        # every fold of one sex failed; fairness metrics are undefined
                        logger.warning("%s: no pooled fairness metrics: %s", tag, exc)
                for row in triple_rows:
                    ok = row["status"] == "ok"
                    row.update(sp=sp if ok else None, prd=prd if ok else None,
                               nrd=nrd if ok else None)
                rows += triple_rows

    write_results(rows, run_dir / "results.csv")
    summarize(run_dir / "results.csv", run_dir)
    return SweepResult(run_dir, rows, n_folds, n_failed)


def write_results(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULTS_HEADER)
        for r in rows:
            w.writerow([r["model"], repr(float(r["ratio_m"])), repr(float(r["ratio_f"])),
                        r["seed"], r["fold_subject"], r["test_sex"], r["n_trials"],
                        _fmt(r["mae"]), _fmt(r["sp"]), _fmt(r["prd"]), _fmt(r["nrd"]),
                        r["status"]])


def read_results(path) -> list[dict]:
    """Parse a results CSV, raising DataError with the offending line number."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != RESULTS_HEADER:
            raise DataError(f"{path}:1: header does not match {','.join(RESULTS_HEADER)}")
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(RESULTS_HEADER):
                raise DataError(f"{path}:{lineno}: expected {len(RESULTS_HEADER)} fields, "
                                f"got {len(rec)}")
            r = dict(zip(RESULTS_HEADER, rec))
            try:
                r["ratio_m"], r["ratio_f"] = float(r["ratio_m"]), float(r["ratio_f"])
                r["seed"] = int(r["seed"])
                r["n_trials"] = int(r["n_trials"])
                for k in ("mae", "sp", "prd", "nrd"):
                    r[k] = float(r[k]) if r[k] != "" else None
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if r["test_sex"] not in ("male", "female"):
                raise DataError(f"{path}:{lineno}: bad test_sex {r['test_sex']!r}")
            rows.append(r)
    return rows


# ---------------------------------------------------------------- summaries


def quartiles(values) -> tuple[float, float, float]:
    """(q1, median, q3) with linear interpolation between order statistics."""
    v = np.asarray(values, dtype=float)
    q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75], method="linear")
    return float(q1), float(med), float(q3)


SUMMARY_HEADER = ["model", "ratio_m", "ratio_f", "metric", "group", "n",
                  "median", "q1", "q3", "min", "max"]


def summary_table(rows) -> list[dict]:
    out = []
    ok = [r for r in rows if r["status"] == "ok"]
    keys = sorted({(r["model"], r["ratio_m"], r["ratio_f"]) for r in ok},
                  key=lambda k: (k[0], -k[1]))

    def add(key, metric, group, values):
        if not values:
            return
        q1, med, q3 = quartiles(values)
        out.append(dict(zip(SUMMARY_HEADER, [key[0], key[1], key[2], metric, group,
                                             len(values), med, q1, q3,
                                             float(min(values)), float(max(values))])))

    for key in keys:
        sel = [r for r in ok if (r["model"], r["ratio_m"], r["ratio_f"]) == key]
        for sex in ("male", "female"):
            add(key, "mae", sex, [r["mae"] for r in sel if r["test_sex"] == sex])
        per_seed = {}
        for r in sel:
            per_seed.setdefault(r["seed"], r)
        for metric in ("sp", "prd", "nrd"):
            add(key, metric, "pooled",
                [r[metric] for r in per_seed.values() if r[metric] is not None])
    return out


def _boxplots(table, metric, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "fairload"
    sel = [r for r in table if r["metric"] == metric]
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(sel) + 2), 3.5))
    stats = [{"label": f"{r['model']}\n{r['ratio_m']:g}:{r['ratio_f']:g}"
                       + ("" if r["group"] == "pooled" else f"\n{r['group']}"),
              "med": r["median"], "q1": r["q1"], "q3": r["q3"],
              "whislo": r["min"], "whishi": r["max"], "fliers": []} for r in sel]
    if stats:
        ax.bxp(stats, showfliers=False)
    ax.set_ylabel(metric.upper())
    ax.tick_params(axis="x", labelsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def summarize(results_csv, out_dir) -> list[dict]:
    """Write ``summary.csv`` and one SVG box plot per metric under ``out_dir``."""
    rows = read_results(results_csv)
    table = summary_table(rows)
    out_dir = Path(out_dir)
    (out_dir / "plots").mkdir(parents=True, exist_ok=True)
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for r in table:
            w.writerow([r[k] if not isinstance(r[k], float) else repr(r[k])
                        for k in SUMMARY_HEADER])
    for metric in ("mae", "sp", "prd", "nrd"):
        _boxplots(table, metric, out_dir / "plots" / f"{metric}.svg")
    return table


def audit_run(run_dir) -> list[str]:
    """Re-check every persisted FoldPlan of a run for held-out leakage."""
    problems = []
    for path in sorted(Path(run_dir, "folds").glob("*.json")):
        doc = json.loads(path.read_text())
        plans = [FoldPlan(**{**d, "requested_ratio": tuple(d["requested_ratio"])})
                 for d in doc["plans"]]
        roster = [tuple(r) for r in doc["roster"]]
        problems += [f"{path.name}: {p}" for p in audit_plans(plans, roster)]
    return problems


# ---------------------------------------------------------------- beta search


def beta_search(dataset: Dataset, config: ExperimentConfig, beta1_grid, beta2_grid,
                n_draws: int, seed: int = 0, objective: str = "gap"):
    """Seeded random search over the ``beta1 x beta2`` grid for the dvae model.

    Each draw runs a dvae-only sweep with ``config``'s ratios and seeds and
    scores it by the mean over (ratio, seed) of ``objective``: ``"gap"``
    (|MAE_male - MAE_female|), ``"sp"`` (|SP|) or ``"mae"``.  Returns the
    draws as dicts sorted best first.
    """
    if objective not in ("gap", "sp", "mae"):
        raise ParameterError(f"unknown objective {objective!r}")
    grid = [(float(a), float(b)) for a in beta1_grid for b in beta2_grid]
    if not grid or n_draws < 1:
        raise ParameterError("need a non-empty grid and n_draws >= 1")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    picks = rng.choice(len(grid), size=min(n_draws, len(grid)), replace=False)
    base = Path(config.output_dir)
    results = []
    for j, i in enumerate(sorted(int(i) for i in picks)):
        b1, b2 = grid[i]
        train = {m: dict(v) for m, v in config.train.items()}
        train.setdefault("dvae", {}).update(beta1=b1, beta2=b2)
        cfg = ExperimentConfig(**{**config.to_dict(), "models": ["dvae"], "train": train,
                                  "output_dir": str(base / f"draw{j:03d}")})
        res = run_experiment(cfg, dataset)
        results.append({"beta1": b1, "beta2": b2, "score": _sweep_score(res.rows, objective),
                        "run_dir": str(res.run_dir)})
    return sorted(results, key=lambda r: (math.isnan(r["score"]), r["score"]))


def _sweep_score(rows, objective):
    ok = [r for r in rows if r["status"] == "ok"]
    scores = []
    for key in sorted({(r["ratio_m"], r["seed"]) for r in ok}):
        sel = [r for r in ok if (r["ratio_m"], r["seed"]) == key]
        by = {s: [r["mae"] for r in sel if r["test_sex"] == s] for s in ("male", "female")}
        if objective == "mae":
            scores.append(float(np.mean(by["male"] + by["female"])))
        elif objective == "sp":
            if sel[0]["sp"] is not None:
                scores.append(abs(sel[0]["sp"]))
        elif by["male"] and by["female"]:
            scores.append(abs(float(np.mean(by["male"]) - np.mean(by["female"]))))
    return float(np.mean(scores)) if scores else float("nan")
