"""Training-strategy experiments over a multi-source window dataset.

A strategy enumerates *instances* (a set of training sources plus inter
targets). Every instance is trained twice, once per fold; each model is
scored on the unused fold of its training sources (intra) and on every
target source with its holdout removed (inter).
"""
from __future__ import annotations

import csv
import hashlib
import logging
import os
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataio import SourceId, load_session, read_manifest, split, window
from .estimator import CNNClassifier
from .stats import AccuracyStats, aggregate, paired_drops, paired_values, wilcoxon_paired
from .training import TrainConfig

logger = logging.getLogger(__name__)

KINDS = ("single-session", "two-posture", "two-day", "five-day")
POSTURE_PAIRS = ((1, 2), (1, 3), (1, 4))
DAY_PAIRS = ((1, 2), (1, 5), (4, 5))
FIVE_DAYS = (1, 2, 3, 4, 5)
TARGET_DAYS = (6, 7, 8)


class MissingSourcesError(LookupError):
    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__("missing sources: " + ", ".join(str(s) for s in self.missing))


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

@dataclass
class SourceData:
    windows: object  # WindowSet
    split: object  # SessionSplit


class Dataset:
    """Windowed and partitioned sessions keyed by SourceId.

    The holdout of a source depends only on ``split_seed`` and the source, so
    every strategy sees the same test windows.
    """

    def __init__(self, sessions, split_seed=0, win_len=75, stride=18):
        self.split_seed = split_seed
        self._data = {}
        for rec in sessions:
            ws = window(rec, win_len, stride)
            sp = split(ws, seed=source_seed(split_seed, "holdout", rec.source))
            self._data[rec.source] = SourceData(ws, sp)

    @classmethod
    def from_directory(cls, path, split_seed=0, sources=None):
        path = Path(path)
        manifest = read_manifest(path / "manifest.csv")
        wanted = None if sources is None else set(sources)
        recs = []
        for row in manifest:
            if wanted is None or row["source"] in wanted:
                recs.append(load_session(path / row["file"]))
        return cls(recs, split_seed)

    @property
    def sources(self):
        return sorted(self._data)

    def __contains__(self, source):
        return source in self._data

    def __getitem__(self, source) -> SourceData:
        return self._data[source]

    def subset(self, sources):
        out = Dataset([], self.split_seed)
        out._data = {s: self._data[s] for s in sources}
        return out

    def require(self, sources):
        missing = [s for s in sources if s not in self._data]
        if missing:
            raise MissingSourcesError(missing)

    def gather(self, sources, part):
        """Concatenate ``part`` ('fold1', 'fold2', 'both', 'test') windows of ``sources``."""
        xs, ys, ids = [], [], []
        for s in sources:
            d = self._data[s]
            idx = {"fold1": d.split.fold1, "fold2": d.split.fold2,
                   "both": d.split.trainable(), "test": d.split.test}[part]
            xs.append(d.windows.data[idx])
            ys.append(d.windows.labels[idx])
            ids += [(s, int(o)) for o in d.windows.origins[idx]]
        return np.concatenate(xs), np.concatenate(ys), ids


def source_seed(master, purpose, *keys):
    """Stable integer seed for ``purpose`` and keys (independent of hash salting)."""
    text = "|".join([str(master), purpose] + [str(k) for k in keys])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


# ---------------------------------------------------------------------------
# strategies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Target:
    source: SourceId
    kind: str  # "inter-posture" or "inter-day"


@dataclass(frozen=True)
class StrategyInstance:
    strategy: str
    subject: int
    train_sources: tuple
    targets: tuple

    @property
    def id(self):
        return "+".join(str(s) for s in self.train_sources)

    @property
    def label(self):
        """Train-set label as in the result tables, e.g. ``P1+P3`` or ``D1-D5``."""
        days = sorted({s.day for s in self.train_sources})
        postures = sorted({s.posture for s in self.train_sources})
        if len(postures) > 1:
            return "+".join(f"P{p}" for p in postures)
        if len(days) == 5 and days == list(range(days[0], days[0] + 5)):
            return f"D{days[0]}-D{days[-1]}"
        if len(days) > 1:
            return "+".join(f"D{d}" for d in days)
        return f"D{days[0]}"


@dataclass(frozen=True)
class StrategySpec:
    """Which instances a strategy trains. ``None`` selectors mean "all"."""

    kind: str
    subjects: tuple | None = None
    days: tuple | None = None
    postures: tuple | None = None
    posture_pairs: tuple = POSTURE_PAIRS
    day_sets: tuple = DAY_PAIRS
    target_days: tuple = TARGET_DAYS
    # single-session: models trained on this day are also scored on other days
    reference_day: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}; choose from {', '.join(KINDS)}")

    @property
    def name(self):
        return self.kind

    def _keep(self, value, selector):
        return selector is None or value in selector

    def instances(self, sources):
        """Instances whose training sources are all in ``sources``."""
        have = set(sources)
        subjects = sorted({s.subject for s in have if self._keep(s.subject, self.subjects)})
        out = []
        if self.kind == "single-session":
            for s in sorted(have):
                if not (self._keep(s.subject, self.subjects) and self._keep(s.day, self.days)
                        and self._keep(s.posture, self.postures)):
                    continue
                targets = [Target(t, "inter-posture") for t in sorted(have)
                           if t.subject == s.subject and t.day == s.day and t.posture != s.posture]
                if s.day == self.reference_day:
                    targets += [Target(t, "inter-day") for t in sorted(have)
                                if t.subject == s.subject and t.posture == s.posture and t.day != s.day]
                out.append(StrategyInstance(self.kind, s.subject, (s,), tuple(targets)))
        elif self.kind == "two-posture":
            days = sorted({s.day for s in have if self._keep(s.day, self.days)})
            for u in subjects:
                for d in days:
                    for pair in self.posture_pairs:
                        train = tuple(SourceId(u, d, p) for p in pair)
                        if not all(t in have for t in train):
                            continue
                        targets = tuple(Target(t, "inter-posture") for t in sorted(have)
                                        if t.subject == u and t.day == d and t.posture not in pair)
                        out.append(StrategyInstance(self.kind, u, train, targets))
        else:
            day_sets = (FIVE_DAYS,) if self.kind == "five-day" else self.day_sets
            postures = sorted({s.posture for s in have if self._keep(s.posture, self.postures)})
            for u in subjects:
                for p in postures:
                    for days in day_sets:
                        train = tuple(SourceId(u, d, p) for d in days)
                        if not all(t in have for t in train):
                            continue
                        targets = tuple(Target(t, "inter-day") for t in sorted(have)
                                        if t.subject == u and t.posture == p and t.day in self.target_days
                                        and t.day not in days)
                        out.append(StrategyInstance(self.kind, u, train, targets))
        return out


# ---------------------------------------------------------------------------
# cells and jobs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReportCell:
    strategy: str
    instance: str
    train_set: str
    subject: int
    day: int
    posture: int
    fold: str
    eval_kind: str  # intra | inter-posture | inter-day (prefixed "test-" after retraining)
    target: str
    accuracy: float
    n_windows: int

    def sort_key(self):
        return (self.strategy, self.subject, self.instance, self.fold, self.eval_kind, self.target)

    @property
    def model_key(self):
        return (self.strategy, self.instance, self.fold)


CELL_FIELDS = [f for f in ReportCell.__dataclass_fields__]


@dataclass
class JobResult:
    strategy: str
    instance: str
    fold: str
    cells: list = field(default_factory=list)
    curve: object = None
    error: str | None = None


def _classifier(config: TrainConfig, seed):
    return CNNClassifier(lr=config.lr, n_minibatches=config.n_minibatches, epochs=config.epochs,
                         lr_step_size=config.lr_step_size, lr_gamma=config.lr_gamma,
                         weight_decay=config.weight_decay, decay_all_params=config.decay_all_params,
                         dtype=config.dtype, random_state=seed)


def _accuracy(clf, x, y):
    return float((clf.predict(x) == y).mean())


def _anchor(inst):
    s = inst.train_sources[0]
    return s.day, s.posture


def run_job(dataset: Dataset, inst: StrategyInstance, fold, config: TrainConfig, seed=0,
            curves=True):
    """Train one model of ``inst`` and score it; ``fold`` is 1, 2 or "both".

    ``fold="both"`` trains on fold1 and fold2 together and scores the holdout
    windows of the inter targets.
    """
    fold_name = str(fold)
    result = JobResult(inst.strategy, inst.id, fold_name)
    try:
        job_seed = source_seed(seed, "job", inst.strategy, inst.id, fold_name)
        day, posture = _anchor(inst)
        base = dict(strategy=inst.strategy, instance=inst.id, train_set=inst.label,
                    subject=inst.subject, fold=fold_name)
        if fold == "both":
            x, y, _ = dataset.gather(inst.train_sources, "both")
            clf = _classifier(config, job_seed).fit(x, y)
            for t in inst.targets:
                xt, yt, _ = dataset.gather([t.source], "test")
                result.cells.append(ReportCell(**base, day=t.source.day, posture=t.source.posture,
                                               eval_kind="test-" + t.kind, target=str(t.source),
                                               accuracy=_accuracy(clf, xt, yt), n_windows=len(yt)))
            result.curve = clf.learning_curve_
            return result
        train_part, other = (f"fold{fold}", f"fold{3 - int(fold)}")
        x, y, _ = dataset.gather(inst.train_sources, train_part)
        xv, yv, _ = dataset.gather(inst.train_sources, other)
        clf = _classifier(config, job_seed).fit(x, y, eval_set=(xv, yv) if curves else None)
        result.curve = clf.learning_curve_
        result.cells.append(ReportCell(**base, day=day, posture=posture, eval_kind="intra", target=inst.id,
                                       accuracy=_accuracy(clf, xv, yv), n_windows=len(yv)))
        for t in inst.targets:
            xt, yt, _ = dataset.gather([t.source], "both")
            result.cells.append(ReportCell(**base, day=t.source.day, posture=t.source.posture,
                                           eval_kind=t.kind, target=str(t.source),
                                           accuracy=_accuracy(clf, xt, yt), n_windows=len(yt)))
    except Exception as exc:  # recorded and skipped by the caller
        logger.exception("job %s %s fold %s failed", inst.strategy, inst.id, fold_name)
        result.error = f"{type(exc).__name__}: {exc}"
        result.cells = []
    return result


def plan_jobs(dataset_sources, specs, folds=(1, 2)):
    jobs = []
    for spec in specs:
        for inst in spec.instances(dataset_sources):
            for f in folds:
                jobs.append((inst, f))
    return jobs


def _run_one(args):
    dataset, inst, fold, config, seed, curves = args
    return run_job(dataset, inst, fold, config, seed, curves)


def execute(dataset: Dataset, jobs, config: TrainConfig, seed=0, n_workers=1, curves=True):
    """Run ``(instance, fold)`` jobs, serially or in worker processes.

    Results come back sorted by (strategy, instance, fold) whatever order the
    workers finish in.
    """
    for inst, _ in jobs:
        dataset.require(inst.train_sources + tuple(t.source for t in inst.targets))
    args = []
    for inst, fold in jobs:
        needed = inst.train_sources + tuple(t.source for t in inst.targets)
        args.append((dataset.subset(needed), inst, fold, config, seed, curves))
    if n_workers <= 1 or len(args) <= 1:
        results = [_run_one(a) for a in args]
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_run_one, args))
    return sorted(results, key=lambda r: (r.strategy, r.instance, r.fold))


def run_strategy(dataset: Dataset, spec: StrategySpec, config: TrainConfig | None = None, seed=0,
                 n_workers=1, curves=True):
    """All cells of ``spec`` (two fold-swapped models per instance), sorted."""
    config = config or TrainConfig()
    results = execute(dataset, plan_jobs(dataset.sources, [spec]), config, seed, n_workers, curves)
    failed = [r for r in results if r.error]
    if failed:
        raise RuntimeError(f"{len(failed)} training job(s) failed; first: {failed[0].error}")
    return sort_cells(c for r in results for c in r.cells)


def retrain_and_test(dataset: Dataset, spec: StrategySpec, config: TrainConfig | None = None, seed=0,
                     n_workers=1):
    """Retrain every instance on both folds and score the targets' holdout windows.

    Returns ``(cells, {eval_kind: AccuracyStats})``.
    """
    config = config or TrainConfig()
    results = execute(dataset, plan_jobs(dataset.sources, [spec], folds=("both",)), config, seed,
                      n_workers, curves=False)
    failed = [r for r in results if r.error]
    if failed:
        raise RuntimeError(f"{len(failed)} retraining job(s) failed; first: {failed[0].error}")
    cells = sort_cells(c for r in results for c in r.cells)
    return cells, aggregate(cells, "eval_kind") if cells else {}


def sort_cells(cells):
    return sorted(cells, key=ReportCell.sort_key)


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------

def select(cells, **conditions):
    out = []
    for c in cells:
        ok = True
        for k, v in conditions.items():
            val = getattr(c, k)
            if callable(v):
                ok = v(val)
            elif isinstance(v, (set, frozenset, list, tuple)):
                ok = val in v
            else:
                ok = val == v
            if not ok:
                break
        if ok:
            out.append(c)
    return out


def drop_stats(cells, inter_kind):
    """Drop ``intra - inter`` per trained model, paired on (strategy, instance, fold)."""
    intra = {c.model_key: c.accuracy for c in cells if c.eval_kind == "intra"}
    inter = defaultdict(list)
    for c in cells:
        if c.eval_kind == inter_kind:
            inter[c.model_key].append(c.accuracy)
    drops = paired_drops(intra, inter)
    return AccuracyStats.from_values(drops.values()) if drops else None


def strategy_table(cells, inter_kind):
    """Rows of (train set, intra, inter, drop) statistics per train-set label."""
    rows = []
    for label in sorted({c.train_set for c in cells}):
        sub = [c for c in cells if c.train_set == label]
        intra = [c.accuracy for c in sub if c.eval_kind == "intra"]
        inter = [c.accuracy for c in sub if c.eval_kind == inter_kind]
        if not intra and not inter:
            continue
        rows.append({
            "train_set": label,
            "intra": AccuracyStats.from_values(intra) if intra else None,
            "inter": AccuracyStats.from_values(inter) if inter else None,
            "drop": drop_stats(sub, inter_kind),
        })
    return rows


def _pct(v):
    return "" if v is None or v != v else f"{100 * v:.1f}"


def write_table(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["train_set", "intra_mu_se", "intra_sigma", "inter_mu_se", "inter_sigma", "drop", "n_intra", "n_inter"])
        for r in rows:
            intra, inter, drop = r["intra"], r["inter"], r["drop"]
            w.writerow([
                r["train_set"],
                intra.pm() if intra else "", _pct(intra.std) if intra else "",
                inter.pm() if inter else "", _pct(inter.std) if inter else "",
                _pct(drop.mean) if drop else "",
                intra.n if intra else 0, inter.n if inter else 0,
            ])


def write_cells(cells, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CELL_FIELDS)
        w.writeheader()
        for c in sort_cells(cells):
            row = asdict(c)
            row["accuracy"] = repr(float(c.accuracy))
            w.writerow(row)


def read_cells(path):
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(ReportCell(
                strategy=row["strategy"], instance=row["instance"], train_set=row["train_set"],
                subject=int(row["subject"]), day=int(row["day"]), posture=int(row["posture"]),
                fold=row["fold"], eval_kind=row["eval_kind"], target=row["target"],
                accuracy=float(row["accuracy"]), n_windows=int(row["n_windows"])))
    return out


def compare(cells_a, cells_b, kind, key_fields=("subject", "fold", "target")):
    """Wilcoxon comparison of two strategies on ``kind`` cells paired by ``key_fields``."""
    a = [c for c in cells_a if c.eval_kind == kind]
    b = [c for c in cells_b if c.eval_kind == kind]
    keys, va, vb = paired_values(a, b, key_fields)
    if len(keys) == 0:
        raise ValueError("the two cell sets share no paired keys")
    return {"n": len(keys), "mean_a": float(va.mean()), "mean_b": float(vb.mean()),
            "p_value": wilcoxon_paired(va, vb)}


def default_workers():
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
