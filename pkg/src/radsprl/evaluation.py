"""Fold planning, k-fold cross-validation and metric reports."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Hashable, Sequence

import numpy as np

from .corpus import ROLES, Corpus, RoleLabel
from .preprocess import Instance, expand_corpus, indicator_instance, tokenize
from .scoring import PRF, RoleScores
from .tagger import TaggerConfig, decode_labels, score_indicators, score_roles, train

log = logging.getLogger(__name__)

SPLIT_MODES = ("instance", "report")


@dataclass(frozen=True)
class FoldPlan:
    """``folds[i]`` is the test fold of round ``i``; round ``i`` validates on fold ``i + 1``."""

    folds: tuple[tuple[int, ...], ...]
    seed: int
    split_by: str = "instance"

    @property
    def k(self) -> int:
        return len(self.folds)

    def test(self, i: int) -> tuple[int, ...]:
        return self.folds[i]

    def val(self, i: int) -> tuple[int, ...]:
        return self.folds[(i + 1) % self.k]

    def train(self, i: int) -> tuple[int, ...]:
        skip = {i, (i + 1) % self.k}
        return tuple(sorted(j for f, fold in enumerate(self.folds) if f not in skip for j in fold))

    def fold_of(self) -> dict[int, int]:
        return {j: f for f, fold in enumerate(self.folds) for j in fold}


def make_folds(
    n: int,
    k: int = 10,
    seed: int = 0,
    groups: Sequence[Hashable] | None = None,
) -> FoldPlan:
    """Shuffle ``range(n)`` by ``seed`` and cut it into ``k`` contiguous folds.

    With ``groups`` (one label per item, e.g. report ids) whole groups are
    shuffled and cut instead, so no group straddles two folds.
    """
    if k < 3:
        raise ValueError("need k >= 3 so that train, validation and test are disjoint")
    rng = np.random.default_rng(seed)
    if groups is None:
        if n < k:
            raise ValueError(f"{n} instances are too few for {k} folds")
        parts = np.array_split(rng.permutation(n), k)
        return FoldPlan(tuple(tuple(int(j) for j in p) for p in parts), seed, "instance")
    if len(groups) != n:
        raise ValueError("one group label per instance is required")
    names = sorted(set(groups), key=str)
    if len(names) < k:
        raise ValueError(f"{len(names)} groups are too few for {k} folds")
    members: dict[Hashable, list[int]] = {g: [] for g in names}
    for j, g in enumerate(groups):
        members[g].append(j)
    order = rng.permutation(len(names))
    parts = np.array_split(order, k)
    folds = tuple(tuple(sorted(j for gi in p for j in members[names[gi]])) for p in parts)
    return FoldPlan(folds, seed, "report")


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    n_train: int
    n_val: int
    n_test: int
    roles: RoleScores | None = None
    indicator: PRF | None = None
    best_epoch: int | None = None
    indicator_best_epoch: int | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        d = {
            "fold": self.fold,
            "n_train": self.n_train,
            "n_val": self.n_val,
            "n_test": self.n_test,
            "best_epoch": self.best_epoch,
            "error": self.error,
        }
        if self.roles is not None:
            d["roles"] = {r.value: _prf_dict(self.roles.roles[r]) for r in ROLES}
            d["overall"] = _prf_dict(self.roles.overall)
        if self.indicator is not None:
            d["indicator"] = _prf_dict(self.indicator)
            d["indicator_best_epoch"] = self.indicator_best_epoch
        return d


def _prf_dict(prf: PRF) -> dict:
    d = prf.to_dict()
    d["defined"] = prf.defined
    return d


@dataclass(frozen=True)
class MeanPRF:
    precision: float
    recall: float
    f1: float
    n_folds: int  # folds where the metric was defined

    def to_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1, "n_folds": self.n_folds}


def mean_prf(scores: Sequence[PRF]) -> MeanPRF | None:
    """Average over folds where the metric is defined; None if it never is."""
    defined = [s for s in scores if s.defined]
    if not defined:
        return None
    n = len(defined)
    return MeanPRF(
        precision=math.fsum(s.precision for s in defined) / n,
        recall=math.fsum(s.recall for s in defined) / n,
        f1=math.fsum(s.f1 for s in defined) / n,
        n_folds=n,
    )


@dataclass
class MetricReport:
    folds: list[FoldResult]
    seed: int
    split_by: str
    config: dict = field(default_factory=dict)

    @property
    def ok_folds(self) -> list[FoldResult]:
        return [f for f in self.folds if f.error is None and f.roles is not None]

    def role_means(self) -> dict[RoleLabel, MeanPRF | None]:
        return {r: mean_prf([f.roles.roles[r] for f in self.ok_folds]) for r in ROLES}

    def overall_mean(self) -> MeanPRF | None:
        """Cross-fold mean of each fold's micro-averaged overall score."""
        return mean_prf([f.roles.overall for f in self.ok_folds])

    def macro_f1(self) -> float | None:
        """Mean over roles of the per-role mean F1, for roles defined somewhere."""
        vals = [m.f1 for m in self.role_means().values() if m is not None]
        return math.fsum(vals) / len(vals) if vals else None

    def indicator_mean(self) -> MeanPRF | None:
        scores = [f.indicator for f in self.folds if f.error is None and f.indicator is not None]
        return mean_prf(scores) if scores else None

    def pooled(self) -> RoleScores:
        """Counts summed over folds; its overall tp is the sum of role tps."""
        total = RoleScores.empty()
        for f in self.ok_folds:
            total = total + f.roles
        return total

    def to_dict(self) -> dict:
        def opt(m):
            return None if m is None else m.to_dict()

        pooled = self.pooled()
        ind = [f.indicator for f in self.folds if f.error is None and f.indicator is not None]
        pooled_ind = sum(ind, PRF()) if ind else None
        return {
            "k": len(self.folds),
            "seed": self.seed,
            "split_by": self.split_by,
            "config": self.config,
            "means": {
                "roles": {r.value: opt(m) for r, m in self.role_means().items()},
                "overall": opt(self.overall_mean()),
                "macro_f1": self.macro_f1(),
                "indicator": opt(self.indicator_mean()),
            },
            "pooled": {
                "roles": {r.value: _prf_dict(pooled.roles[r]) for r in ROLES},
                "overall": _prf_dict(pooled.overall),
                "indicator": None if pooled_ind is None else _prf_dict(pooled_ind),
            },
            "folds": [f.to_dict() for f in self.folds],
            "failed_folds": [f.fold for f in self.folds if f.error is not None],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def format_report(report: MetricReport) -> str:
    """Precision, recall and F1 rows (percent) for each role, the indicator and overall."""
    columns = ["Sp-In", "Trajector", "Landmark", "Diagnosis", "Hedge", "Overall"]
    means = report.role_means()
    cells = [report.indicator_mean()] + [means[r] for r in ROLES] + [report.overall_mean()]
    width = 11
    lines = ["Metrics".ljust(11) + "".join(c.rjust(width) for c in columns)]
    for metric, label in (("precision", "Precision"), ("recall", "Recall"), ("f1", "F1")):
        row = label.ljust(11)
        for m in cells:
            row += ("-" if m is None else f"{100 * getattr(m, metric):.2f}").rjust(width)
        lines.append(row)
    macro = report.macro_f1()
    if macro is not None:
        lines.append(f"Macro-averaged role F1: {100 * macro:.2f}")
    failed = [f.fold for f in report.folds if f.error is not None]
    if failed:
        lines.append(f"Failed folds: {', '.join(map(str, failed))}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------


def fold_seeds(seed: int, k: int) -> list[int]:
    """Independent per-fold training seeds split off the root seed."""
    children = np.random.SeedSequence(seed).spawn(k)
    return [int(c.generate_state(1)[0]) for c in children]


@dataclass
class _FoldJob:
    fold: int
    train: list[Instance]
    val: list[Instance]
    test: list[Instance]
    config: TaggerConfig
    ind_train: list[Instance] | None = None
    ind_val: list[Instance] | None = None
    ind_test: list[Instance] | None = None
    ind_config: TaggerConfig | None = None
    pretrained: str | None = None


def _run_fold(job: _FoldJob) -> FoldResult:
    result = FoldResult(job.fold, len(job.train), len(job.val), len(job.test))
    try:
        model, history = train(job.train, job.val, job.config, job.pretrained)
        result.roles = score_roles(job.test, decode_labels(model, job.test))
        result.best_epoch = history.best_epoch
        if job.ind_train is not None:
            ind_model, ind_hist = train(job.ind_train, job.ind_val, job.ind_config, job.pretrained)
            result.indicator = score_indicators(job.ind_test, decode_labels(ind_model, job.ind_test))
            result.indicator_best_epoch = ind_hist.best_epoch
    except Exception as exc:  # one failing fold must not abort the others
        log.error("fold %d failed: %s", job.fold, exc)
        result.roles = None
        result.indicator = None
        result.error = f"{type(exc).__name__}: {exc}"
    return result


def indicator_folds(
    corpus: Corpus, role_instances: Sequence[Instance], plan: FoldPlan
) -> list[int]:
    """Fold of every sentence for the indicator task.

    A sentence follows its first role instance; sentences without relations
    are dealt round-robin in corpus order.
    """
    fold_of = plan.fold_of()
    first: dict[tuple[str, str], int] = {}
    for j, inst in enumerate(role_instances):
        first.setdefault((inst.source[0], inst.source[1]), fold_of[j])
    out = []
    spare = 0
    for s in corpus.sentences:
        if s.key in first:
            out.append(first[s.key])
        else:
            out.append(spare % plan.k)
            spare += 1
    return out


def cross_validate(
    corpus: Corpus,
    config: TaggerConfig,
    k: int = 10,
    seed: int | None = None,
    split_by: str = "instance",
    with_indicator: bool = False,
    jobs: int = 1,
    pretrained: str | None = None,
    tokenizer=tokenize,
) -> MetricReport:
    """Train and test one roles model per fold (and optionally an indicator model).

    Roles are scored by exact match given gold indicators. ``seed`` defaults
    to ``config.seed`` and drives both the fold shuffle and every fold's
    training seed.
    """
    if split_by not in SPLIT_MODES:
        raise ValueError(f"split_by must be one of {SPLIT_MODES}")
    config = replace(config, task="roles").validate()
    seed = config.seed if seed is None else seed
    instances = expand_corpus(corpus, tokenizer, "roles", strict=True)
    groups = [inst.source[0] for inst in instances] if split_by == "report" else None
    plan = make_folds(len(instances), k, seed, groups)
    seeds = fold_seeds(seed, k)

    if with_indicator:
        sentences = [indicator_instance(s, tokenizer) for s in corpus.sentences]
        s_fold = indicator_folds(corpus, instances, plan)
        by_fold = [[sentences[j] for j in range(len(sentences)) if s_fold[j] == f] for f in range(k)]

    job_list = []
    for i in range(k):
        job = _FoldJob(
            fold=i,
            train=[instances[j] for j in plan.train(i)],
            val=[instances[j] for j in plan.val(i)],
            test=[instances[j] for j in plan.test(i)],
            config=replace(config, seed=seeds[i]),
            pretrained=pretrained,
        )
        if with_indicator:
            val_f, skip = (i + 1) % k, {i, (i + 1) % k}
            job.ind_train = [x for f in range(k) if f not in skip for x in by_fold[f]]
            job.ind_val = by_fold[val_f]
            job.ind_test = by_fold[i]
            job.ind_config = replace(config, task="indicator", seed=seeds[i])
        job_list.append(job)

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, job_list))
    else:
        results = []
        for job in job_list:
            log.info("fold %d/%d: %d train, %d val, %d test", job.fold + 1, k, len(job.train), len(job.val), len(job.test))
            results.append(_run_fold(job))
    cfg = config.to_dict()
    cfg.pop("seed")
    return MetricReport(results, seed, split_by, cfg)
