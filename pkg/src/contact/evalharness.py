"""Experiment design and statistics: balancing, stratified CV, the six-cell
genre matrix, per-class and aggregate metrics, exact-match ratio, and McNemar
significance testing of adapted-vs-baseline predictions.
"""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DataError
from .labels import ARGUMENT_CLASSES, LabeledPost
from .model import ModelState
from .training import TrainConfig, finetune_arguments, finetune_stance, predict_proba

TASKS = ("stance", "arguments")
SETTINGS = (
    "same_twitter",
    "same_facebook",
    "mixed",
    "cross_tw_to_fb",
    "cross_fb_to_tw",
    "mixed_eval_twitter",
    "mixed_eval_facebook",
)
CROSS_SETTINGS = ("cross_tw_to_fb", "cross_fb_to_tw")
# (fine-tune, test) rows in presentation order for the full matrix
ROW_ORDER = (
    ("twitter", "twitter"),
    ("twitter", "facebook"),
    ("facebook", "facebook"),
    ("facebook", "twitter"),
    ("both", "twitter"),
    ("both", "facebook"),
)
VARIANTS = ("baseline", "adapted")
DEFAULT_FOLDS = {"stance": 10, "arguments": 5}
DECISION_THRESHOLD = 0.5


@dataclass(frozen=True)
class ExperimentSpec:
    """One cell (or the whole matrix) of the genre-transfer experiment grid."""

    task: str
    setting: str
    folds: int = 0  # 0 -> task default (10 stance / 5 arguments)
    seed: int = 0
    variant: str = "both"  # which models get fine-tuned; "both" enables McNemar

    def __post_init__(self):
        if self.task not in TASKS:
            raise DataError(f"unknown task {self.task!r}")
        if self.setting not in SETTINGS + ("all",):
            raise DataError(f"unknown setting {self.setting!r}")
        if self.folds == 0:
            object.__setattr__(self, "folds", DEFAULT_FOLDS[self.task])
        if self.folds < 2:
            raise DataError("folds must be >= 2")
        if self.variant not in VARIANTS + ("both",):
            raise DataError(f"unknown variant {self.variant!r}")


@dataclass(frozen=True)
class ContingencyTable:
    """Counts of (baseline correct?, candidate correct?) over identical items."""

    n00: int
    n01: int
    n10: int
    n11: int

    def __post_init__(self):
        if min(self.n00, self.n01, self.n10, self.n11) < 0:
            raise DataError("contingency counts must be nonnegative")

    @property
    def b(self) -> int:
        """Baseline right, candidate wrong."""
        return self.n10

    @property
    def c(self) -> int:
        """Baseline wrong, candidate right."""
        return self.n01

    @property
    def total(self) -> int:
        return self.n00 + self.n01 + self.n10 + self.n11

    @classmethod
    def from_correctness(
        cls, baseline_correct: Sequence[bool], candidate_correct: Sequence[bool]
    ) -> "ContingencyTable":
        if len(baseline_correct) != len(candidate_correct):
            raise ValueError("correctness vectors differ in length")
        n = {(0, 0): 0, (0, 1): 0, (1, 0): 0, (1, 1): 0}
        for bc, cc in zip(baseline_correct, candidate_correct):
            n[(int(bool(bc)), int(bool(cc)))] += 1
        return cls(n00=n[(0, 0)], n01=n[(0, 1)], n10=n[(1, 0)], n11=n[(1, 1)])


# ----------------------------------------------------------------- sampling


def balance_subset(
    data: Sequence[LabeledPost], per_class_per_platform: int, seed: int
) -> list[LabeledPost]:
    """Uniform per-(class, platform)-cell downsample without replacement."""
    if per_class_per_platform < 0:
        raise ValueError("per_class_per_platform must be >= 0")
    if per_class_per_platform == 0:
        return []
    cells: dict[tuple[str, str], list[int]] = {}
    for i, post in enumerate(data):
        cells.setdefault((post.stance2, post.platform), []).append(i)
    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    for stance in ("hesitant", "not_hesitant"):
        for platform in ("twitter", "facebook"):
            idx = cells.get((stance, platform), [])
            if len(idx) < per_class_per_platform:
                raise DataError(
                    f"cell ({stance}, {platform}) holds {len(idx)} posts; "
                    f"{per_class_per_platform} requested"
                )
            chosen.extend(
                rng.choice(idx, size=per_class_per_platform, replace=False).tolist()
            )
    return [data[i] for i in sorted(chosen)]


def make_folds(
    data: Sequence[LabeledPost],
    k: int,
    stratify_key: Callable[[LabeledPost], tuple] | None = None,
    seed: int = 0,
) -> list[list[LabeledPost]]:
    """Stratified partition into k folds; per-stratum counts differ by <= 1.

    The default stratum is (stance2, platform). Strata smaller than k trigger
    a relaxation to the label-only key, with a warning.
    """
    if k < 2:
        raise DataError("k must be >= 2")
    if k > len(data):
        raise DataError(f"k={k} exceeds the {len(data)} available posts")
    key = stratify_key or (lambda p: (p.stance2, p.platform))

    def group(fn):
        strata: dict[tuple, list[int]] = {}
        for i, post in enumerate(data):
            strata.setdefault(fn(post), []).append(i)
        return strata

    strata = group(key)
    if any(len(v) < k for v in strata.values()):
        warnings.warn(
            f"stratum smaller than k={k}; relaxing stratification to label only",
            UserWarning,
            stacklevel=2,
        )
        strata = group(lambda p: key(p)[:1])

    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    for s_idx, s_key in enumerate(sorted(strata)):
        idx = np.array(strata[s_key])
        rng.shuffle(idx)
        offset = s_idx % k  # rotate so remainders spread over folds
        for j, i in enumerate(idx):
            folds[(j + offset) % k].append(int(i))
    return [[data[i] for i in sorted(f)] for f in folds]


# ------------------------------------------------------------------- metrics


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def binary_metrics(
    gold: Sequence[bool], pred: Sequence[bool]
) -> tuple[float, float, float]:
    """(precision, recall, F1) on the positive class, with 0/0 -> 0."""
    if len(gold) != len(pred):
        raise ValueError("gold and pred differ in length")
    tp = sum(1 for g, p in zip(gold, pred) if g and p)
    fp = sum(1 for g, p in zip(gold, pred) if not g and p)
    fn = sum(1 for g, p in zip(gold, pred) if g and not p)
    return _prf(tp, fp, fn)


def multilabel_metrics(
    gold: Sequence[Iterable[str]],
    pred: Sequence[Iterable[str]],
    classes: Sequence[str] = ARGUMENT_CLASSES,
) -> dict:
    """Per-class P/R/F plus micro/macro/weighted/samples aggregates and EMR.

    Conventions: per-class 0/0 -> 0; samples averaging scores an example as
    all-1 when both sets are empty and precision 0 when the prediction is
    empty but the gold set is not; EMR is the fraction of exact set matches.
    """
    if len(gold) != len(pred):
        raise ValueError("gold and pred differ in length")
    classes = list(classes)
    known = set(classes)
    gold_sets = [set(g) for g in gold]
    pred_sets = [set(p) for p in pred]
    for sets in (gold_sets, pred_sets):
        for s in sets:
            unknown = s - known
            if unknown:
                raise DataError(f"unknown label(s) {sorted(unknown)}")

    per_class = {}
    tp_sum = fp_sum = fn_sum = 0
    for c in classes:
        tp = sum(1 for g, p in zip(gold_sets, pred_sets) if c in g and c in p)
        fp = sum(1 for g, p in zip(gold_sets, pred_sets) if c not in g and c in p)
        fn = sum(1 for g, p in zip(gold_sets, pred_sets) if c in g and c not in p)
        precision, recall, f1 = _prf(tp, fp, fn)
        per_class[c] = {
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "support": tp + fn,
        }
        tp_sum += tp
        fp_sum += fp
        fn_sum += fn

    micro_p, micro_r, micro_f = _prf(tp_sum, fp_sum, fn_sum)
    n_classes = len(classes)
    macro = {
        m: sum(per_class[c][m] for c in classes) / n_classes
        for m in ("precision", "recall", "f1")
    }
    total_support = sum(per_class[c]["support"] for c in classes)
    if total_support:
        weighted = {
            m: sum(per_class[c][m] * per_class[c]["support"] for c in classes)
            / total_support
            for m in ("precision", "recall", "f1")
        }
    else:
        weighted = {"precision": 0.0, "recall": 0.0, "f1": 0.0}

    sp = sr = sf = 0.0
    exact = 0
    for g, p in zip(gold_sets, pred_sets):
        inter = len(g & p)
        ep = inter / len(p) if p else (1.0 if not g else 0.0)
        er = inter / len(g) if g else (1.0 if not p else 0.0)
        ef = 2 * ep * er / (ep + er) if ep + er else 0.0
        sp += ep
        sr += er
        sf += ef
        exact += g == p
    n = len(gold_sets)
    samples = {
        "precision": sp / n if n else 0.0,
        "recall": sr / n if n else 0.0,
        "f1": sf / n if n else 0.0,
    }

    return {
        "per_class": per_class,
        "micro": {"precision": micro_p, "recall": micro_r, "f1": micro_f},
        "macro": macro,
        "weighted": weighted,
        "samples": samples,
        "emr": exact / n if n else 0.0,
    }


# ------------------------------------------------------------------- mcnemar


def mcnemar(table: ContingencyTable, method: str = "exact") -> float:
    """Two-sided McNemar p-value from the discordant counts b and c.

    ``exact``: binomial test on max(b, c) successes out of b + c at p = 0.5,
    doubled and capped at 1. ``chi2_cc``: continuity-corrected statistic
    max(|b - c| - 1, 0)^2 / (b + c) against chi-square(1); the correction is
    clamped at zero so the p-value stays monotone in |b - c|. b + c = 0
    yields p = 1 for either method.
    """
    b, c = table.b, table.c
    n = b + c
    if n == 0:
        return 1.0
    if method == "exact":
        k = max(b, c)
        tail = sum(math.comb(n, i) for i in range(k, n + 1))
        return min(1.0, 2.0 * tail / 2.0**n)
    if method == "chi2_cc":
        return chi2_survival_1df(chi2_cc_statistic(table))
    raise ValueError(f"unknown McNemar method {method!r}")


def chi2_cc_statistic(table: ContingencyTable) -> float:
    """Continuity-corrected McNemar statistic max(|b-c|-1, 0)^2 / (b+c)."""
    b, c = table.b, table.c
    if b + c == 0:
        return 0.0
    return max(abs(b - c) - 1, 0) ** 2 / (b + c)


def chi2_survival_1df(x: float) -> float:
    """P(X > x) for X ~ chi-square with one degree of freedom."""
    if x <= 0:
        return 1.0
    return math.erfc(math.sqrt(x / 2.0))


def stars(p: float) -> str:
    """Significance annotation: *** < .001, ** < .01, * < .05, else empty."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p-value {p} outside [0, 1]")
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


# ------------------------------------------------------------------- reports


@dataclass
class ExperimentReport:
    """Everything needed to render one task's genre matrix and star table."""

    task: str
    variants: tuple[str, str]
    folds: int
    seed: int
    mcnemar_method: str
    settings: list[dict] = field(default_factory=list)
    classes: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "task": self.task,
            "classes": list(self.classes),
            "variants": list(self.variants),
            "folds": self.folds,
            "seed": self.seed,
            "mcnemar_method": self.mcnemar_method,
            "settings": self.settings,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentReport":
        try:
            return cls(
                task=obj["task"],
                variants=tuple(obj["variants"]),
                folds=obj["folds"],
                seed=obj["seed"],
                mcnemar_method=obj.get("mcnemar_method", "exact"),
                settings=obj["settings"],
                classes=list(obj.get("classes", [])),
            )
        except KeyError as exc:
            raise DataError(f"experiment report missing field {exc}") from exc


def _mean_std(values: list[float], single: bool) -> tuple[float, float | None]:
    mean = float(np.mean(values))
    return mean, (None if single else float(np.std(values)))


def _summarize_binary(fold_metrics: list[tuple[float, float, float]], single: bool):
    rows = [
        {"precision": p, "recall": r, "f1": f} for p, r, f in fold_metrics
    ]
    out = {"folds": rows, "mean": {}, "std": None if single else {}}
    for m in ("precision", "recall", "f1"):
        mean, std = _mean_std([row[m] for row in rows], single)
        out["mean"][m] = mean
        if std is not None:
            out["std"][m] = std
    return out

def _summarize_multilabel(fold_metrics: list[dict], single: bool):
    per_class: dict = {}
    for c in ARGUMENT_CLASSES:
        folds = [fm["per_class"][c] for fm in fold_metrics]
        entry = {
            "folds": [
                {m: f[m] for m in ("precision", "recall", "f1")} for f in folds
            ],
            "mean": {},
            "std": None if single else {},
            "support": int(sum(f["support"] for f in folds)),
        }
        for m in ("precision", "recall", "f1"):
            mean, std = _mean_std([f[m] for f in folds], single)
            entry["mean"][m] = mean
            if std is not None:
                entry["std"][m] = std
        per_class[c] = entry
    aggregates: dict = {}
    for agg in ("micro", "macro", "weighted", "samples"):
        entry = {
            "folds": [
                {m: fm[agg][m] for m in ("precision", "recall", "f1")}
                for fm in fold_metrics
            ],
            "mean": {},
            "std": None if single else {},
        }
        for m in ("precision", "recall", "f1"):
            mean, std = _mean_std([fm[agg][m] for fm in fold_metrics], single)
            entry["mean"][m] = mean
            if std is not None:
                entry["std"][m] = std
        aggregates[agg] = entry
    emr_values = [fm["emr"] for fm in fold_metrics]
    emr_mean, emr_std = _mean_std(emr_values, single)
    return {
        "per_class": per_class,
        "aggregates": aggregates,
        "emr": {"folds": emr_values, "mean": emr_mean, "std": emr_std},
    }


# ---------------------------------------------------------------- run matrix


def _units_for(setting: str) -> list[str]:
    if setting == "all":
        return ["same_twitter", "cross_tw_to_fb", "same_facebook",
                "cross_fb_to_tw", "mixed"]
    if setting in ("mixed_eval_twitter", "mixed_eval_facebook"):
        return ["mixed"]
    return [setting]


def _rows_for(setting: str) -> list[tuple[str, str]]:
    rows = {
        "same_twitter": [("twitter", "twitter")],
        "same_facebook": [("facebook", "facebook")],
        "cross_tw_to_fb": [("twitter", "facebook")],
        "cross_fb_to_tw": [("facebook", "twitter")],
        "mixed": [("both", "twitter"), ("both", "facebook")],
        "mixed_eval_twitter": [("both", "twitter")],
        "mixed_eval_facebook": [("both", "facebook")],
    }
    if setting == "all":
        return list(ROW_ORDER)
    return rows[setting]


def _finetune_and_predict(task, model, train_posts, test_texts, cfg):
    if task == "stance":
        params = finetune_stance(model, train_posts, cfg)
        probs = predict_proba(params, model.vocab, test_texts, "stance")
        return (probs >= DECISION_THRESHOLD).tolist()
    params = finetune_arguments(model, train_posts, cfg)
    probs = predict_proba(params, model.vocab, test_texts, "arguments")
    flags = probs >= DECISION_THRESHOLD
    return [
        frozenset(c for j, c in enumerate(ARGUMENT_CLASSES) if flags[i, j])
        for i in range(len(test_texts))
    ]


def _fold_job(args):
    (task, baseline, adapted, train_posts, test_posts, cfg) = args
    test_texts = [p.text for p in test_posts]
    return {
        "baseline": _finetune_and_predict(task, baseline, train_posts, test_texts, cfg),
        "adapted": _finetune_and_predict(task, adapted, train_posts, test_texts, cfg),
    }


def _platform_subset(data, platform):
    subset = [p for p in data if p.platform == platform]
    if not subset:
        raise DataError(f"no {platform} posts available for the requested setting")
    return subset


def run_matrix(
    spec: ExperimentSpec,
    baseline: ModelState,
    adapted: ModelState,
    data: Sequence[LabeledPost],
    train_cfg: TrainConfig | None = None,
    jobs: int = 1,
    balance_per_cell: int | str | None = "auto",
) -> ExperimentReport:
    """Fine-tune + evaluate both model variants over the requested settings.

    Same- and mixed-genre settings run stratified CV; cross-genre settings
    use one train/test split (train on all of one platform, test on all of
    the other). Baseline and adapted predictions are paired item by item
    into contingency tables: one McNemar test per setting for stance, one
    per class for arguments. For stance the data is balanced by
    (class, platform) cell first (``balance_per_cell="auto"`` downsamples to
    the smallest cell); argument runs use all data.
    """
    data = list(data)
    if not data:
        raise DataError("no labeled data")
    base_cfg = train_cfg or TrainConfig()

    if spec.task == "stance" and balance_per_cell is not None:
        if balance_per_cell == "auto":
            counts: dict = {}
            for p in data:
                counts[(p.stance2, p.platform)] = counts.get((p.stance2, p.platform), 0) + 1
            if len(counts) < 4:
                raise DataError("stance balancing needs all four (class, platform) cells")
            balance_per_cell = min(counts.values())
        data = balance_subset(data, int(balance_per_cell), spec.seed)

    if spec.task == "stance":
        strat = lambda p: (p.stance2, p.platform)
    else:
        strat = lambda p: (bool(p.arguments), p.platform)

    units = _units_for(spec.setting)
    executions = []  # (unit, fold_idx, train_posts, test_posts)
    for unit in units:
        if unit in CROSS_SETTINGS:
            src = "twitter" if unit == "cross_tw_to_fb" else "facebook"
            dst = "facebook" if unit == "cross_tw_to_fb" else "twitter"
            executions.append(
                (unit, 0, _platform_subset(data, src), _platform_subset(data, dst))
            )
            continue
        if unit == "same_twitter":
            subset = _platform_subset(data, "twitter")
        elif unit == "same_facebook":
            subset = _platform_subset(data, "facebook")
        else:  # mixed
            _platform_subset(data, "twitter")
            _platform_subset(data, "facebook")
            subset = data
        folds = make_folds(
            subset, spec.folds, stratify_key=strat,
            seed=int(np.random.SeedSequence([spec.seed, units.index(unit)]).generate_state(1)[0]),
        )
        for fi, fold in enumerate(folds):
            train_posts = [p for j, f in enumerate(folds) if j != fi for p in f]
            executions.append((unit, fi, train_posts, fold))

    cfg = base_cfg
    job_args = [
        (spec.task, baseline, adapted, train, test, cfg)
        for (_, _, train, test) in executions
    ]
    if jobs > 1 and len(job_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_fold_job, job_args))
    else:
        results = [_fold_job(a) for a in job_args]

    # regroup predictions: unit -> fold -> (test_posts, preds per variant)
    by_unit: dict[str, list] = {}
    for (unit, fi, _, test_posts), preds in zip(executions, results):
        by_unit.setdefault(unit, []).append((fi, test_posts, preds))

    report = ExperimentReport(
        task=spec.task,
        variants=VARIANTS,
        folds=spec.folds,
        seed=spec.seed,
        mcnemar_method="exact",
        classes=list(ARGUMENT_CLASSES) if spec.task == "arguments" else [],
    )

    for train_label, test_label in _rows_for(spec.setting):
        unit = {
            ("twitter", "twitter"): "same_twitter",
            ("facebook", "facebook"): "same_facebook",
            ("twitter", "facebook"): "cross_tw_to_fb",
            ("facebook", "twitter"): "cross_fb_to_tw",
            ("both", "twitter"): "mixed",
            ("both", "facebook"): "mixed",
        }[(train_label, test_label)]
        single = unit in CROSS_SETTINGS
        fold_rows = sorted(by_unit[unit], key=lambda t: t[0])

        # restrict each fold's test items to the row's platform
        per_fold: list[tuple[list[LabeledPost], dict]] = []
        for _, test_posts, preds in fold_rows:
            keep = [
                i for i, p in enumerate(test_posts)
                if test_label == "both" or p.platform == test_label
            ]
            per_fold.append(
                (
                    [test_posts[i] for i in keep],
                    {v: [preds[v][i] for i in keep] for v in VARIANTS},
                )
            )

        row: dict = {
            "train": train_label,
            "test": test_label,
            "kind": "single" if single else "cv",
            "n_test": sum(len(posts) for posts, _ in per_fold),
            "rows": {},
        }
        pooled_gold: list = []
        pooled_preds: dict = {v: [] for v in VARIANTS}
        for variant in VARIANTS:
            fold_metrics = []
            for posts, preds in per_fold:
                if spec.task == "stance":
                    gold = [p.hesitant for p in posts]
                    fold_metrics.append(binary_metrics(gold, preds[variant]))
                else:
                    gold = [p.arguments for p in posts]
                    fold_metrics.append(multilabel_metrics(gold, preds[variant]))
            if spec.task == "stance":
                row["rows"][variant] = _summarize_binary(fold_metrics, single)
            else:
                row["rows"][variant] = _summarize_multilabel(fold_metrics, single)
        for posts, preds in per_fold:
            pooled_gold.extend(posts)
            for v in VARIANTS:
                pooled_preds[v].extend(preds[v])

        if spec.task == "stance":
            gold = [p.hesitant for p in pooled_gold]
            correct = {
                v: [g == pr for g, pr in zip(gold, pooled_preds[v])] for v in VARIANTS
            }
            table = ContingencyTable.from_correctness(
                correct["baseline"], correct["adapted"]
            )
            p_value = mcnemar(table, "exact")
            row["comparison"] = {
                "b": table.b, "c": table.c,
                "p_value": p_value, "stars": stars(p_value),
            }
        else:
            comparison = {}
            for j, cls_name in enumerate(ARGUMENT_CLASSES):
                correct = {}
                for v in VARIANTS:
                    correct[v] = [
                        (cls_name in g.arguments) == (cls_name in pr)
                        for g, pr in zip(pooled_gold, pooled_preds[v])
                    ]
                table = ContingencyTable.from_correctness(
                    correct["baseline"], correct["adapted"]
                )
                p_value = mcnemar(table, "exact")
                comparison[cls_name] = {
                    "b": table.b, "c": table.c,
                    "p_value": p_value, "stars": stars(p_value),
                }
            row["comparison"] = comparison
        report.settings.append(row)
    return report
