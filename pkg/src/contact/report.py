"""Report rendering: schema validation, fixed-width tables, TSV, figures.

The plain-text tables mirror the genre matrix: one positive-class block for
stance runs, and for argument runs a macro+EMR summary, per-class blocks per
variant, and a per-class significance table. Alongside the text, the report
path writes tab-separated metric/significance files and matplotlib figures.
"""
from __future__ import annotations

from pathlib import Path

import jsonschema

from .errors import DataError
from .evalharness import ARGUMENT_CLASSES, ExperimentReport

_METRIC = {
    "type": "object",
    "required": ["precision", "recall", "f1"],
    "properties": {m: {"type": "number"} for m in ("precision", "recall", "f1")},
}
_COMPARISON = {
    "type": "object",
    "required": ["b", "c", "p_value", "stars"],
    "properties": {
        "b": {"type": "integer", "minimum": 0},
        "c": {"type": "integer", "minimum": 0},
        "p_value": {"type": "number", "minimum": 0, "maximum": 1},
        "stars": {"enum": ["", "*", "**", "***"]},
    },
}
REPORT_SCHEMA = {
    "type": "object",
    "required": ["task", "variants", "folds", "seed", "settings"],
    "properties": {
        "task": {"enum": ["stance", "arguments"]},
        "classes": {"type": "array", "items": {"type": "string"}},
        "variants": {
            "type": "array", "items": {"type": "string"},
            "minItems": 2, "maxItems": 2,
        },
        "folds": {"type": "integer", "minimum": 2},
        "seed": {"type": "integer"},
        "mcnemar_method": {"type": "string"},
        "settings": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["train", "test", "kind", "rows", "comparison"],
                "properties": {
                    "train": {"enum": ["twitter", "facebook", "both"]},
                    "test": {"enum": ["twitter", "facebook"]},
                    "kind": {"enum": ["cv", "single"]},
                    "n_test": {"type": "integer", "minimum": 0},
                    "rows": {"type": "object"},
                    "comparison": {"type": "object"},
                },
            },
        },
    },
}


def validate_report(obj: dict) -> None:
    try:
        jsonschema.validate(obj, REPORT_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise DataError(f"report schema violation: {exc.message}") from exc
    if not obj["settings"]:
        raise DataError("report contains no settings")
    for setting in obj["settings"]:
        for variant in obj["variants"]:
            if variant not in setting["rows"]:
                raise DataError(f"setting missing rows for variant {variant!r}")
        if obj["task"] == "stance":
            comparisons = [setting["comparison"]]
        else:
            comparisons = [setting["comparison"].get(c) for c in obj["classes"]]
        for comp in comparisons:
            if comp is None:
                raise DataError("comparison missing a class entry")
            try:
                jsonschema.validate(comp, _COMPARISON)
            except jsonschema.ValidationError as exc:
                raise DataError(f"report schema violation: {exc.message}") from exc


def _pct(x: float) -> str:
    return f"{100.0 * x:.1f}"


def _cell(mean: float, std: float | None, single: bool) -> str:
    if single:
        return f"{_pct(mean)} (-)"
    return f"{_pct(mean)} ({_pct(std or 0.0)})"


def _setting_label(s: dict) -> str:
    return f"{s['train']}-{s['test']}"


def _render_stance(report: dict) -> list[str]:
    lines = ["vaccine-hesitancy detection: positive-class results (%)", ""]
    header = (
        f"{'model':<10}{'fine-tune':<11}{'test':<10}"
        f"{'pre':<14}{'rec':<14}{'f1':<14}{'*':<4}"
    )
    lines += [header, "-" * len(header)]
    for variant in report["variants"]:
        for s in report["settings"]:
            row = s["rows"][variant]
            single = s["kind"] == "single"
            std = row["std"] or {}
            cells = [
                _cell(row["mean"][m], std.get(m), single)
                for m in ("precision", "recall", "f1")
            ]
            star = "N/A" if variant == report["variants"][0] else s["comparison"]["stars"]
            lines.append(
                f"{variant:<10}{s['train']:<11}{s['test']:<10}"
                f"{cells[0]:<14}{cells[1]:<14}{cells[2]:<14}{star:<4}"
            )
    return lines


def _render_arguments(report: dict) -> list[str]:
    lines = ["argument detection: macro-averaged results and EMR (%)", ""]
    header = (
        f"{'model':<10}{'fine-tune':<11}{'test':<10}"
        f"{'pre':<14}{'rec':<14}{'f1':<14}{'emr':<14}"
    )
    lines += [header, "-" * len(header)]
    for variant in report["variants"]:
        for s in report["settings"]:
            row = s["rows"][variant]
            single = s["kind"] == "single"
            macro = row["aggregates"]["macro"]
            std = macro["std"] or {}
            cells = [
                _cell(macro["mean"][m], std.get(m), single)
                for m in ("precision", "recall", "f1")
            ]
            emr = row["emr"]
            emr_cell = _cell(emr["mean"], emr["std"], single)
            lines.append(
                f"{variant:<10}{s['train']:<11}{s['test']:<10}"
                f"{cells[0]:<14}{cells[1]:<14}{cells[2]:<14}{emr_cell:<14}"
            )

    classes = report.get("classes") or list(ARGUMENT_CLASSES)
    for variant in report["variants"]:
        lines += ["", f"{variant}: per-class results (%), columns P / R / F", ""]
        labels = [_setting_label(s) for s in report["settings"]]
        head = f"{'class':<22}" + "".join(f"{lab:<19}" for lab in labels)
        lines += [head, "-" * len(head)]
        for cls in classes:
            cells = []
            for s in report["settings"]:
                mean = s["rows"][variant]["per_class"][cls]["mean"]
                cells.append(
                    f"{_pct(mean['precision']):>5}{_pct(mean['recall']):>6}"
                    f"{_pct(mean['f1']):>6} "
                )
            lines.append(f"{cls:<22}" + "".join(f"{c:<19}" for c in cells))
        for agg in ("micro", "macro", "weighted", "samples"):
            cells = []
            for s in report["settings"]:
                mean = s["rows"][variant]["aggregates"][agg]["mean"]
                cells.append(
                    f"{_pct(mean['precision']):>5}{_pct(mean['recall']):>6}"
                    f"{_pct(mean['f1']):>6} "
                )
            lines.append(f"{agg:<22}" + "".join(f"{c:<19}" for c in cells))

    lines += ["", "statistically significant improvements (adapted over baseline)", ""]
    for s in report["settings"]:
        significant = [
            f"{cls} ({comp['stars']})"
            for cls, comp in s["comparison"].items()
            if comp["stars"] and comp["c"] > comp["b"]
        ]
        label = _setting_label(s)
        lines.append(f"{label:<22}{', '.join(significant) if significant else '(none)'}")
    return lines


def render_report(report: ExperimentReport | dict) -> str:
    """Plain-text tables for a validated experiment report."""
    obj = report.to_json() if isinstance(report, ExperimentReport) else report
    validate_report(obj)
    if obj["task"] == "stance":
        lines = _render_stance(obj)
    else:
        lines = _render_arguments(obj)
    meta = (
        f"folds={obj['folds']} seed={obj['seed']} "
        f"mcnemar={obj.get('mcnemar_method', 'exact')}"
    )
    return "\n".join(lines + ["", meta]) + "\n"


# ----------------------------------------------------------------- delimited


def _metric_rows(obj: dict):
    for s in obj["settings"]:
        base = (obj["task"], s["train"], s["test"], s["kind"])
        for variant in obj["variants"]:
            row = s["rows"][variant]
            if obj["task"] == "stance":
                scopes = [("positive", row)]
            else:
                scopes = [(f"class:{c}", row["per_class"][c]) for c in obj["classes"]]
                scopes += [(agg, row["aggregates"][agg])
                           for agg in ("micro", "macro", "weighted", "samples")]
            for scope, entry in scopes:
                std = entry["std"] or {}
                for m in ("precision", "recall", "f1"):
                    yield base + (variant, scope, m,
                                  f"{entry['mean'][m]:.6f}",
                                  "" if entry["std"] is None else f"{std[m]:.6f}")
            if obj["task"] == "arguments":
                emr = row["emr"]
                yield base + (variant, "emr", "emr", f"{emr['mean']:.6f}",
                              "" if emr["std"] is None else f"{emr['std']:.6f}")


def _significance_rows(obj: dict):
    for s in obj["settings"]:
        base = (obj["task"], s["train"], s["test"])
        if obj["task"] == "stance":
            comps = [("positive", s["comparison"])]
        else:
            comps = [(f"class:{c}", s["comparison"][c]) for c in obj["classes"]]
        for scope, comp in comps:
            yield base + (scope, str(comp["b"]), str(comp["c"]),
                          f"{comp['p_value']:.6g}", comp["stars"])


def write_tsv(report: ExperimentReport | dict, out_dir: str | Path) -> list[Path]:
    obj = report.to_json() if isinstance(report, ExperimentReport) else report
    validate_report(obj)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.tsv"
    with metrics_path.open("w", encoding="utf-8") as fh:
        fh.write("task\ttrain\ttest\tkind\tvariant\tscope\tmetric\tmean\tstd\n")
        for row in _metric_rows(obj):
            fh.write("\t".join(str(x) for x in row) + "\n")
    sig_path = out_dir / "significance.tsv"
    with sig_path.open("w", encoding="utf-8") as fh:
        fh.write("task\ttrain\ttest\tscope\tb\tc\tp_value\tstars\n")
        for row in _significance_rows(obj):
            fh.write("\t".join(str(x) for x in row) + "\n")
    return [metrics_path, sig_path]


# ------------------------------------------------------------------- figures


def render_figures(report: ExperimentReport | dict, out_dir: str | Path) -> list[Path]:
    """Write bar-chart PNGs comparing baseline and adapted per setting."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    obj = report.to_json() if isinstance(report, ExperimentReport) else report
    validate_report(obj)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    labels = [_setting_label(s) for s in obj["settings"]]
    x = np.arange(len(labels))

    def f1_of(s, variant):
        row = s["rows"][variant]
        if obj["task"] == "stance":
            std = (row["std"] or {}).get("f1", 0.0)
            return row["mean"]["f1"], std
        agg = row["aggregates"]["macro"]
        return agg["mean"]["f1"], (agg["std"] or {}).get("f1", 0.0)

    fig, ax = plt.subplots(figsize=(1.6 + 1.1 * len(labels), 3.4))
    for k, variant in enumerate(obj["variants"]):
        means, stds = zip(*(f1_of(s, variant) for s in obj["settings"]))
        ax.bar(x + (k - 0.5) * 0.38, [100 * m for m in means], width=0.36,
               yerr=[100 * s for s in stds], capsize=3, label=variant)
    for i, s in enumerate(obj["settings"]):
        star = (s["comparison"]["stars"] if obj["task"] == "stance"
                else "")
        if star:
            ax.annotate(star, (x[i] + 0.19, 1), xycoords=("data", "axes fraction"),
                        ha="center", va="top")
    metric_name = "F1" if obj["task"] == "stance" else "macro F1"
    ax.set_ylabel(f"{metric_name} (%)")
    ax.set_xticks(x, labels, rotation=20)
    ax.set_title(f"{obj['task']}: fine-tune/test matrix")
    ax.legend()
    fig.tight_layout()
    path = out_dir / "f1_by_setting.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    if obj["task"] == "arguments":
        classes = obj["classes"]
        n = len(obj["settings"])
        ncols = min(3, n)
        nrows = (n + ncols - 1) // ncols
        fig, axes = plt.subplots(
            nrows, ncols, figsize=(4.0 * ncols, 2.6 * nrows), squeeze=False
        )
        y = np.arange(len(classes))
        for i, s in enumerate(obj["settings"]):
            ax = axes[i // ncols][i % ncols]
            for k, variant in enumerate(obj["variants"]):
                vals = [
                    100 * s["rows"][variant]["per_class"][c]["mean"]["f1"]
                    for c in classes
                ]
                ax.barh(y + (k - 0.5) * 0.38, vals, height=0.36, label=variant)
            ax.set_yticks(y, classes, fontsize=7)
            ax.invert_yaxis()
            ax.set_title(_setting_label(s), fontsize=9)
            ax.set_xlabel("F1 (%)", fontsize=8)
        for j in range(n, nrows * ncols):
            axes[j // ncols][j % ncols].axis("off")
        axes[0][0].legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / "per_class_f1.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

        fig, ax = plt.subplots(figsize=(1.6 + 1.1 * len(labels), 3.0))
        for k, variant in enumerate(obj["variants"]):
            means = [100 * s["rows"][variant]["emr"]["mean"] for s in obj["settings"]]
            ax.bar(x + (k - 0.5) * 0.38, means, width=0.36, label=variant)
        ax.set_ylabel("exact match ratio (%)")
        ax.set_xticks(x, labels, rotation=20)
        ax.legend()
        fig.tight_layout()
        path = out_dir / "emr_by_setting.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
