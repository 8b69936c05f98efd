"""Post-hoc analyses and the static report.

Everything here is a pure function of persisted artifacts. Tables are written
as CSV through pandas, figures as SVG through matplotlib (Agg backend, fixed
hash salt, no timestamps), so the same inputs give byte-identical files.
"""

import html
import itertools
import math
import pathlib
import typing as t
from dataclasses import dataclass
from enum import Enum

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .errors import ArtifactMismatchError, CompletenessError, HeadSelectionError  # noqa: E402
from .evaluator import summarize_reports  # noqa: E402
from .fv_engine import (  # noqa: E402
    ActivationForm,
    ActivationSummary,
    CieTensor,
    HeadProvenance,
    HeadSet,
    aggregate_cie,
)
from .heads import HeadId, head_to_str, sort_heads  # noqa: E402

__all__ = [
    "OverlapReport",
    "Pairing",
    "SimilarityCurve",
    "average_curves",
    "cie_tables",
    "condition_agreement",
    "cosine",
    "emit_tables_and_plots",
    "head_overlap",
    "per_task_scores",
    "shared_head_similarity",
]

plt.rcParams["svg.hashsalt"] = "fvworkbench"
plt.rcParams["svg.fonttype"] = "path"

CSV_OPTIONS = {"index": False, "float_format": "%.6f", "lineterminator": "\n"}
PARTITIONS = ("demo_only", "shared", "instruction_only")


class Pairing(Enum):
    DEMO_VS_SHORT = "demo_vs_short"
    DEMO_VS_LONG = "demo_vs_long"
    SHORT_VS_LONG = "short_vs_long"


_PAIRING_FORMS = {
    Pairing.DEMO_VS_SHORT: (ActivationForm.DEMO, ActivationForm.INSTRUCTION_SHORT),
    Pairing.DEMO_VS_LONG: (ActivationForm.DEMO, ActivationForm.INSTRUCTION_LONG),
    Pairing.SHORT_VS_LONG: (ActivationForm.INSTRUCTION_SHORT, ActivationForm.INSTRUCTION_LONG),
}


@dataclass
class OverlapReport:
    """Partition of the demonstration and instruction head sets"""

    model_id: str
    demo_only: HeadSet
    instruction_only: HeadSet
    shared: HeadSet
    mean_layer: t.Dict[str, t.Optional[float]]

    def asdict(self) -> t.Dict[str, t.Any]:
        return {
            "model_id": self.model_id,
            "demo_only": self.demo_only.asdict(),
            "instruction_only": self.instruction_only.asdict(),
            "shared": self.shared.asdict(),
            "mean_layer": self.mean_layer,
        }


@dataclass
class SimilarityCurve:
    """Mean cosine similarity over shared heads, per layer"""

    model_id: str
    pairing: Pairing
    points: t.List[t.Tuple[int, float]]


def _mean_layer(heads: t.Sequence[HeadId]) -> t.Optional[float]:
    if not heads:
        return None
    return math.fsum(h.layer for h in heads) / len(heads)


def head_overlap(demo_heads: HeadSet, instr_heads: HeadSet, model_id: str = "") -> OverlapReport:
    """Split two equal-size head sets into demo-only, instruction-only and shared heads"""
    if len(demo_heads) != len(instr_heads):
        raise HeadSelectionError(
            f"head sets differ in size: {len(demo_heads)} demonstration, {len(instr_heads)} instruction"
        )
    instr = set(instr_heads)
    demo = set(demo_heads)
    shared = [h for h in demo_heads if h in instr]
    demo_only = [h for h in demo_heads if h not in instr]
    instruction_only = [h for h in instr_heads if h not in demo]
    return OverlapReport(
        model_id=model_id,
        demo_only=HeadSet(demo_only, HeadProvenance.DEMO),
        instruction_only=HeadSet(instruction_only, HeadProvenance.INSTRUCTION),
        shared=HeadSet(shared, HeadProvenance.SHARED_ANALYSIS),
        mean_layer={
            "demo_only": _mean_layer(demo_only),
            "instruction_only": _mean_layer(instruction_only),
            "shared": _mean_layer(shared),
        },
    )


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; 0 when either vector is zero"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    norm = float(np.linalg.norm(a) * np.linalg.norm(b))
    if norm == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / norm, -1.0, 1.0))


def shared_head_similarity(
    summaries: t.Mapping[ActivationForm, ActivationSummary],
    shared: HeadSet,
    model_id: str = "",
) -> t.List[SimilarityCurve]:
    """Per-layer mean cosine between the forms' mean activations on the shared heads

    Heads are weighted equally; layers without shared heads are left out.
    """
    models = {s.model_id for s in summaries.values()}
    if len(models) > 1:
        raise ArtifactMismatchError(f"summaries come from different models: {sorted(models)}")
    curves = []
    for pairing, (form_a, form_b) in _PAIRING_FORMS.items():
        if form_a not in summaries or form_b not in summaries:
            raise CompletenessError(f"no {form_a.value} or {form_b.value} summary for {pairing.value}")
        by_layer: t.Dict[int, t.List[float]] = {}
        for head in sort_heads(shared):
            for summary in (summaries[form_a], summaries[form_b]):
                if head not in summary.means:
                    raise CompletenessError(
                        f"{summary.form.value} summary for {summary.task_id} lacks head {head_to_str(head)}"
                    )
            by_layer.setdefault(head.layer, []).append(
                cosine(summaries[form_a].means[head], summaries[form_b].means[head])
            )
        points = [(layer, math.fsum(values) / len(values)) for layer, values in sorted(by_layer.items())]
        curves.append(SimilarityCurve(model_id or next(iter(models), ""), pairing, points))
    return curves


def average_curves(curves: t.Sequence[SimilarityCurve]) -> t.List[SimilarityCurve]:
    """Average curves of the same (model, pairing), e.g. over tasks, layer by layer"""
    grouped: t.Dict[t.Tuple[str, Pairing], t.Dict[int, t.List[float]]] = {}
    for curve in curves:
        layers = grouped.setdefault((curve.model_id, curve.pairing), {})
        for layer, value in curve.points:
            layers.setdefault(layer, []).append(value)
    return [
        SimilarityCurve(
            model_id,
            pairing,
            [(layer, math.fsum(values) / len(values)) for layer, values in sorted(layers.items())],
        )
        for (model_id, pairing), layers in sorted(grouped.items(), key=lambda item: (item[0][0], item[0][1].value))
    ]


def condition_agreement(head_sets: t.Mapping[str, HeadSet]) -> t.Dict[t.Tuple[str, str], int]:
    """Number of heads shared by every pair of per-condition head sets"""
    names = sorted(head_sets)
    return {
        (a, b): len(set(head_sets[a]) & set(head_sets[b])) for a, b in itertools.combinations(names, 2)
    }


def per_task_scores(records: t.Iterable[CieTensor]) -> t.Dict[str, t.Dict[HeadId, float]]:
    """Each eligible task's scores reduced over its condition cells"""
    by_task: t.Dict[str, t.List[CieTensor]] = {}
    for record in records:
        by_task.setdefault(record.task_id, []).append(record)
    return {
        task_id: aggregate_cie(cells, {task_id: True})
        for task_id, cells in sorted(by_task.items())
        if all(cell.eligible for cell in cells)
    }


def cie_tables(
    scores: t.Mapping[str, t.Mapping[str, t.Mapping[HeadId, float]]],
    head_sets: t.Mapping[str, HeadSet],
) -> t.Tuple[pd.DataFrame, pd.DataFrame]:
    """Causal score tables in two readings

    Args:
        scores: family ("demo" / "instruction") -> task_id -> head -> score
        head_sets: family -> selected head set

    Returns:
        (top_head_mean, per_head). top_head_mean has one row per (head set,
        scoring family): the mean over tasks of the mean score of the set's
        heads, with its SEM across tasks. per_head has one row per head of any
        set with its score averaged over tasks under each family.
    """
    top_rows = []
    for set_family in sorted(head_sets):
        heads = list(head_sets[set_family])
        for score_family in sorted(scores):
            task_means = [
                math.fsum(task_scores[h] for h in heads) / len(heads)
                for _, task_scores in sorted(scores[score_family].items())
                if heads
            ]
            n = len(task_means)
            top_rows.append(
                {
                    "reading": "top_head_mean",
                    "head_set": set_family,
                    "scored_under": score_family,
                    "n_tasks": n,
                    "mean_cie": math.fsum(task_means) / n if n else float("nan"),
                    "sem": float(np.std(task_means, ddof=1) / math.sqrt(n)) if n > 1 else 0.0,
                }
            )

    all_heads = sort_heads({h for head_set in head_sets.values() for h in head_set})
    per_head_rows = []
    for head in all_heads:
        row = {
            "reading": "per_head",
            "head": head_to_str(head),
            "layer": head.layer,
            "in_sets": "+".join(f for f in sorted(head_sets) if head in set(head_sets[f])),
        }
        for score_family in sorted(scores):
            values = [task_scores[head] for _, task_scores in sorted(scores[score_family].items())]
            row[f"cie_{score_family}"] = math.fsum(values) / len(values) if values else float("nan")
        per_head_rows.append(row)

    top_columns = ["reading", "head_set", "scored_under", "n_tasks", "mean_cie", "sem"]
    per_head_columns = ["reading", "head", "layer", "in_sets"] + [f"cie_{f}" for f in sorted(scores)]
    return (
        pd.DataFrame(top_rows, columns=top_columns),
        pd.DataFrame(per_head_rows, columns=per_head_columns),
    )


def _write_csv(frame: pd.DataFrame, path: pathlib.Path) -> pathlib.Path:
    frame.to_csv(path, **CSV_OPTIONS)
    return path


def _save_figure(fig, path: pathlib.Path) -> pathlib.Path:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _no_data(ax, what: str):
    ax.text(0.5, 0.5, f"no {what}", ha="center", va="center", transform=ax.transAxes)


def _accuracy_figure(summary: pd.DataFrame, path: pathlib.Path) -> pathlib.Path:
    fig, ax = plt.subplots(figsize=(10, 5))
    if summary.empty:
        _no_data(ax, "evaluation reports")
    else:
        settings = sorted(summary["setting_key"].unique())
        models = sorted(summary["model_id"].unique())
        width = 0.8 / len(models)
        x = np.arange(len(settings))
        for i, model_id in enumerate(models):
            rows = summary[summary["model_id"] == model_id].set_index("setting_key")
            means = [rows["mean_accuracy"].get(s, np.nan) for s in settings]
            errors = [rows["sem_across_tasks"].get(s, 0.0) for s in settings]
            ax.bar(x + i * width, means, width, yerr=errors, label=model_id, capsize=2)
        ax.set_xticks(x + width * (len(models) - 1) / 2)
        ax.set_xticklabels(settings, rotation=60, ha="right", fontsize=6)
        ax.legend()
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    return _save_figure(fig, path)


def _overlap_figure(overlaps: t.Sequence[OverlapReport], path: pathlib.Path) -> pathlib.Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    models = [o.model_id for o in overlaps]
    bottom = np.zeros(len(overlaps))
    for partition in PARTITIONS:
        counts = np.array([len(getattr(o, partition)) for o in overlaps], dtype=float)
        # drawn even when empty so the legend always lists every partition
        ax.bar(models, counts, bottom=bottom, label=partition)
        bottom += counts
    if not overlaps:
        _no_data(ax, "head sets")
    ax.set_ylabel("heads")
    ax.legend()
    fig.tight_layout()
    return _save_figure(fig, path)


def _similarity_figure(curves: t.Sequence[SimilarityCurve], path: pathlib.Path) -> pathlib.Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for curve in curves:
        if curve.points:
            layers, values = zip(*curve.points)
            ax.plot(layers, values, marker="o", label=f"{curve.model_id} {curve.pairing.value}")
    if not any(curve.points for curve in curves):
        _no_data(ax, "shared heads")
    else:
        ax.legend(fontsize=6)
    ax.set_xlabel("layer")
    ax.set_ylabel("mean cosine similarity")
    ax.set_ylim(-1, 1)
    fig.tight_layout()
    return _save_figure(fig, path)


def _curve_figure(curves: pd.DataFrame, path: pathlib.Path) -> pathlib.Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    if curves.empty:
        _no_data(ax, "layer sweeps")
    else:
        mean = curves.groupby(["model_id", "setting_key", "layer"], sort=True)["accuracy"].mean()
        for (model_id, setting_key), series in mean.groupby(level=[0, 1], sort=True):
            ax.plot(series.index.get_level_values("layer"), series.values, marker="o", label=f"{model_id} {setting_key}")
        ax.legend(fontsize=5)
    ax.set_xlabel("intervention layer")
    ax.set_ylabel("accuracy")
    fig.tight_layout()
    return _save_figure(fig, path)


def _index_page(manifest_hash: str, artifacts: t.Sequence[pathlib.Path], path: pathlib.Path) -> pathlib.Path:
    items = "\n".join(
        f'    <li><a href="{html.escape(p.name)}">{html.escape(p.name)}</a></li>' for p in artifacts
    )
    path.write_text(
        "<!DOCTYPE html>\n<html>\n<head>\n  <meta charset=\"utf-8\">\n"
        f"  <title>fvworkbench report {html.escape(manifest_hash[:12])}</title>\n</head>\n<body>\n"
        f"  <h1>fvworkbench report</h1>\n  <p>run manifest {html.escape(manifest_hash)}</p>\n"
        f"  <ul>\n{items}\n  </ul>\n</body>\n</html>\n",
        encoding="utf-8",
    )
    return path


def emit_tables_and_plots(
    out_dir: t.Union[str, pathlib.Path],
    manifest_hash: str,
    reports: t.Sequence[t.Mapping[str, t.Any]] = (),
    overlaps: t.Sequence[OverlapReport] = (),
    similarity: t.Sequence[SimilarityCurve] = (),
    cie: t.Optional[t.Tuple[pd.DataFrame, pd.DataFrame]] = None,
    agreement: t.Optional[t.Mapping[str, t.Mapping[t.Tuple[str, str], int]]] = None,
    extra_tables: t.Optional[t.Mapping[str, pd.DataFrame]] = None,
) -> t.List[pathlib.Path]:
    """Write every table and figure plus an index page into out_dir/<manifest hash>

    Missing inputs produce empty tables and figures labeled "no ...".
    extra_tables are written as <name>.csv next to the others.

    Returns:
        paths written, index page last
    """
    out = pathlib.Path(out_dir) / manifest_hash[:12]
    out.mkdir(parents=True, exist_ok=True)
    written: t.List[pathlib.Path] = []

    accuracy = pd.DataFrame(
        sorted(
            (
                {
                    "model_id": r["model_id"],
                    "task_id": r["task_id"],
                    "setting_key": r["setting_key"],
                    "accuracy": r["accuracy"],
                    "sem": r["sem"],
                    "n_queries": r["n_queries"],
                }
                for r in reports
            ),
            key=lambda row: (row["model_id"], row["setting_key"], row["task_id"]),
        ),
        columns=["model_id", "task_id", "setting_key", "accuracy", "sem", "n_queries"],
    )
    written.append(_write_csv(accuracy, out / "accuracy.csv"))
    summary = pd.DataFrame(
        summarize_reports(reports),
        columns=["model_id", "setting_key", "n_tasks", "mean_accuracy", "sem_across_tasks"],
    )
    written.append(_write_csv(summary, out / "accuracy_summary.csv"))
    written.append(_accuracy_figure(summary, out / "accuracy.svg"))

    curve_rows = [
        {
            "model_id": r["model_id"],
            "task_id": r["task_id"],
            "setting_key": r["setting_key"],
            "layer": int(layer),
            "accuracy": acc,
        }
        for r in reports
        if r.get("per_layer_curve")
        for layer, acc in r["per_layer_curve"].items()
    ]
    curves = pd.DataFrame(
        sorted(curve_rows, key=lambda row: (row["model_id"], row["setting_key"], row["task_id"], row["layer"])),
        columns=["model_id", "task_id", "setting_key", "layer", "accuracy"],
    )
    written.append(_write_csv(curves, out / "layer_curves.csv"))
    written.append(_curve_figure(curves, out / "layer_curves.svg"))

    overlap_rows = [
        {
            "model_id": o.model_id,
            "partition": partition,
            "n_heads": len(getattr(o, partition)),
            "mean_layer": o.mean_layer[partition],
            "heads": " ".join(head_to_str(h) for h in getattr(o, partition)),
        }
        for o in sorted(overlaps, key=lambda o: o.model_id)
        for partition in PARTITIONS
    ]
    written.append(
        _write_csv(
            pd.DataFrame(overlap_rows, columns=["model_id", "partition", "n_heads", "mean_layer", "heads"]),
            out / "head_overlap.csv",
        )
    )
    written.append(_overlap_figure(sorted(overlaps, key=lambda o: o.model_id), out / "head_overlap.svg"))

    similarity = sorted(similarity, key=lambda c: (c.model_id, c.pairing.value))
    similarity_rows = [
        {"model_id": c.model_id, "pairing": c.pairing.value, "layer": layer, "mean_cosine": value}
        for c in similarity
        for layer, value in c.points
    ]
    written.append(
        _write_csv(
            pd.DataFrame(similarity_rows, columns=["model_id", "pairing", "layer", "mean_cosine"]),
            out / "shared_head_similarity.csv",
        )
    )
    written.append(_similarity_figure(similarity, out / "shared_head_similarity.svg"))

    if cie is not None:
        written.append(_write_csv(cie[0], out / "cie_top_head_mean.csv"))
        written.append(_write_csv(cie[1], out / "cie_per_head.csv"))

    agreement_rows = [
        {"model_id": model_id, "condition_a": a, "condition_b": b, "shared_heads": n}
        for model_id, pairs in sorted((agreement or {}).items())
        for (a, b), n in sorted(pairs.items())
    ]
    written.append(
        _write_csv(
            pd.DataFrame(agreement_rows, columns=["model_id", "condition_a", "condition_b", "shared_heads"]),
            out / "condition_agreement.csv",
        )
    )

    for name, frame in sorted((extra_tables or {}).items()):
        written.append(_write_csv(frame, out / f"{name}.csv"))

    written.append(_index_page(manifest_hash, written, out / "index.html"))
    return written
