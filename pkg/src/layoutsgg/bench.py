"""Corruption-grid benchmark, gate statistics and improvement reports."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .corruptions import KINDS, CorruptionSpec, corrupt
from .metrics import SceneHits, match_triplets, mean_recall_at_k, recall_at_k
from .pipeline import ModelParams, canonical_task, forward
from .scenes import SceneRecord, perturb_boxes, rasterize

CSV_FIELDS = ("task", "method", "corruption", "severity", "k", "recall", "mean_recall", "n_scenes")
REPORT_FIELDS = ("task", "corruption", "severity", "k", "base_method", "ours_method", "base_mean_recall", "ours_mean_recall", "imp")
CLEAN = "clean"
AVERAGE = "corruption_avg"
DEFAULT_KS = (20, 50, 100)


def corruption_seed(base_seed: int, scene_id: int, kind: str) -> int:
    """Seed shared by all severities of one (scene, kind) cell."""
    seq = np.random.SeedSequence([int(base_seed), int(scene_id), KINDS.index(kind)])
    return int(seq.generate_state(1)[0])


def corrupted_images(scenes: Sequence[SceneRecord], kind: str | None, severity: int, seed: int = 0, clean=None):
    clean = clean if clean is not None else [rasterize(s) for s in scenes]
    if kind is None or severity == 0:
        return clean
    spec = CorruptionSpec(kind, severity)
    return [corrupt(img, spec, corruption_seed(seed, s.id, kind)) for img, s in zip(clean, scenes)]


def eval_boxes(scenes: Sequence[SceneRecord], perturb_bbox: float = 0.0, seed: int = 0) -> list[np.ndarray]:
    """Normalized boxes fed to the model; optionally jittered like an inaccurate detector."""
    if perturb_bbox:
        return [perturb_boxes(s, perturb_bbox, seed).normalized_boxes() for s in scenes]
    return [s.normalized_boxes() for s in scenes]


def predict_hits(model: ModelParams, scenes, images, boxes, task: str) -> list[SceneHits]:
    hits = []
    for scene, img, b in zip(scenes, images, boxes):
        pred = forward(img, b, scene.categories(), model, task)
        hits.append(match_triplets(pred.triplets, scene.relations, scene.categories(), task))
    return hits


def evaluate(
    model: ModelParams,
    scenes: Sequence[SceneRecord],
    ks: Sequence[int] = DEFAULT_KS,
    task: str = "predcls",
    corruption: str | None = None,
    severity: int = 0,
    perturb_bbox: float = 0.0,
    seed: int = 0,
) -> dict:
    """R@K and mR@K of one model on one (possibly corrupted) split."""
    task = canonical_task(task)
    images = corrupted_images(scenes, corruption, severity, seed)
    hits = predict_hits(model, scenes, images, eval_boxes(scenes, perturb_bbox, seed), task)
    return {
        "task": task,
        "method": model.config.method,
        "corruption": corruption if corruption and severity else CLEAN,
        "severity": int(severity) if corruption else 0,
        "perturb_bbox": perturb_bbox,
        "n_scenes": len(scenes),
        "recall": {str(k): recall_at_k(hits, k) for k in ks},
        "mean_recall": {str(k): mean_recall_at_k(hits, k) for k in ks},
    }


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)
    improvements: list = field(default_factory=list)

    def cell(self, method: str, corruption: str, severity: int, k: int, task: str | None = None) -> dict:
        for r in self.rows:
            if (r["method"], r["corruption"], r["severity"], r["k"]) == (method, corruption, severity, k) and (
                task is None or r["task"] == task
            ):
                return r
        raise KeyError((method, corruption, severity, k))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: _fmt(r[k]) for k in CSV_FIELDS})
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "improvements": self.improvements}, indent=2, sort_keys=True) + "\n"

    def write(self, stem) -> tuple[str, str]:
        csv_path, json_path = f"{stem}.csv", f"{stem}.json"
        with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_csv())
        with open(json_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_json())
        return csv_path, json_path


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def relative_improvement(ours: float, base: float) -> float | None:
    return (ours - base) / base if base > 0 else None


def bench_run(
    models: Mapping[str, ModelParams] | Sequence[ModelParams],
    scenes: Sequence[SceneRecord],
    kinds: Sequence[str] = KINDS,
    severities: Sequence[int] = (0, 1, 2, 3, 4, 5),
    ks: Sequence[int] = DEFAULT_KS,
    task: str = "predcls",
    perturb_bbox: float = 0.0,
    seed: int = 0,
) -> MetricsReport:
    """Evaluate every model on every (corruption, severity) cell.

    Severity 0 is a single ``clean`` cell.  For each severity >= 1 a
    ``corruption_avg`` row holds the mean over kinds.  With a model labelled
    ``baseline`` present, relative mR@K improvements of the others are added.
    """
    task = canonical_task(task)
    if not isinstance(models, Mapping):
        models = _label_models(models)
    for kind in kinds:
        CorruptionSpec(kind, 0)
    suffix = f"@perturb{perturb_bbox:g}" if perturb_bbox else ""
    clean = [rasterize(s) for s in scenes]
    boxes = eval_boxes(scenes, perturb_bbox, seed)
    cells = []
    if 0 in severities:
        cells.append((CLEAN, 0))
    cells += [(kind, sev) for sev in sorted(set(severities) - {0}) for kind in kinds]

    rows = []
    for kind, sev in cells:
        images = corrupted_images(scenes, None if kind == CLEAN else kind, sev, seed, clean)
        for label, model in models.items():
            hits = predict_hits(model, scenes, images, boxes, task)
            for k in ks:
                rows.append(
                    {
                        "task": task,
                        "method": label + suffix,
                        "corruption": kind,
                        "severity": sev,
                        "k": int(k),
                        "recall": recall_at_k(hits, k),
                        "mean_recall": mean_recall_at_k(hits, k),
                        "n_scenes": len(scenes),
                    }
                )
    for sev in sorted(set(severities) - {0}):
        for label in models:
            for k in ks:
                sel = [r for r in rows if r["method"] == label + suffix and r["severity"] == sev and r["k"] == k and r["corruption"] != CLEAN]
                rows.append(
                    {
                        "task": task,
                        "method": label + suffix,
                        "corruption": AVERAGE,
                        "severity": sev,
                        "k": int(k),
                        "recall": float(np.mean([r["recall"] for r in sel])),
                        "mean_recall": float(np.mean([r["mean_recall"] for r in sel])),
                        "n_scenes": len(scenes),
                    }
                )
    report = MetricsReport(rows)
    base = "baseline" + suffix
    if any(r["method"] == base for r in rows):
        base_rows = {(r["corruption"], r["severity"], r["k"]): r for r in rows if r["method"] == base}
        for r in rows:
            if r["method"] == base:
                continue
            b = base_rows[(r["corruption"], r["severity"], r["k"])]
            report.improvements.append(
                {
                    "task": task,
                    "method": r["method"],
                    "corruption": r["corruption"],
                    "severity": r["severity"],
                    "k": r["k"],
                    "base_mean_recall": b["mean_recall"],
                    "mean_recall": r["mean_recall"],
                    "imp": relative_improvement(r["mean_recall"], b["mean_recall"]),
                }
            )
    return report


def _label_models(models: Sequence[ModelParams]) -> dict:
    labels = {}
    for i, m in enumerate(models):
        label = m.config.method
        if label in labels:
            label = f"{label}#{i}"
        labels[label] = m
    return labels


def gate_stats(
    model: ModelParams,
    scenes: Sequence[SceneRecord],
    kinds: Sequence[str] = ("gaussian_noise",),
    severities: Sequence[int] = (0, 1, 2, 3, 4, 5),
    task: str = "predcls",
    seed: int = 0,
) -> list[dict]:
    """Mean gate value per (kind, severity), over all objects, pairs and scenes."""
    cfg = model.config
    if not (cfg.enable_lee and cfg.fusion == "gate"):
        raise ValueError("gate statistics need a model with the gated layout encoder")
    clean = [rasterize(s) for s in scenes]
    boxes = eval_boxes(scenes)
    cells = ([(CLEAN, 0)] if 0 in severities else []) + [(k, s) for s in sorted(set(severities) - {0}) for k in kinds]
    out = []
    for kind, sev in cells:
        images = corrupted_images(scenes, None if kind == CLEAN else kind, sev, seed, clean)
        obj_means, pred_means = [], []
        for scene, img, b in zip(scenes, images, boxes):
            pred = forward(img, b, scene.categories(), model, task)
            obj_means.extend(pred.obj_gates.mean(axis=1))
            if pred.pred_gates is not None:
                pred_means.extend(pred.pred_gates.mean(axis=1))
        out.append(
            {
                "corruption": kind,
                "severity": sev,
                "object_gate": float(np.mean(obj_means)),
                "predicate_gate": float(np.mean(pred_means)) if pred_means else None,
                "gate": float(np.mean(obj_means + pred_means)),
            }
        )
    return out


def read_report_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_FIELDS:
            raise ValueError(f"{path}: expected columns {','.join(CSV_FIELDS)}")
        rows = []
        for r in reader:
            rows.append(
                {
                    "task": r["task"],
                    "method": r["method"],
                    "corruption": r["corruption"],
                    "severity": int(r["severity"]),
                    "k": int(r["k"]),
                    "recall": float(r["recall"]),
                    "mean_recall": float(r["mean_recall"]),
                    "n_scenes": int(r["n_scenes"]),
                }
            )
    return rows


def improvement_table(base_rows: Sequence[dict], ours_rows: Sequence[dict]) -> str:
    """Join two bench CSVs cell by cell; ``imp = (ours - base) / base`` on mR@K."""
    key = lambda r: (r["task"], r["corruption"], r["severity"], r["k"])
    base = {}
    for r in base_rows:
        base.setdefault(key(r), r)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in ours_rows:
        b = base.get(key(r))
        if b is None:
            continue
        imp = relative_improvement(r["mean_recall"], b["mean_recall"])
        w.writerow(
            {
                "task": r["task"],
                "corruption": r["corruption"],
                "severity": r["severity"],
                "k": r["k"],
                "base_method": b["method"],
                "ours_method": r["method"],
                "base_mean_recall": _fmt(b["mean_recall"]),
                "ours_mean_recall": _fmt(r["mean_recall"]),
                "imp": "" if imp is None else _fmt(imp),
            }
        )
    return buf.getvalue()
