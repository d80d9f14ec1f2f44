"""Blob detection on toy scenes, fidelity metrics and the evaluation suite."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, EmptyBatchError, LayoutAttnError
from .generator import GeneratorConfig, ToyScene
from .layout.gmm import DEFAULT_RADIUS, Layout, SampleMode, sample_layout
from .optimizer import OptimizerConfig, Variant, optimize
from .scene_dsl import COLORS, NOUNS, LabeledDescription, RelationKind, SceneDescription
from .scorer import ScoreConfig

log = logging.getLogger(__name__)

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class Detection:
    noun: str
    color: str
    box: tuple[int, int, int, int]  # (y0, x0, y1, x1), end-exclusive pixel bounds
    centroid: tuple[float, float]  # normalised (x, y)
    area: int


def detect_objects(scene: ToyScene, threshold: float = 0.5, min_area: int = 4) -> list[Detection]:
    """Connected blobs of pixels whose strongest noun channel exceeds ``threshold``.

    Foreground pixels are labelled by their strongest noun, and 4-connected
    components are taken per label so touching objects of different nouns stay
    separate.  Each component reports the argmax of its mean noun and colour
    activations.  Detections are sorted by area (largest first), then position.
    """
    h, w = scene.shape
    strongest = scene.nouns.argmax(axis=-1)
    foreground = scene.nouns.max(axis=-1) > threshold
    found = []
    for noun_idx in np.unique(strongest[foreground]):
        labels, count = ndimage.label(foreground & (strongest == noun_idx), structure=FOUR_CONNECTED)
        for lab in range(1, count + 1):
            ys, xs = np.nonzero(labels == lab)
            if len(ys) < min_area:
                continue
            noun_mean = scene.nouns[ys, xs].mean(axis=0)
            color_mean = scene.colors[ys, xs].mean(axis=0)
            found.append(
                Detection(
                    noun=NOUNS[int(noun_mean.argmax())],
                    color=COLORS[int(color_mean.argmax())],
                    box=(int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1),
                    centroid=(float((xs.mean() + 0.5) / w), float((ys.mean() + 0.5) / h)),
                    area=int(len(ys)),
                )
            )
    found.sort(key=lambda d: (-d.area, d.box))
    return found


def match_objects(detections: Sequence[Detection], desc: SceneDescription) -> list[Optional[Detection]]:
    """Greedy assignment of detections (largest first) to mentioned objects.

    A detection matches an object with the same noun, and the same colour when
    the description gives one.  Each detection is used at most once; among
    eligible objects the lowest id wins.
    """
    matched: list[Optional[Detection]] = [None] * desc.n_objects
    for det in sorted(detections, key=lambda d: (-d.area, d.box, d.noun, d.color)):
        for i, obj in enumerate(desc.objects):
            if matched[i] is None and obj.noun == det.noun and (obj.color is None or obj.color == det.color):
                matched[i] = det
                break
    return matched


def object_recall(detections: Sequence[Detection], desc: SceneDescription) -> float:
    matched = match_objects(detections, desc)
    return sum(m is not None for m in matched) / desc.n_objects


def relation_correct(kind: RelationKind, subject_xy, object_xy) -> bool:
    """Strict centre comparison; exact ties count as incorrect."""
    return kind.holds(subject_xy, object_xy)


def sprel_counts(detections: Sequence[Detection], desc: SceneDescription) -> tuple[int, int]:
    """``(correct, eligible)`` over relations whose two objects were both matched."""
    matched = match_objects(detections, desc)
    correct = eligible = 0
    for rel in desc.relations:
        a, b = matched[rel.subject_id - 1], matched[rel.object_id - 1]
        if a is None or b is None:
            continue
        eligible += 1
        correct += relation_correct(rel.kind, a.centroid, b.centroid)
    return correct, eligible


def sprel_precision(detections: Sequence[Detection], desc: SceneDescription) -> Optional[float]:
    correct, eligible = sprel_counts(detections, desc)
    return correct / eligible if eligible else None


# ---------------------------------------------------------------------------
# evaluation suite
# ---------------------------------------------------------------------------

GT_ROW = "ground-truth-layout"


@dataclass(frozen=True)
class SuiteConfig:
    """Everything a suite run needs apart from the data, variants and seed."""

    generator: GeneratorConfig = GeneratorConfig()
    score: ScoreConfig = ScoreConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    radius: float = DEFAULT_RADIUS
    layout_mode: SampleMode = SampleMode.SAMPLE
    edge_clamp: bool = False
    threshold: float = 0.5
    min_area: int = 4
    ground_truth_row: bool = False
    workers: int = 1

    def to_json(self) -> dict:
        d = asdict(self)
        d["layout_mode"] = SampleMode(self.layout_mode).value
        d["optimizer"]["variant"] = Variant(self.optimizer.variant).value
        d["optimizer"]["gradient_mode"] = self.optimizer.gradient_mode.value
        return d


@dataclass
class Tally:
    """Micro-averaged counts with their denominators."""

    matched: int = 0
    objects: int = 0
    correct: int = 0
    eligible: int = 0
    items: int = 0
    failures: int = 0
    loss_sum: float = 0.0

    def add(self, rec: dict) -> None:
        if rec.get("error"):
            self.failures += 1
            return
        self.items += 1
        self.matched += rec["matched"]
        self.objects += rec["objects"]
        self.correct += rec["correct"]
        self.eligible += rec["eligible"]
        self.loss_sum += rec["loss"]

    def to_json(self) -> dict:
        return {
            "object_recall": self.matched / self.objects if self.objects else None,
            "recall_numerator": self.matched,
            "recall_denominator": self.objects,
            "sprel_precision": self.correct / self.eligible if self.eligible else None,
            "sprel_numerator": self.correct,
            "sprel_denominator": self.eligible,
            "mean_attend_loss": self.loss_sum / self.items if self.items else None,
            "items": self.items,
            "failures": self.failures,
        }


@dataclass
class EvalReport:
    """Suite results: one row per variant (plus the optional ground-truth-layout row).

    ``per_relation`` only carries SPRel counts since recall is not defined per
    relation.  ``records`` keeps the per-item outcome of every row.
    """

    rows: dict
    per_relation: dict
    per_cell: dict
    overall: dict
    records: list
    config: dict = field(default_factory=dict)

    @property
    def failures(self) -> int:
        return sum(1 for r in self.records if r.get("error"))

    def metric(self, row: str, name: str) -> Optional[float]:
        return self.rows[row][name]

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "overall": self.overall,
            "rows": self.rows,
            "per_relation": self.per_relation,
            "per_cell": self.per_cell,
            "failures": self.failures,
            "records": self.records,
        }

    def csv_rows(self) -> list[dict]:
        out = []

        def emit(row, scope, key, t):
            out.append({"row": row, "scope": scope, "key": key, **{k: t[k] for k in CSV_FIELDS[3:]}})

        emit("all", "overall", "", self.overall)
        for row, t in self.rows.items():
            emit(row, "variant", "", t)
            for kind, tr in self.per_relation[row].items():
                emit(row, "relation", kind, tr)
            for cell, tc in self.per_cell[row].items():
                emit(row, "cell", cell, tc)
        return out

    def summary(self) -> str:
        lines = [f"{'row':<22}{'recall':>9}{'(n/N)':>12}{'sprel':>9}{'(c/E)':>12}{'fail':>6}"]
        for row, t in self.rows.items():
            rec = "-" if t["object_recall"] is None else f"{t['object_recall']:.3f}"
            sp = "-" if t["sprel_precision"] is None else f"{t['sprel_precision']:.3f}"
            lines.append(
                f"{row:<22}{rec:>9}{t['recall_numerator']:>6}/{t['recall_denominator']:<5}"
                f"{sp:>9}{t['sprel_numerator']:>6}/{t['sprel_denominator']:<5}{t['failures']:>6}"
            )
        return "\n".join(lines)


CSV_FIELDS = [
    "row", "scope", "key",
    "object_recall", "recall_numerator", "recall_denominator",
    "sprel_precision", "sprel_numerator", "sprel_denominator",
    "mean_attend_loss", "items", "failures",
]


def write_report(report: EvalReport, json_path=None, csv_path=None) -> None:
    if json_path is not None:
        Path(json_path).write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(report.csv_rows())


def item_seed(seed: int, index: int) -> int:
    """Per-item seed derived from the suite seed, independent of execution order."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def score_scene(scene: ToyScene, desc: SceneDescription, threshold: float = 0.5, min_area: int = 4) -> dict:
    """Detection counts for one scene, including per-relation-kind SPRel counts."""
    dets = detect_objects(scene, threshold, min_area)
    matched = match_objects(dets, desc)
    per_kind: dict[str, list[int]] = {}
    for rel in desc.relations:
        a, b = matched[rel.subject_id - 1], matched[rel.object_id - 1]
        if a is None or b is None:
            continue
        c = per_kind.setdefault(rel.kind.value, [0, 0])
        c[0] += relation_correct(rel.kind, a.centroid, b.centroid)
        c[1] += 1
    return {
        "matched": sum(m is not None for m in matched),
        "objects": desc.n_objects,
        "correct": sum(c for c, _ in per_kind.values()),
        "eligible": sum(e for _, e in per_kind.values()),
        "per_relation": per_kind,
        "detections": len(dets),
    }


def _run_item(job) -> list[dict]:
    index, desc, jobs_layouts, cfg, seed = job
    out = []
    for row, variant, layout in jobs_layouts:
        rec = {"index": index, "row": row, "cell": f"{desc.cell[0]}:{desc.cell[1]}"}
        try:
            opt_cfg = replace(cfg.optimizer, variant=variant)
            res = optimize(desc, layout, cfg.generator, cfg.score, opt_cfg, seed=seed)
            rec.update(score_scene(res.scene, desc, cfg.threshold, cfg.min_area))
            rec["loss"] = res.best_loss
        except (LayoutAttnError, ValueError) as exc:
            rec["error"] = f"{type(exc).__name__}: {exc}"
        out.append(rec)
    return out


def predicted_layout(desc: SceneDescription, model, cfg: SuiteConfig, seed: int) -> Layout:
    from .layout.model import predict_gmm

    gmms = predict_gmm(desc, model)
    return sample_layout(gmms, cfg.radius, seed=seed, mode=cfg.layout_mode, edge_clamp=cfg.edge_clamp)


def run_suite(
    dataset: Sequence[LabeledDescription],
    variants: Sequence[Variant],
    cfg: SuiteConfig = SuiteConfig(),
    seed: int = 0,
    model=None,
) -> EvalReport:
    """Optimise, generate, detect and score every description under every variant.

    With a predictor ``model`` each description gets one sampled layout that
    all variants share, so rows differ only in how the weights are set.
    Without a model the dataset's ground-truth centres are used.  When
    ``cfg.ground_truth_row`` is set an extra row runs the full variant on the
    ground-truth centres.  Per-item errors are recorded, not raised.
    """
    if not dataset:
        raise EmptyBatchError("evaluation dataset is empty")
    variants = [Variant(v) for v in variants]
    jobs = []
    for index, item in enumerate(dataset):
        desc, s = item.description, item_seed(seed, index)
        plan = []
        try:
            gt = Layout.from_centers(item.layout, cfg.radius) if item.layout is not None else None
            layout = predicted_layout(desc, model, cfg, s) if model is not None else gt
            if layout is None:
                raise ConfigError("item has no layout and no predictor was given")
            plan = [(v.value, v, layout) for v in variants]
            if cfg.ground_truth_row:
                if gt is None:
                    raise ConfigError("item has no ground-truth layout")
                plan.append((GT_ROW, Variant.FULL, gt))
        except (LayoutAttnError, ValueError) as exc:
            rows = [v.value for v in variants] + ([GT_ROW] if cfg.ground_truth_row else [])
            err = f"{type(exc).__name__}: {exc}"
            jobs.append([{"index": index, "row": r, "cell": f"{desc.cell[0]}:{desc.cell[1]}", "error": err} for r in rows])
            continue
        jobs.append((index, desc, plan, cfg, s))

    pending = [j for j in jobs if isinstance(j, tuple)]
    if cfg.workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            done = dict(zip((j[0] for j in pending), pool.map(_run_item, pending)))
    else:
        done = {j[0]: _run_item(j) for j in pending}
    records = []
    for j in jobs:
        records.extend(done[j[0]] if isinstance(j, tuple) else j)
    return aggregate(records, [v.value for v in variants] + ([GT_ROW] if cfg.ground_truth_row else []), cfg.to_json())


def aggregate(records: Sequence[dict], row_names: Sequence[str], config: Optional[dict] = None) -> EvalReport:
    overall = Tally()
    rows = {r: Tally() for r in row_names}
    per_cell: dict = {r: {} for r in row_names}
    per_rel: dict = {r: {k.value: Tally() for k in RelationKind} for r in row_names}
    for rec in records:
        row = rec["row"]
        overall.add(rec)
        rows[row].add(rec)
        per_cell[row].setdefault(rec["cell"], Tally()).add(rec)
        if not rec.get("error"):
            for kind, (c, e) in rec["per_relation"].items():
                t = per_rel[row][kind]
                t.correct += c
                t.eligible += e
    return EvalReport(
        rows={r: t.to_json() for r, t in rows.items()},
        per_relation={r: {k: _relation_json(t) for k, t in d.items()} for r, d in per_rel.items()},
        per_cell={r: {c: d[c].to_json() for c in sorted(d)} for r, d in per_cell.items()},
        overall=overall.to_json(),
        records=list(records),
        config=config or {},
    )


def _relation_json(t: Tally) -> dict:
    d = t.to_json()
    for k in ("object_recall", "recall_numerator", "recall_denominator", "mean_attend_loss", "items", "failures"):
        d[k] = None
    return d
