"""Detection head inference and the evaluation suite: precision, recall,
ROC-AUC, IoU, ROC export and the pathology performance table."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .params import check_params
from .synth import PATHOLOGIES, AnnotationRecord
from .tensor import Tensor
from .vision import ImageGrid, encode_patches, patchify_array

DISPLAY_NAMES = {
    "fibrosis": "Fibrosis",
    "calcified_granuloma": "Calcified Granulomas",
    "bronchiectasis": "Bronchiectasis",
    "pleural_thickening": "Pleural Thickening",
    "cavity": "Cavity",
    "cp_angle_blunting": "CP Angle Blunting",
}
TABLE_COLUMNS = ("Pathology", "Precision (%)", "Recall (%)", "AUC", "IOU")


@dataclass(frozen=True)
class Undefined:
    """Explicit marker for a metric with no defined value."""

    reason: str

    def __bool__(self) -> bool:
        return False

    def __repr__(self) -> str:
        return f"Undefined({self.reason!r})"


def _value(x):
    return None if isinstance(x, Undefined) else x


# -- detection -------------------------------------------------------------


@dataclass
class PatchPredictions:
    probs: np.ndarray  # (n_pathologies, n_patches)

    def image_scores(self) -> np.ndarray:
        return self.probs.max(axis=1)


def detect_batch(images: np.ndarray, params: Mapping[str, Tensor], cfg: ModelConfig,
                 chunk: int = 64) -> np.ndarray:
    """(B, H, W) images -> (B, n_pathologies, n_patches) probabilities."""
    out = []
    with T.no_grad():
        for s in range(0, len(images), chunk):
            patches = patchify_array(np.asarray(images[s:s + chunk]), cfg.patch_size)
            vis = encode_patches(patches, params, cfg)
            logits = T.add(T.matmul(vis, params["detect.head.w"]), params["detect.head.b"])
            out.append(T.sigmoid(logits).data.transpose(0, 2, 1))
    return np.concatenate(out) if out else np.zeros((0, cfg.n_pathologies, cfg.n_patches))


def detect(img: ImageGrid, note: str, params: Mapping[str, Tensor], cfg: ModelConfig) -> PatchPredictions:
    """Per-pathology patch probabilities from the sigmoid head on visual embeddings.

    The note is accepted for interface symmetry; the head reads only the image.
    """
    check_params(params, cfg)
    return PatchPredictions(detect_batch(img.pixels[None], params, cfg)[0])


# -- primitive metrics -----------------------------------------------------


@dataclass
class Counts:
    tp: int
    fp: int
    fn: int
    tn: int


def precision_recall(preds: Sequence, truth: Sequence):
    """(precision, recall, Counts); a zero denominator yields an Undefined marker."""
    p = np.asarray(preds, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    if p.shape != t.shape:
        raise ValueError(f"precision_recall: {p.size} predictions vs {t.size} labels")
    c = Counts(int((p & t).sum()), int((p & ~t).sum()), int((~p & t).sum()), int((~p & ~t).sum()))
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else Undefined("no positive predictions")
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else Undefined("no positive ground truth")
    return precision, recall, c


@dataclass
class RocCurve:
    fpr: list
    tpr: list
    thresholds: list  # thresholds[i] produced point i; the (0, 0) anchor uses +inf


def roc_curve(scores: Sequence[float], truth: Sequence) -> RocCurve:
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(truth, dtype=bool)
    P, N = int(t.sum()), int((~t).sum())
    order = np.argsort(-s, kind="mergesort")
    s, t = s[order], t[order]
    fpr, tpr, thr = [0.0], [0.0], [float("inf")]
    tp = fp = 0
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and s[j] == s[i]:
            tp += int(t[j])
            fp += int(not t[j])
            j += 1
        fpr.append(fp / N)
        tpr.append(tp / P)
        thr.append(float(s[i]))
        i = j
    return RocCurve(fpr, tpr, thr)


def auc_trapezoid(curve: RocCurve) -> float:
    x, y = curve.fpr, curve.tpr
    return float(sum((x[k + 1] - x[k]) * (y[k + 1] + y[k]) / 2.0 for k in range(len(x) - 1)))


def auc_rank(scores: Sequence[float], truth: Sequence) -> float:
    """Tie-corrected rank statistic (concordant + 0.5 tied) / (P N), via midranks."""
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(truth, dtype=bool)
    P, N = int(t.sum()), int((~t).sum())
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return float((ranks[t].sum() - P * (P + 1) / 2.0) / (P * N))


def roc_auc(scores: Sequence[float], truth: Sequence):
    """(auc, RocCurve) by trapezoidal integration; Undefined for single-class truth."""
    t = np.asarray(truth, dtype=bool)
    if len(scores) != len(t):
        raise ValueError(f"roc_auc: {len(scores)} scores vs {len(t)} labels")
    if t.all() or not t.any():
        return Undefined("AUC needs at least one positive and one negative case"), None
    curve = roc_curve(scores, t)
    return auc_trapezoid(curve), curve


def iou(pred, truth, n_patches: Optional[int] = None) -> float:
    """|A & B| / |A | B| over patch-index sets; two empty sets agree perfectly (1.0)."""
    a, b = set(int(i) for i in pred), set(int(i) for i in truth)
    if n_patches is not None:
        bad = [i for i in a | b if not 0 <= i < n_patches]
        if bad:
            raise ValueError(f"iou: patch index {bad[0]} outside a grid of {n_patches}")
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


# -- evaluation ------------------------------------------------------------


@dataclass
class PathologyMetrics:
    name: str
    precision: object
    recall: object
    auc: object
    iou: object
    counts: Counts
    roc: Optional[RocCurve] = None

    def to_json(self) -> dict:
        d = {"pathology": self.name}
        for key in ("precision", "recall", "auc", "iou"):
            v = getattr(self, key)
            d[key] = _value(v)
            if isinstance(v, Undefined):
                d[f"{key}_undefined"] = v.reason
        d["counts"] = {"tp": self.counts.tp, "fp": self.counts.fp, "fn": self.counts.fn, "tn": self.counts.tn}
        return d


@dataclass
class MetricsReport:
    rows: list
    threshold: float
    split: str
    n_images: int = 0
    extra: dict = field(default_factory=dict)

    def row(self, name: str) -> PathologyMetrics:
        return next(r for r in self.rows if r.name == name)

    def to_json(self) -> dict:
        return {"split": self.split, "threshold": self.threshold, "n_images": self.n_images,
                "pathologies": [r.to_json() for r in self.rows], **self.extra}


def evaluate_predictions(probs: np.ndarray, annotations: Sequence[AnnotationRecord],
                         threshold: float = 0.5, split: str = "test") -> MetricsReport:
    """Metrics from (n_images, n_pathologies, n_patches) probabilities."""
    if len(annotations) == 0:
        raise ValueError("evaluation split is empty")
    rows = []
    for j, name in enumerate(PATHOLOGIES):
        truth = np.array([a.present[name] for a in annotations])
        scores = probs[:, j, :].max(axis=1)
        precision, recall, counts = precision_recall(scores > threshold, truth)
        auc, curve = roc_auc(scores, truth)
        ious = [iou(np.flatnonzero(probs[k, j] > threshold), a.masks[name])
                for k, a in enumerate(annotations) if a.present[name]]
        mean_iou = float(np.mean(ious)) if ious else Undefined(f"{name} absent from the split")
        rows.append(PathologyMetrics(name, precision, recall, auc, mean_iou, counts, curve))
    return MetricsReport(rows, threshold, split, len(annotations))


def oracle_probs(annotations: Sequence[AnnotationRecord]) -> np.ndarray:
    return np.stack([a.mask_array() for a in annotations])


def evaluate(checkpoint, data_dir, split: str = "test", threshold: float = 0.5,
             oracle: bool = False) -> MetricsReport:
    from .checkpoint import Checkpoint, load_checkpoint
    from .synth import load_images, load_manifest

    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    manifest = load_manifest(data_dir)
    if manifest.image_size != ckpt.cfg.image_size or manifest.patch_size != ckpt.cfg.patch_size:
        raise ValueError("dataset image/patch size does not match the checkpoint config")
    entries = manifest.split(split)
    if not entries:
        raise ValueError(f"split {split!r} is empty")
    anns = [e.annotation for e in entries]
    if oracle:
        probs = oracle_probs(anns)
    else:
        probs = detect_batch(load_images(data_dir, entries), ckpt.params, ckpt.cfg)
    return evaluate_predictions(probs, anns, threshold, split)


# -- output formats --------------------------------------------------------


def _pct(v) -> str:
    return "n/a" if isinstance(v, Undefined) or v is None else f"{100.0 * v:.1f}"


def _dec(v) -> str:
    return "n/a" if isinstance(v, Undefined) or v is None else f"{v:.2f}"


def table_rows(rows: Sequence) -> list[list[str]]:
    """Cells per row from PathologyMetrics or (name, precision, recall, auc, iou) tuples.

    Precision and recall are fractions, shown as percentages.
    """
    out = []
    for r in rows:
        if isinstance(r, PathologyMetrics):
            name, p, rc, auc, iou_ = DISPLAY_NAMES.get(r.name, r.name), r.precision, r.recall, r.auc, r.iou
        else:
            name, p, rc, auc, iou_ = r
            name = DISPLAY_NAMES.get(name, name)
        out.append([name, _pct(p), _pct(rc), _dec(auc), _dec(iou_)])
    return out


def format_table(rows: Sequence, style: str = "text",
                 caption: str = "Performance Metrics for Detected Pathologies") -> str:
    cells = table_rows(rows)
    if style == "latex":
        lines = [" & ".join(c.replace("%", r"\%") for c in TABLE_COLUMNS) + r" \\"]
        lines += [" & ".join(c) + r" \\" for c in cells]
        return "\n".join(lines) + "\n"
    if style != "text":
        raise ValueError(f"unknown table style {style!r}")
    widths = [max(len(TABLE_COLUMNS[i]), *(len(c[i]) for c in cells)) for i in range(5)]

    def line(vals):
        first = vals[0].ljust(widths[0])
        rest = [v.rjust(w) for v, w in zip(vals[1:], widths[1:])]
        return " | ".join([first, *rest])

    rule = "-+-".join("-" * w for w in widths)
    body = [caption, line(TABLE_COLUMNS), rule] + [line(c) for c in cells]
    return "\n".join(body) + "\n"


def parse_table(text: str) -> list[list[str]]:
    """Inverse of the text style: header row then one cell list per data row."""
    lines = [l for l in text.splitlines() if " | " in l]
    return [[c.strip() for c in l.split(" | ")] for l in lines]


def write_roc_csv(report: MetricsReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["pathology", "threshold", "fpr", "tpr"])
        for r in report.rows:
            if r.roc is None:
                continue
            for thr, x, y in zip(r.roc.thresholds, r.roc.fpr, r.roc.tpr):
                w.writerow([r.name, repr(thr), repr(x), repr(y)])


def write_report_files(report: MetricsReport, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "metrics.json", "roc": out / "roc.csv", "table": out / "table.txt"}
    paths["json"].write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_roc_csv(report, paths["roc"])
    paths["table"].write_text(format_table(report.rows), encoding="utf-8")
    return paths


METRICS_SCHEMA = {
    "type": "object",
    "required": ["split", "threshold", "n_images", "pathologies"],
    "properties": {
        "split": {"enum": ["train", "val", "test"]},
        "threshold": {"type": "number", "minimum": 0, "maximum": 1},
        "n_images": {"type": "integer", "minimum": 1},
        "pathologies": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["pathology", "precision", "recall", "auc", "iou", "counts"],
                "properties": {
                    "pathology": {"enum": list(PATHOLOGIES)},
                    "precision": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                    "recall": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                    "auc": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                    "iou": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                    "counts": {
                        "type": "object",
                        "required": ["tp", "fp", "fn", "tn"],
                        "additionalProperties": {"type": "integer", "minimum": 0},
                    },
                },
            },
        },
    },
}
