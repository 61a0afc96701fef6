"""Segmentation and risk-regression metrics.

Segment-level scores (F1-overlap, edit) work on maximal runs of equal labels;
mAP, confusion matrices, MSE and Spearman are frame-level.  Callers drop
padded frames before calling any of these.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

log = logging.getLogger(__name__)

F1_THRESHOLDS = (0.1, 0.25, 0.5)


class Segment(NamedTuple):
    label: int
    start: int  # inclusive
    end: int    # exclusive


def _check_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def labels_to_segments(frames) -> list[Segment]:
    frames = np.asarray(frames)
    if frames.size == 0:
        return []
    cuts = np.flatnonzero(frames[1:] != frames[:-1]) + 1
    starts = np.concatenate([[0], cuts])
    ends = np.concatenate([cuts, [len(frames)]])
    return [Segment(int(frames[s]), int(s), int(e)) for s, e in zip(starts, ends)]


def segment_iou(a: Segment, b: Segment) -> float:
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0:
        return 0.0
    return inter / (max(a.end, b.end) - min(a.start, b.start))


def f1_counts(pred, gt, iou_threshold: float) -> tuple[int, int, int]:
    """(TP, FP, FN) from one-to-one same-label matching at IoU >= threshold.

    Pairs are first taken greedily in descending IoU order; augmenting paths
    then grow the matching until no prediction can gain a partner, so the TP
    count is the maximum possible.  (Pure greedy can fall one match short at
    low thresholds, where a prediction may clear the bar against two
    ground-truth segments.)
    """
    pred, gt = _check_pair(pred, gt)
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("iou_threshold must lie in (0, 1]")
    ps, gs = labels_to_segments(pred), labels_to_segments(gt)
    edges: list[list[int]] = [[] for _ in ps]
    candidates = []
    for i, p in enumerate(ps):
        for j, g in enumerate(gs):
            if p.label == g.label:
                iou = segment_iou(p, g)
                if iou >= iou_threshold:
                    edges[i].append(j)
                    candidates.append((-iou, i, j))
    candidates.sort()
    match_p: dict[int, int] = {}
    match_g: dict[int, int] = {}
    for _, i, j in candidates:
        if i not in match_p and j not in match_g:
            match_p[i], match_g[j] = j, i

    def augment(i: int, seen: set) -> bool:
        for j in edges[i]:
            if j in seen:
                continue
            seen.add(j)
            if j not in match_g or augment(match_g[j], seen):
                match_p[i], match_g[j] = j, i
                return True
        return False

    for i in range(len(ps)):
        if i not in match_p and edges[i]:
            augment(i, set())
    tp = len(match_p)
    return tp, len(ps) - tp, len(gs) - tp


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def f1_overlap(pred, gt, iou_threshold: float = 0.1) -> float:
    return f1_from_counts(*f1_counts(pred, gt, iou_threshold))


def levenshtein(a, b) -> int:
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def segmental_edit_score(pred, gt) -> float:
    """100 * (1 - edit distance between segment label strings / longer length)."""
    pred, gt = _check_pair(pred, gt)
    a = [s.label for s in labels_to_segments(pred)]
    b = [s.label for s in labels_to_segments(gt)]
    n = max(len(a), len(b))
    if n == 0:
        return 100.0
    return 100.0 * (1.0 - levenshtein(a, b) / n)


def average_precision(scores, positives) -> float:
    """Area under the precision-recall step curve; tied scores form one threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = positives.sum()
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], positives[order]
    tp = np.cumsum(y)
    # last index of every run of tied scores
    last = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_at = tp[last]
    precision = tp_at / (last + 1)
    recall = tp_at / n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


def mean_average_precision(frame_scores, gt) -> float:
    """Mean AP over the classes present in ``gt``; absent classes are skipped."""
    frame_scores = np.asarray(frame_scores, dtype=np.float64)
    gt = np.asarray(gt)
    if frame_scores.shape[0] != gt.shape[0]:
        raise ValueError("scores and labels differ in frame count")
    aps = []
    for c in range(frame_scores.shape[1]):
        pos = gt == c
        if not pos.any():
            log.debug("class %d absent from ground truth; excluded from mAP", c)
            continue
        aps.append(average_precision(frame_scores[:, c], pos))
    return float(np.mean(aps)) if aps else float("nan")


def midranks(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ranks = np.empty(len(x))
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], len(x)]
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + e + 1) / 2.0  # mean of 1-based ranks s+1..e
    return ranks


def spearman(pred, gt) -> float | None:
    """Pearson correlation of mid-ranks; ``None`` when either series is constant."""
    pred, gt = _check_pair(np.asarray(pred, float), np.asarray(gt, float))
    if len(pred) < 2:
        raise ValueError("spearman needs at least two values")
    if np.all(pred == pred[0]) or np.all(gt == gt[0]):
        return None
    a, b = midranks(pred), midranks(gt)
    a -= a.mean()
    b -= b.mean()
    r = float(np.dot(a, b) / np.sqrt(np.dot(a, a) * np.dot(b, b)))
    return max(-1.0, min(1.0, r))


def mse(pred, gt) -> float:
    pred, gt = _check_pair(np.asarray(pred, float), np.asarray(gt, float))
    return float(np.mean((pred - gt) ** 2))


def confusion_matrix(pred, gt, n_classes: int) -> np.ndarray:
    """Counts with rows indexed by ground truth and columns by prediction."""
    pred, gt = _check_pair(pred, gt)
    out = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(out, (gt.astype(int), pred.astype(int)), 1)
    return out


def row_normalize(cm) -> np.ndarray:
    cm = np.asarray(cm, dtype=np.float64)
    sums = cm.sum(axis=1, keepdims=True)
    return np.divide(cm, sums, out=np.zeros_like(cm), where=sums > 0)


@dataclass
class VideoMetrics:
    video_id: str
    frames: int
    accuracy: float | None = None
    f1: dict[float, float] | None = None
    edit: float | None = None
    map: float | None = None
    mse: float | None = None
    spearman: float | None = None


def video_metrics(video_id: str, *, labels=None, probs=None, target=None, risk=None,
                  thresholds=F1_THRESHOLDS) -> VideoMetrics:
    """Per-video metrics for whichever outputs are supplied (real frames only)."""
    frames = len(labels) if labels is not None else len(target)
    m = VideoMetrics(video_id, frames)
    if probs is not None:
        pred = np.argmax(probs, axis=1)
        m.accuracy = float(np.mean(pred == labels))
        m.f1 = {t: f1_overlap(pred, labels, t) for t in thresholds}
        m.edit = segmental_edit_score(pred, labels)
        m.map = mean_average_precision(probs, labels)
    if risk is not None:
        m.mse = mse(risk, target)
        m.spearman = spearman(risk, target) if frames >= 2 else None
    return m


@dataclass
class MetricsReport:
    variant: str
    videos: list[VideoMetrics]
    confusion: np.ndarray | None = None
    thresholds: tuple[float, ...] = F1_THRESHOLDS
    extra: dict = field(default_factory=dict)

    def fields(self) -> list[str]:
        names = []
        v = self.videos[0] if self.videos else VideoMetrics("", 0)
        if v.accuracy is not None:
            names += ["accuracy"] + [f"f1@{t:g}" for t in self.thresholds] + ["edit", "map"]
        if v.mse is not None:
            names += ["mse", "spearman"]
        return names

    @staticmethod
    def _value(v: VideoMetrics, name: str):
        if name.startswith("f1@"):
            return v.f1[float(name[3:])]
        return getattr(v, name)

    def aggregate(self) -> dict[str, tuple[float, float]]:
        """Mean and population standard deviation per field over videos."""
        out = {}
        for name in self.fields():
            vals = [self._value(v, name) for v in self.videos]
            vals = np.array([x for x in vals if x is not None], dtype=np.float64)
            out[name] = (float(vals.mean()), float(vals.std())) if vals.size else (
                float("nan"), float("nan"))
        return out

    def to_text(self) -> str:
        """Tab-separated report: one record per video, then mean and std rows."""
        names = self.fields()
        lines = [f"# ergoseg metrics report v1 variant={self.variant} videos={len(self.videos)}",
                 "\t".join(["video", "frames"] + names)]
        for v in self.videos:
            cells = [v.video_id, str(v.frames)]
            for n in names:
                x = self._value(v, n)
                cells.append("NA" if x is None else repr(float(x)))
            lines.append("\t".join(cells))
        agg = self.aggregate()
        total = sum(v.frames for v in self.videos)
        lines.append("\t".join(["mean", str(total)] + [repr(agg[n][0]) for n in names]))
        lines.append("\t".join(["std", str(total)] + [repr(agg[n][1]) for n in names]))
        return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict:
    """Read a report written by :meth:`MetricsReport.to_text` into plain dicts."""
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    header = lines[0].split("\t")
    rows = {}
    for ln in lines[1:]:
        cells = ln.split("\t")
        rows[cells[0]] = {h: (None if c == "NA" else float(c)) for h, c in zip(header[1:], cells[1:])}
    return rows
