"""Overlap criterion, average precision and the word/line spotting protocols."""

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyRelevantSet, FormatError, NoLineAnnotations


@dataclass
class PageTruth:
    words: list = field(default_factory=list)   # [((x, y, w, h), text)]
    lines: list = field(default_factory=list)   # [(line_id, (x, y, w, h))]


def iou(a, b):
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def intersects(a, b):
    return (min(a[0] + a[2], b[0] + b[2]) > max(a[0], b[0])
            and min(a[1] + a[3], b[1] + b[3]) > max(a[1], b[1]))


def average_precision(relevance, n_relevant):
    """AP of a ranked list of true/false-positive flags.

    Relevant instances that are never retrieved count as precision 0.
    """
    if n_relevant <= 0:
        raise EmptyRelevantSet("no relevant instances")
    rel = np.asarray(relevance, dtype=bool)
    if not rel.any():
        return 0.0
    ranks = np.nonzero(rel)[0] + 1
    hits = np.arange(1, len(ranks) + 1)
    return float((hits / ranks).sum() / n_relevant)


def match_results(hits, instances, iou_thresh=0.5):
    """Greedy one-to-one matching in rank order.

    ``hits`` are (page id, box) in rank order; ``instances`` are the
    relevant (page id, box) pairs. A hit is a true positive when its IoU
    with some unclaimed instance exceeds ``iou_thresh``; it claims the best one.
    """
    by_page = {}
    for k, (pid, box) in enumerate(instances):
        by_page.setdefault(pid, []).append((k, box))
    claimed = set()
    flags = []
    for pid, box in hits:
        best, best_k = iou_thresh, None
        for k, gbox in by_page.get(pid, ()):
            if k in claimed:
                continue
            o = iou(box, gbox)
            if o > best:
                best, best_k = o, k
        if best_k is not None:
            claimed.add(best_k)
        flags.append(best_k is not None)
    return flags


@dataclass
class EvalReport:
    mean_ap: float
    per_query: dict = field(default_factory=dict)
    excluded: list = field(default_factory=list)


def instances_of(truth, query):
    return [(pid, box) for pid in sorted(truth) for box, text in truth[pid].words if text == query]


def evaluate_word_spotting(results, truth, iou_thresh=0.5):
    """mAP over queries; ``results`` maps query -> ranked list of (page id, box)."""
    report = EvalReport(0.0)
    for q in sorted(results):
        inst = instances_of(truth, q)
        if not inst:
            report.excluded.append(q)
            continue
        flags = match_results(results[q], inst, iou_thresh)
        report.per_query[q] = average_precision(flags, len(inst))
    if report.per_query:
        report.mean_ap = float(np.mean(list(report.per_query.values())))
    return report


def line_scores(scored_hits, lines):
    """Best score of any hit intersecting each line (``-inf`` when none does).

    ``lines`` is a list of (key, page id, box); the result maps key -> score.
    """
    out = {}
    for key, page_id, lbox in lines:
        best = -np.inf
        for pid, box, score in scored_hits:
            if pid == page_id and intersects(box, lbox):
                best = max(best, score)
        out[key] = best
    return out


def _line_table(truth):
    # line ids are only unique within a page
    return [((pid, lid), pid, box) for pid in sorted(truth) for lid, box in truth[pid].lines]


def _line_words(truth):
    words = {}
    for pid in sorted(truth):
        for lid, lbox in truth[pid].lines:
            words[(pid, lid)] = set()
            for box, text in truth[pid].words:
                cx, cy = box[0] + box[2] / 2, box[1] + box[3] / 2
                if lbox[0] <= cx < lbox[0] + lbox[2] and lbox[1] <= cy < lbox[1] + lbox[3]:
                    words[(pid, lid)].add(text)
    return words


def evaluate_line_spotting(results, truth):
    """Line-level mAP; ``results`` maps query -> ranked list of (page id, box, score)."""
    lines = _line_table(truth)
    if not lines:
        raise NoLineAnnotations("ground truth has no LINE entries")
    contents = _line_words(truth)
    report = EvalReport(0.0)
    for q in sorted(results):
        relevant = {lid for lid, words in contents.items() if q in words}
        if not relevant:
            report.excluded.append(q)
            continue
        scores = line_scores(results[q], lines)
        ranked = sorted((lid for lid in scores if np.isfinite(scores[lid])),
                        key=lambda lid: (-scores[lid], lid))
        report.per_query[q] = average_precision([lid in relevant for lid in ranked], len(relevant))
    if report.per_query:
        report.mean_ap = float(np.mean(list(report.per_query.values())))
    return report


def read_truth(path):
    """Parse ``x y w h transcription`` and ``LINE line_id x y w h`` lines."""
    truth = PageTruth()
    with open(path, encoding="utf-8") as f:
        for no, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                if parts[0] == "LINE":
                    if len(parts) != 6:
                        raise ValueError("expected 6 fields")
                    truth.lines.append((parts[1], tuple(int(v) for v in parts[2:6])))
                else:
                    if len(parts) != 5:
                        raise ValueError("expected 5 fields")
                    truth.words.append((tuple(int(v) for v in parts[:4]), parts[4].lower()))
            except ValueError as e:
                raise FormatError(f"{path}:{no}: {e}") from e
    return truth


def write_truth(path, truth):
    with open(path, "w", encoding="utf-8") as f:
        for box, text in truth.words:
            f.write("%d %d %d %d %s\n" % (*box, text))
        for lid, box in truth.lines:
            f.write("LINE %s %d %d %d %d\n" % (lid, *box))


def read_truth_dir(directory):
    out = {}
    for name in sorted(os.listdir(directory)):
        if name.endswith(".txt"):
            out[name[:-4]] = read_truth(os.path.join(directory, name))
    return out
