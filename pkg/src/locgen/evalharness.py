"""Hit-rate evaluation of sampled locations against sparse labels.

Predictions are matched one-to-one to all labelled boxes (positives and
negatives together) by minimum total ``1 - IoU``. A matched pair with IoU at
or above the threshold is a true positive (positive label) or a false
positive (negative label); weaker pairs are dissolved. Labels left unmatched
are false negatives / true negatives, predictions left unmatched are ignored.
Counts are summed over the test set before rates are taken.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import iou_matrix
from .sampler import SamplerConfig, random_baseline, sample_k_locations

IOU_THRESHOLD = 0.7


class InvariantError(AssertionError):
    """A counting identity failed; the CLI maps this to exit code 2."""


def hungarian(cost) -> list:
    """Minimum-cost one-to-one assignment for a rectangular cost matrix.

    Returns ``min(N, M)`` pairs ``(row, col)`` sorted by row. Solved as
    shortest augmenting paths with dual potentials over the shorter side,
    which is equivalent to padding the matrix to square with a cost larger
    than every real entry. Ties resolve toward lower column indices.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.size == 0:
        return []
    if c.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if not np.isfinite(c).all():
        raise ValueError("cost must be finite")
    transposed = c.shape[0] > c.shape[1]
    if transposed:
        c = c.T
    n, m = c.shape
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row (1-based) assigned to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            upd = free & (cur < minv[1:])
            minv[1:][upd] = cur[upd]
            way[1:][upd] = j0
            cand = np.where(free, minv[1:], INF)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            usedj = np.flatnonzero(used)
            u[p[usedj]] += delta
            v[usedj] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    pairs = [(int(p[j]) - 1, j - 1) for j in range(1, m + 1) if p[j]]
    if transposed:
        pairs = [(b, a) for a, b in pairs]
    return sorted(pairs)


def assignment_cost(cost, pairs) -> float:
    c = np.asarray(cost, dtype=np.float64)
    return float(sum(c[i, j] for i, j in pairs))


@dataclass
class MatchResult:
    assignments: list  # (pred index, annotation index, iou)
    unmatched_predictions: list
    unmatched_annotations: list


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    ignored: int = 0

    def __add__(self, o: "Counts") -> "Counts":
        return Counts(self.tp + o.tp, self.fp + o.fp, self.fn + o.fn, self.tn + o.tn, self.ignored + o.ignored)

    def check(self, n_pos: int, n_neg: int, n_pred: int) -> None:
        if self.tp + self.fn != n_pos:
            raise InvariantError(f"tp+fn={self.tp + self.fn} != #positives={n_pos}")
        if self.fp + self.tn != n_neg:
            raise InvariantError(f"fp+tn={self.fp + self.tn} != #negatives={n_neg}")
        if self.tp + self.fp + self.ignored != n_pred:
            raise InvariantError(f"tp+fp+ignored={self.tp + self.fp + self.ignored} != #predictions={n_pred}")


@dataclass
class RatesReport:
    tpr: float
    fpr: float
    counts: Counts
    K: int
    config: dict = field(default_factory=dict)

    @classmethod
    def from_counts(cls, counts: Counts, K: int, config: dict | None = None) -> "RatesReport":
        tpr = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
        fpr = counts.fp / (counts.fp + counts.tn) if counts.fp + counts.tn else 0.0
        return cls(tpr, fpr, counts, K, dict(config or {}))


def match_predictions(preds: list, anns) -> MatchResult:
    boxes = [a.bbox for a in anns.annotations]
    if not preds or not boxes:
        return MatchResult([], list(range(len(preds))), list(range(len(boxes))))
    cost = 1.0 - iou_matrix(preds, boxes)
    pairs = hungarian(cost)
    used_p = {i for i, _ in pairs}
    used_a = {j for _, j in pairs}
    return MatchResult([(i, j, 1.0 - cost[i, j]) for i, j in pairs],
                       [i for i in range(len(preds)) if i not in used_p],
                       [j for j in range(len(boxes)) if j not in used_a])


def classify(match: MatchResult, anns, iou_threshold: float = IOU_THRESHOLD) -> Counts:
    labels = [a.label for a in anns.annotations]
    c = Counts()
    hit = set()
    for _, j, iou_ in match.assignments:
        if iou_ >= iou_threshold:
            hit.add(j)
            if labels[j] == "pos":
                c.tp += 1
            else:
                c.fp += 1
        else:
            c.ignored += 1
    c.ignored += len(match.unmatched_predictions)
    for j, lab in enumerate(labels):
        if j in hit:
            continue
        if lab == "pos":
            c.fn += 1
        else:
            c.tn += 1
    n_pred = len(match.assignments) + len(match.unmatched_predictions)
    c.check(labels.count("pos"), labels.count("neg"), n_pred)
    return c


def score_predictions(preds: list, anns, iou_threshold: float = IOU_THRESHOLD) -> Counts:
    return classify(match_predictions(preds, anns), anns, iou_threshold)


def _sample_set_predictions(model, dataset, sampler_config: SamplerConfig, K: int, baseline: str | None,
                            classes) -> list:
    out = []
    for a in dataset.samples:
        scene = dataset.scene(a.scene_id)
        if baseline == "random":
            preds = random_baseline(scene, a.cls.id, K, sampler_config.seed, classes)
        else:
            preds = sample_k_locations(model, scene, a.cls.id, sampler_config, K)
        out.append(preds)
    return out


def _report(all_preds, dataset, K: int, iou_threshold: float, config: dict) -> RatesReport:
    total = Counts()
    n_pos = n_neg = n_pred = 0
    for preds, a in zip(all_preds, dataset.samples):
        p = preds[:K]
        total = total + score_predictions(p, a, iou_threshold)
        n_pos += len(a.positives)
        n_neg += len(a.negatives)
        n_pred += len(p)
    total.check(n_pos, n_neg, n_pred)
    return RatesReport.from_counts(total, K, config)


def evaluate(model, dataset, sampler_config: SamplerConfig, K: int, baseline: str | None = None,
             iou_threshold: float = IOU_THRESHOLD, classes=None) -> RatesReport:
    """Draw ``K`` locations per test annotation set, match, classify and pool counts."""
    if K < 1:
        raise ValueError("K must be >= 1")
    from .scene_synth import DEFAULT_CLASSES

    preds = _sample_set_predictions(model, dataset, sampler_config, K, baseline, classes or DEFAULT_CLASSES)
    return _report(preds, dataset, K, iou_threshold, _echo(sampler_config, baseline, iou_threshold))


def _echo(sampler_config, baseline, iou_threshold) -> dict:
    return {"sampler": asdict(sampler_config), "baseline": baseline or "model", "iou_threshold": iou_threshold}


def curve_sweep(model, dataset, sampler_config: SamplerConfig, Ks=tuple(range(10, 101, 10)),
                baseline: str | None = None, iou_threshold: float = IOU_THRESHOLD, classes=None) -> list:
    """One report per K. Draws are shared across K (draw i is identical for every K >= i + 1)."""
    from .scene_synth import DEFAULT_CLASSES

    Ks = list(Ks)
    preds = _sample_set_predictions(model, dataset, sampler_config, max(Ks), baseline, classes or DEFAULT_CLASSES)
    echo = _echo(sampler_config, baseline, iou_threshold)
    return [_report(preds, dataset, K, iou_threshold, echo) for K in Ks]


def topk_sweep(model, dataset, ks, K: int, sampler_config: SamplerConfig | None = None,
               iou_threshold: float = IOU_THRESHOLD) -> list:
    base = sampler_config or SamplerConfig()
    out = []
    for k in ks:
        cfg = SamplerConfig(top_k=k, temperature=base.temperature, max_draws=base.max_draws,
                            min_box_bins=base.min_box_bins, seed=base.seed)
        r = evaluate(model, dataset, cfg, K, iou_threshold=iou_threshold)
        r.config["top_k"] = k
        out.append(r)
    return out


# -- reports ------------------------------------------------------------------

CSV_COLUMNS = ("K", "tp", "fp", "fn", "tn", "ignored", "tpr", "fpr")


def reports_to_csv(reports: list, extra_columns: tuple = ()) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(extra_columns + CSV_COLUMNS)
    for r in reports:
        c = r.counts
        w.writerow(tuple(r.config.get(k, "") for k in extra_columns)
                   + (r.K, c.tp, c.fp, c.fn, c.tn, c.ignored, f"{r.tpr:.6f}", f"{r.fpr:.6f}"))
    return buf.getvalue()


def reports_to_svg(series: dict, title: str = "", width: int = 480, height: int = 360) -> str:
    """TPR (y) against FPR (x), one polyline with markers per named series."""
    pad = 50
    pts = [(r.fpr, r.tpr) for reps in series.values() for r in reps]
    xmax = max([p[0] for p in pts] + [1e-3]) * 1.1
    ymax = max([p[1] for p in pts] + [1e-3]) * 1.1

    def sx(x):
        return pad + x / xmax * (width - 2 * pad)

    def sy(y):
        return height - pad - y / ymax * (height - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
           f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle">FPR</text>',
           f'<text x="14" y="{height / 2}" text-anchor="middle" transform="rotate(-90 14 {height / 2})">TPR</text>',
           f'<text x="{pad}" y="{height - pad + 16}" text-anchor="middle" font-size="10">0</text>',
           f'<text x="{width - pad}" y="{height - pad + 16}" text-anchor="middle" font-size="10">{xmax:.3g}</text>',
           f'<text x="{pad - 6}" y="{pad + 4}" text-anchor="end" font-size="10">{ymax:.3g}</text>']
    if title:
        out.append(f'<text x="{width / 2}" y="20" text-anchor="middle">{title}</text>')
    for n, (name, reps) in enumerate(series.items()):
        col = colors[n % len(colors)]
        coords = " ".join(f"{sx(r.fpr):.2f},{sy(r.tpr):.2f}" for r in reps)
        out.append(f'<polyline class="series" data-name="{name}" points="{coords}" fill="none" stroke="{col}"/>')
        for r in reps:
            out.append(f'<circle data-name="{name}" data-k="{r.K}" data-fpr="{r.fpr:.6f}" data-tpr="{r.tpr:.6f}" '
                       f'cx="{sx(r.fpr):.2f}" cy="{sy(r.tpr):.2f}" r="3" fill="{col}"/>')
        out.append(f'<text x="{width - pad}" y="{pad + 14 * n}" text-anchor="end" fill="{col}" '
                   f'font-size="11">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def is_finite_report(r: RatesReport) -> bool:
    return math.isfinite(r.tpr) and math.isfinite(r.fpr)
