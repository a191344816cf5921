"""Scanpath comparison: edit distance, sequence score, behavioural statistics and MultiMatch."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

BEHAVIOUR_FIELDS = ("search", "revisit", "refix", "accuracy", "avg_length")


class UndefinedMetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# string metrics
# ---------------------------------------------------------------------------


def fed(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def lcs_length(a: Sequence, b: Sequence) -> int:
    a, b = list(a), list(b)
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def sequence_score(a: Sequence, b: Sequence) -> float:
    """``2 * LCS(a, b) / (|a| + |b|)``; two empty sequences score 1."""
    if not len(a) and not len(b):
        return 1.0
    return 2.0 * lcs_length(a, b) / (len(a) + len(b))


# ---------------------------------------------------------------------------
# behavioural measures
# ---------------------------------------------------------------------------


def classify_saccades(scanpath: Sequence[int], target: int) -> tuple[int, int, int, int, int]:
    """Count (search, revisit, refix) saccades; return ``(a, b, c, accuracy, n)``.

    A saccade to the current object is a refixation, to an object seen
    earlier a revisit, otherwise a search. Accuracy is 1 when the last
    fixation is on the target.
    """
    if not len(scanpath):
        raise UndefinedMetricError("empty scanpath has no saccades or final fixation")
    seen = {scanpath[0]}
    a = b = c = 0
    for prev, cur in zip(scanpath, scanpath[1:]):
        if cur == prev:
            c += 1
        elif cur in seen:
            b += 1
        else:
            a += 1
        seen.add(cur)
    return a, b, c, int(scanpath[-1] == target), len(scanpath)


@dataclass
class BehaviorStats:
    search: float = 0.0
    revisit: float = 0.0
    refix: float = 0.0
    accuracy: float = 0.0
    avg_length: float = 0.0
    n_scanpaths: int = 0

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, f) for f in BEHAVIOUR_FIELDS)


def behavior_stats(scanpaths: Sequence[Sequence[int]], targets) -> BehaviorStats:
    """Average per-scanpath saccade fractions, target accuracy and length.

    ``targets`` is one target id per scanpath or a single id for all.
    Scanpaths with fewer than two fixations carry no saccade fractions;
    empty scanpaths count as misses of length 0.
    """
    scanpaths = [list(s) for s in scanpaths]
    if isinstance(targets, (int, np.integer)):
        targets = [int(targets)] * len(scanpaths)
    if len(targets) != len(scanpaths):
        raise ValueError("one target per scanpath is required")
    fractions, hits, lengths = [], [], []
    for path, target in zip(scanpaths, targets):
        lengths.append(len(path))
        if not path:
            hits.append(0)
            continue
        a, b, c, acc, n = classify_saccades(path, target)
        hits.append(acc)
        if n >= 2:
            fractions.append((a / (n - 1), b / (n - 1), c / (n - 1)))
    frac = np.mean(fractions, axis=0) if fractions else np.zeros(3)
    return BehaviorStats(
        float(frac[0]),
        float(frac[1]),
        float(frac[2]),
        float(np.mean(hits)) if hits else 0.0,
        float(np.mean(lengths)) if lengths else 0.0,
        len(scanpaths),
    )


def overall_difference(model: BehaviorStats, human: BehaviorStats) -> float:
    """Mean over the five measures of ``|model - human| / human``."""
    diffs = []
    for name in BEHAVIOUR_FIELDS:
        ref = getattr(human, name)
        if ref == 0:
            raise UndefinedMetricError(f"reference {name} is zero; relative difference undefined")
        diffs.append(abs(getattr(model, name) - ref) / abs(ref))
    return float(np.mean(diffs))


# ---------------------------------------------------------------------------
# MultiMatch (without the simplification pre-pass)
# ---------------------------------------------------------------------------


@dataclass
class MultiMatch:
    vector: float
    direction: float
    length: float
    position: float

    @property
    def average(self) -> float:
        return (self.vector + self.direction + self.length + self.position) / 4.0


def _align(u: np.ndarray, v: np.ndarray) -> list[tuple[int, int]]:
    """Monotone alignment of two saccade sequences minimising summed vector-difference norms."""
    cost = np.linalg.norm(u[:, None, :] - v[None, :, :], axis=-1)
    n, m = cost.shape
    acc = np.full((n, m), np.inf)
    acc[0, 0] = cost[0, 0]
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                continue
            best = min(
                acc[i - 1, j - 1] if i and j else np.inf,
                acc[i - 1, j] if i else np.inf,
                acc[i, j - 1] if j else np.inf,
            )
            acc[i, j] = cost[i, j] + best
    path = [(n - 1, m - 1)]
    i, j = n - 1, m - 1
    while (i, j) != (0, 0):
        options = []
        if i and j:
            options.append((acc[i - 1, j - 1], 0, (i - 1, j - 1)))
        if i:
            options.append((acc[i - 1, j], 1, (i - 1, j)))
        if j:
            options.append((acc[i, j - 1], 1, (i, j - 1)))
        i, j = min(options, key=lambda o: (o[0], o[1]))[2]
        path.append((i, j))
    return path[::-1]


def _multimatch_one_way(a: np.ndarray, b: np.ndarray, diag: float) -> np.ndarray:
    u, v = np.diff(a, axis=0), np.diff(b, axis=0)
    pairs = _align(u, v)
    scores = []
    for i, j in pairs:
        vec = 1.0 - np.linalg.norm(u[i] - v[j]) / (2.0 * diag)
        nu, nv = np.linalg.norm(u[i]), np.linalg.norm(v[j])
        if nu == 0 or nv == 0:
            angle = 0.0 if nu == nv else math.pi / 2
        else:
            angle = math.acos(float(np.clip(u[i] @ v[j] / (nu * nv), -1.0, 1.0)))
        direction = 1.0 - angle / math.pi
        length = 1.0 - abs(nu - nv) / diag
        position = 1.0 - np.linalg.norm(a[i] - b[j]) / diag
        scores.append((vec, direction, length, position))
    return np.mean(scores, axis=0)


def multimatch(a, b, screen_diag: float) -> MultiMatch | None:
    """Vector, direction, length and position similarity of two pixel scanpaths.

    Saccades are aligned by dynamic programming on vector differences;
    each aligned pair scores one minus its normalised difference (vector
    by twice the screen diagonal, direction by pi, length and fixation
    position by the diagonal). The result is symmetrised over argument
    order so ties in the alignment cannot break symmetry. Returns
    ``None`` when either scanpath has fewer than two fixations.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if len(a) < 2 or len(b) < 2:
        return None
    s = 0.5 * (_multimatch_one_way(a, b, screen_diag) + _multimatch_one_way(b, a, screen_diag))
    s = np.clip(s, 0.0, 1.0)
    return MultiMatch(*map(float, s))


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    SS: float
    FED: float
    Overall: float
    multimatch: dict[str, float]
    model: BehaviorStats
    reference: BehaviorStats
    n_trials: int = 0
    name: str = "model"
    skipped: list[str] = field(default_factory=list)

    def row(self) -> dict:
        out = {"name": self.name}
        out.update({f: getattr(self.model, f) for f in BEHAVIOUR_FIELDS})
        out.update(Overall=self.Overall, FED=self.FED, SS=self.SS)
        out.update({f"MM_{k}": v for k, v in self.multimatch.items()})
        return out


def aggregate(trials, model_scanpaths: dict[str, list[list[int]]], reference_scanpaths: dict[str, list[list[int]]] | None = None, name: str = "model") -> MetricReport:
    """Compare generated scanpaths with reference scanpaths trial by trial.

    SS, FED and MultiMatch are averaged over all (generated, reference)
    pairs of a trial and then over trials. Behavioural statistics are
    pooled over every scanpath before the Overall difference is taken.
    ``reference_scanpaths`` defaults to each trial's own scanpaths.
    """
    ss_t, fed_t, mm_t = [], [], []
    model_paths, model_targets, ref_paths, ref_targets = [], [], [], []
    skipped = []
    for trial in trials:
        refs = reference_scanpaths.get(trial.trial_id) if reference_scanpaths is not None else trial.scanpaths
        preds = model_scanpaths.get(trial.trial_id, [])
        if not refs:
            log.warning("trial %s has no reference scanpaths; skipped", trial.trial_id)
            skipped.append(trial.trial_id)
            continue
        if not preds:
            log.warning("trial %s has no generated scanpaths; skipped", trial.trial_id)
            skipped.append(trial.trial_id)
            continue
        ss = [sequence_score(p, r) for p in preds for r in refs]
        fd = [fed(p, r) for p in preds for r in refs]
        ss_t.append(np.mean(ss))
        fed_t.append(np.mean(fd))
        layout = trial.layout
        mms = []
        for p in preds:
            if len(p) < 2:
                continue
            pa = [layout.center(o) for o in p]
            for r in refs:
                if len(r) < 2:
                    continue
                mm = multimatch(pa, [layout.center(o) for o in r], layout.diag)
                if mm is not None:
                    mms.append((mm.vector, mm.direction, mm.length, mm.position))
        if mms:
            mm_t.append(np.mean(mms, axis=0))
        model_paths += preds
        model_targets += [trial.target] * len(preds)
        ref_paths += refs
        ref_targets += [trial.target] * len(refs)
    model_stats = behavior_stats(model_paths, model_targets)
    ref_stats = behavior_stats(ref_paths, ref_targets)
    try:
        overall = overall_difference(model_stats, ref_stats)
    except UndefinedMetricError as exc:
        log.warning("Overall undefined: %s", exc)
        overall = float("nan")
    mm = np.mean(mm_t, axis=0) if mm_t else np.full(4, np.nan)
    mm_dict = dict(zip(("vector", "direction", "length", "position"), map(float, mm)))
    mm_dict["average"] = float(np.mean(mm))
    return MetricReport(
        SS=float(np.mean(ss_t)) if ss_t else float("nan"),
        FED=float(np.mean(fed_t)) if fed_t else float("nan"),
        Overall=overall,
        multimatch=mm_dict,
        model=model_stats,
        reference=ref_stats,
        n_trials=len(ss_t),
        name=name,
        skipped=skipped,
    )


TABLE_COLUMNS = ("name", "search", "revisit", "refix", "accuracy", "avg_length", "Overall", "FED", "SS",
                 "MM_vector", "MM_direction", "MM_length", "MM_position", "MM_average")


def reports_csv(reports: Sequence[MetricReport], reference: BehaviorStats | None = None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TABLE_COLUMNS)
    if reference is not None:
        writer.writerow(["reference", *(f"{v:.6f}" for v in reference.values()), "0", "0", "1", "", "", "", "", ""])
    for r in reports:
        row = r.row()
        writer.writerow([row["name"]] + [f"{row[c]:.6f}" for c in TABLE_COLUMNS[1:]])
    return buf.getvalue()


def format_table(reports: Sequence[MetricReport], reference: BehaviorStats | None = None) -> str:
    """Plain-text table: behaviour percentages, Overall, FED, SS and MultiMatch average."""
    head = f"{'':<14}{'Search%':>9}{'Revisit%':>10}{'Refix%':>8}{'Acc%':>7}{'AvgLen':>8}{'Overall':>9}{'FED':>8}{'SS':>7}{'MM':>7}"
    lines = [head, "-" * len(head)]
    if reference is not None:
        s = reference
        lines.append(
            f"{'reference':<14}{100 * s.search:>9.1f}{100 * s.revisit:>10.1f}{100 * s.refix:>8.1f}"
            f"{100 * s.accuracy:>7.1f}{s.avg_length:>8.1f}{0:>9.3f}{0:>8.2f}{1:>7.3f}{'':>7}"
        )
    for r in reports:
        s = r.model
        lines.append(
            f"{r.name:<14}{100 * s.search:>9.1f}{100 * s.revisit:>10.1f}{100 * s.refix:>8.1f}"
            f"{100 * s.accuracy:>7.1f}{s.avg_length:>8.1f}{r.Overall:>9.3f}{r.FED:>8.2f}{r.SS:>7.3f}"
            f"{r.multimatch['average']:>7.3f}"
        )
    return "\n".join(lines)


def saccade_distance_histogram(scanpaths, layout, max_distance: int | None = None) -> np.ndarray:
    """Counts of grid Manhattan distances between consecutive fixations."""
    dist = layout.manhattan()
    top = max_distance if max_distance is not None else layout.rows + layout.cols - 2
    hist = np.zeros(top + 1)
    for path in scanpaths:
        for a, b in zip(path, path[1:]):
            hist[min(dist[a - 1, b - 1], top)] += 1
    return hist


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    p = p / p.sum() if p.sum() else p
    q = q / q.sum() if q.sum() else q
    return 0.5 * float(np.abs(p - q).sum())


def stats_from_percentages(search, revisit, refix, accuracy, avg_length) -> BehaviorStats:
    """Build stats from table-style percentages (the length stays in fixations)."""
    return BehaviorStats(search / 100.0, revisit / 100.0, refix / 100.0, accuracy / 100.0, float(avg_length))


def report_dict(r: MetricReport) -> dict:
    d = asdict(r)
    return d
