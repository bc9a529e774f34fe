"""Grounding metrics, evaluation-time ID repair, database upper bounds and reports.

Intervals map to frames by rounding each end to the nearest sampled frame
(halves up), inclusive at both ends; see :func:`stvgkit.geometry.interval_frames`.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import DataError
from .geometry import BBox, TemporalInterval, box_iou, interval_frames, overlap_ratio_min, temporal_iou
from .identity import IOU_GATE, OVERLAP_GATE, GroundTruthTube
from .mask_db import InstanceRecord, MaskDatabase, filter_small
from .masks import boundary_f, mask_iou

STVG_METRICS = ("m_tIoU", "m_vIoU", "vIoU@0.3", "vIoU@0.5", "tIoU@0.3", "tIoU@0.5")
RVOS_METRICS = ("J", "F", "J&F")


class MissingSampleError(DataError):
    pass


@dataclass(frozen=True)
class Prediction:
    sample_id: str
    interval: TemporalInterval
    instance_id: int


# -- ID repair ------------------------------------------------------------------

@dataclass
class RepairedView:
    """Read-only view of a database with some instance IDs relabelled.

    Only labels change; masks and boxes are those of the underlying database.
    """

    db: MaskDatabase
    target_id: int
    frames: tuple[int, ...]
    relabel: dict[int, dict[int, int]] = field(default_factory=dict)  # frame -> {old: new}
    corrections: list[int] = field(default_factory=list)
    empty_frames: list[int] = field(default_factory=list)
    events: list[tuple[int, int, str]] = field(default_factory=list)  # (frame, old id, rule)

    @property
    def fps(self) -> float:
        return self.db.fps

    @property
    def n_frames(self) -> int:
        return self.db.n_frames

    def boxes(self, t: int) -> dict[int, BBox]:
        base = self.db.boxes(t)
        m = self.relabel.get(t)
        if not m:
            return base
        return {m.get(k, k): b for k, b in base.items()}

    def records(self, t: int) -> list[InstanceRecord]:
        m = self.relabel.get(t, {})
        return [replace(r, instance_id=m.get(r.instance_id, r.instance_id)) for r in self.db.records(t)]

    def frames_of(self, instance_id: int) -> list[int]:
        return [t for t in range(self.n_frames) if instance_id in self.boxes(t)]

    def seconds(self, t: int) -> float:
        return t / self.fps


def id_repair(pred: Prediction, db: MaskDatabase, target_id: int | None = None,
              iou_gate: float = IOU_GATE, overlap_gate: float = OVERLAP_GATE) -> RepairedView:
    """Make ``target_id`` present in every frame of the predicted segment that
    has at least one box.

    Frames are visited in order.  Known fragment IDs (the correction set) are
    renamed first; otherwise the box best matching the target's box in the
    nearest frame that has it is renamed when it passes either overlap gate,
    and the correction is remembered for later frames.  If the target is
    still missing, the largest box in the frame takes its ID.
    """
    target = pred.instance_id if target_id is None else target_id
    F = [t for t in interval_frames(pred.interval, db.fps) if 0 <= t < db.n_frames]
    view = RepairedView(db, target, tuple(F))
    current = {t: dict(db.boxes(t)) for t in F}

    def rename(t: int, old: int, rule: str) -> None:
        current[t][target] = current[t].pop(old)
        view.relabel.setdefault(t, {})[old] = target
        view.events.append((t, old, rule))

    for t in F:
        ids = current[t]
        if target in ids:
            continue
        for old in view.corrections:
            if old in ids:
                rename(t, old, "correction")
                break  # one box per frame may carry the target
        if target in ids:
            continue
        ref = _nearest_with(current, F, t, target)
        if ref is not None and ids:
            b_ref = current[ref][target]
            best = min(ids, key=lambda k: (-box_iou(b_ref, ids[k]), k))
            b_best = ids[best]
            if box_iou(b_ref, b_best) >= iou_gate or overlap_ratio_min(b_ref, b_best) >= overlap_gate:
                rename(t, best, "match")
                if best not in view.corrections:
                    view.corrections.append(best)
        if target not in ids:
            if ids:
                largest = min(ids, key=lambda k: (-ids[k].area, k))
                rename(t, largest, "largest")
            else:
                view.empty_frames.append(t)
    return view


def _nearest_with(current, F, t, target) -> int | None:
    best = None
    for u in F:
        if u != t and target in current[u]:
            key = (abs(u - t), u)  # ties go to the earlier frame
            if best is None or key < best:
                best = key
    return None if best is None else best[1]


# -- metrics ----------------------------------------------------------------------

def viou(pred: Prediction, gt: GroundTruthTube, view) -> float:
    """Sum of per-frame box IoUs over the shared frames divided by the number
    of frames in the union of the two segments."""
    fps = view.fps
    p = set(interval_frames(pred.interval, fps))
    g = set(interval_frames(gt.interval, fps))
    union = p | g
    if not union:
        raise DataError("empty frame union")
    total = 0.0
    for t in sorted(p & g):
        b = view.boxes(t).get(pred.instance_id)
        bg = gt.boxes.get(t)
        if b is not None and bg is not None:
            total += box_iou(b, bg)
    return total / len(union)


@dataclass
class MetricReport:
    summary: dict[str, float]
    rows: list[dict]
    kind: str = "stvg"
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "summary": self.summary, "rows": self.rows,
                           "diagnostics": self.diagnostics}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        return cls(d["summary"], d["rows"], d.get("kind", "stvg"), d.get("diagnostics", {}))


def _pct(values: Sequence[float]) -> float:
    return 100.0 * float(np.mean(values)) if len(values) else 0.0


def _db_for(dbs, sample_id):
    if dbs is None or isinstance(dbs, MaskDatabase):
        return dbs
    try:
        return dbs[sample_id]
    except KeyError:
        raise MissingSampleError(f"no mask database for sample {sample_id!r}") from None


def score_stvg(preds: Mapping[str, Prediction] | Sequence[Prediction],
               gts: Mapping[str, GroundTruthTube], db=None, repair: bool = False,
               fps: float | None = None) -> MetricReport:
    """tIoU and vIoU per sample plus their means and @0.3/@0.5 hit rates (in %).

    ``db`` is one database for every sample or a mapping sample_id -> database.
    Without a database only the temporal metrics are reported.
    """
    if not isinstance(preds, Mapping):
        preds = {p.sample_id: p for p in preds}
    missing = sorted(set(gts) ^ set(preds))
    if missing:
        raise MissingSampleError(f"samples without a matching prediction/ground truth: {missing[:5]}")
    rows, empty = [], 0
    for sid in sorted(gts):
        pred, gt = preds[sid], gts[sid]
        row = {"sample_id": sid, "tIoU": temporal_iou(pred.interval, gt.interval)}
        sdb = _db_for(db, sid)
        if sdb is not None:
            view = id_repair(pred, sdb) if repair else sdb
            if repair:
                empty += len(view.empty_frames)
            row["vIoU"] = viou(pred, gt, view)
        rows.append(row)
    return _stvg_report(rows, {"repair": repair, "repair_empty_frames": empty} if db is not None else {})


def _stvg_report(rows: list[dict], diagnostics: dict) -> MetricReport:
    summary = {}
    if rows:
        t = [r["tIoU"] for r in rows]
        summary["m_tIoU"] = _pct(t)
        if all("vIoU" in r for r in rows):
            v = [r["vIoU"] for r in rows]
            summary["m_vIoU"] = _pct(v)
            summary["vIoU@0.3"] = _pct([x >= 0.3 for x in v])
            summary["vIoU@0.5"] = _pct([x >= 0.5 for x in v])
        summary["tIoU@0.3"] = _pct([x >= 0.3 for x in t])
        summary["tIoU@0.5"] = _pct([x >= 0.5 for x in t])
    return MetricReport(summary, rows, "stvg", diagnostics)


def score_rvos(pred_masks: Sequence, gt_masks: Sequence, tolerance: int | None = None) -> tuple[float, float, float]:
    """Mean region similarity J, boundary F and their average over aligned frames.

    A ``None`` prediction is treated as an empty mask.
    """
    if len(pred_masks) != len(gt_masks):
        raise DataError(f"{len(pred_masks)} predicted frames vs {len(gt_masks)} ground-truth frames")
    if not gt_masks:
        raise DataError("no frames to score")
    js, fs = [], []
    for p, g in zip(pred_masks, gt_masks):
        g = np.asarray(g, dtype=bool)
        p = np.zeros_like(g) if p is None else np.asarray(p, dtype=bool)
        js.append(mask_iou(p, g))
        fs.append(boundary_f(p, g, tolerance))
    j, f = float(np.mean(js)), float(np.mean(fs))
    return j, f, (j + f) / 2


def upper_bound(dbs, gts: Mapping[str, GroundTruthTube], theta: float | None = None) -> MetricReport:
    """Best score any answer-picking policy can reach on these databases:
    the ground-truth segment plus whichever instance ID maximises vIoU."""
    rows = []
    for sid in sorted(gts):
        gt = gts[sid]
        sdb = _db_for(dbs, sid)
        if theta is not None:
            sdb = filter_small(sdb, theta)
        best_id, best = None, 0.0
        for iid in sdb.instance_ids():
            v = viou(Prediction(sid, gt.interval, iid), gt, sdb)
            if v > best:
                best_id, best = iid, v
        rows.append({"sample_id": sid, "tIoU": 1.0, "vIoU": best, "instance_id": best_id})
    return _stvg_report(rows, {"theta": theta})


class StvgScorer(BaseEstimator):
    """Estimator facade: ``score(preds, gts, db)`` returns m_vIoU (or m_tIoU
    without a database); :meth:`report` returns the full :class:`MetricReport`."""

    def __init__(self, repair: bool = False):
        self.repair = repair

    def fit(self, X=None, y=None):
        return self

    def report(self, preds, gts, db=None) -> MetricReport:
        return score_stvg(preds, gts, db, repair=self.repair)

    def score(self, preds, gts, db=None) -> float:
        s = self.report(preds, gts, db).summary
        return s.get("m_vIoU", s.get("m_tIoU", 0.0))


# -- reports ------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.4f}"
    return "" if v is None else str(v)


def _row_metrics(report: MetricReport) -> list[str]:
    keys: list[str] = []
    for r in report.rows:
        for k in r:
            if k != "sample_id" and k not in keys:
                keys.append(k)
    return keys


def emit_report(report: MetricReport, fmt: str = "csv") -> bytes:
    """Serialise a report.  CSV is long-form ``scope,metric,value``: one line per
    sample metric, then one ``summary`` line per aggregate (percentages)."""
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scope", "metric", "value"])
        keys = _row_metrics(report)
        for r in report.rows:
            for k in keys:
                if k in r:
                    w.writerow([r["sample_id"], k, _fmt(r[k])])
        for k, v in report.summary.items():
            w.writerow(["summary", k, _fmt(v)])
        return buf.getvalue().encode("utf-8")
    if fmt == "markdown":
        lines = []
        order = STVG_METRICS if report.kind == "stvg" else RVOS_METRICS
        names = [k for k in order if k in report.summary] + [k for k in report.summary if k not in order]
        title = "STVG" if report.kind == "stvg" else report.kind.upper()
        lines.append(f"## {title} summary (%)")
        lines.append("")
        lines.append("| " + " | ".join(names) + " |")
        lines.append("|" + "|".join("---:" for _ in names) + "|")
        lines.append("| " + " | ".join(_fmt(report.summary[k]) for k in names) + " |")
        keys = _row_metrics(report)
        if report.rows:
            lines += ["", "## Per-sample", "", "| sample_id | " + " | ".join(keys) + " |",
                      "|---|" + "|".join("---:" for _ in keys) + "|"]
            for r in report.rows:
                lines.append(f"| {r['sample_id']} | " + " | ".join(_fmt(r.get(k)) for k in keys) + " |")
        return ("\n".join(lines) + "\n").encode("utf-8")
    raise ValueError(f"unknown report format {fmt!r}")


# -- files -----------------------------------------------------------------------

def read_predictions(path) -> dict[str, Prediction]:
    out = {}
    for lineno, row in _jsonl(path):
        try:
            p = Prediction(str(row["sample_id"]), TemporalInterval(float(row["t_s"]), float(row["t_e"])),
                           int(row["instance_id"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: bad prediction ({exc})") from exc
        out[p.sample_id] = p
    return out


def read_ground_truth(path) -> tuple[dict[str, GroundTruthTube], dict[str, int]]:
    """Ground-truth file rows: ``{"sample_id", "interval": [t_s, t_e],
    "boxes": {"<frame>": [x1, y1, x2, y2]}, "target_id"?: int}``."""
    gts, targets = {}, {}
    for lineno, row in _jsonl(path):
        try:
            sid = str(row["sample_id"])
            iv = TemporalInterval(*map(float, row["interval"]))
            boxes = {int(t): BBox(*map(float, b)) for t, b in row.get("boxes", {}).items()}
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: bad ground-truth record ({exc})") from exc
        gts[sid] = GroundTruthTube(iv, boxes)
        if "target_id" in row:
            targets[sid] = int(row["target_id"])
    return gts, targets


def write_predictions(preds: Sequence[Prediction], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in preds:
            fh.write(json.dumps({"sample_id": p.sample_id, "t_s": p.interval.t_s, "t_e": p.interval.t_e,
                                 "instance_id": p.instance_id}) + "\n")


def write_ground_truth(items: Sequence[tuple[str, GroundTruthTube, int | None]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sid, gt, target in items:
            row = {"sample_id": sid, "interval": [gt.interval.t_s, gt.interval.t_e],
                   "boxes": {str(t): list(b.as_tuple()) for t, b in sorted(gt.boxes.items())}}
            if target is not None:
                row["target_id"] = target
            fh.write(json.dumps(row) + "\n")


def _jsonl(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    yield lineno, json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
