"""Instance identity: re-detection gating, tube assembly and answer-ID derivation."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import DataError
from .geometry import BBox, TemporalInterval, box_iou, overlap_ratio_min
from .mask_db import Detection, MaskDatabase
from .masks import mask_to_bbox

IOU_GATE = 0.4
OVERLAP_GATE = 0.6
REDETECT_EVERY = 15
DETECTOR_CONFIDENCE = 0.25


class NoCandidatesError(DataError):
    """The target is not matched by any candidate box in any frame."""


class Tracker(Protocol):
    """What :func:`assemble_tubes` needs from a segmenter/tracker.

    ``segment`` turns a box prompt into a mask (``None`` if nothing can be
    segmented).  ``propagate`` carries the mask of one instance from
    ``src_frame`` to ``dst_frame``; an all-false mask means the instance is
    not visible there but is still being followed, ``None`` means tracking
    failed and the trajectory ends.
    """

    def segment(self, frame_index: int, box: BBox) -> np.ndarray | None: ...

    def propagate(self, src_frame: int, src_mask: np.ndarray, dst_frame: int) -> np.ndarray | None: ...


@dataclass(frozen=True)
class GroundTruthTube:
    interval: TemporalInterval
    boxes: Mapping[int, BBox]  # frame index -> box

    def check(self, fps: float) -> None:
        for t in self.boxes:
            if not self.interval.t_s - 1e-9 <= t / fps <= self.interval.t_e + 1e-9:
                raise DataError(f"annotated frame {t} lies outside {self.interval}")


@dataclass(frozen=True)
class AssignmentResult:
    per_frame: dict[int, int]
    answer: int
    votes: dict[int, int]


@dataclass
class BuildDiagnostics:
    instances_found: int = 0
    seeded: int = 0
    discovered: list[tuple[int, int]] = field(default_factory=list)  # (frame, id)
    gated_out: int = 0
    low_confidence: int = 0
    segment_failures: int = 0
    truncations: list[tuple[int, int]] = field(default_factory=list)  # (id, frame)


def is_new_instance(detection: BBox, tracked: Iterable[BBox],
                    iou_gate: float = IOU_GATE, overlap_gate: float = OVERLAP_GATE) -> bool:
    """True when ``detection`` is clearly separate from every tracked footprint."""
    return all(
        box_iou(detection, t) < iou_gate and overlap_ratio_min(detection, t) < overlap_gate
        for t in tracked
    )


def assign_frame_id(g: BBox, candidates: Sequence[tuple[int, BBox]]) -> int:
    """ID of the candidate box overlapping ``g`` most; ties go to the smaller ID."""
    if not candidates:
        raise NoCandidatesError("no candidate boxes")
    return min(candidates, key=lambda c: (-box_iou(g, c[1]), c[0]))[0]


def majority_vote(per_frame_ids: Sequence[int]) -> int:
    if not per_frame_ids:
        raise NoCandidatesError("cannot vote over an empty list")
    counts = Counter(per_frame_ids)
    return min(counts, key=lambda k: (-counts[k], k))


def derive_answer(db, gt: GroundTruthTube) -> AssignmentResult:
    """Per-frame best-overlap ID followed by a majority vote over the frames."""
    per_frame = {}
    for t in sorted(gt.boxes):
        cands = list(db.boxes(t).items())
        if cands:
            per_frame[t] = assign_frame_id(gt.boxes[t], cands)
    if not per_frame:
        raise NoCandidatesError("no candidate boxes in any ground-truth frame")
    answer = majority_vote(list(per_frame.values()))
    return AssignmentResult(per_frame, answer, dict(Counter(per_frame.values())))


def assemble_tubes(
    detections: Iterable[Detection],
    tracker: Tracker,
    n_frames: int,
    height: int,
    width: int,
    fps: float = 2.0,
    redetect_every: int | None = REDETECT_EVERY,
    backward: bool = True,
    iou_gate: float = IOU_GATE,
    overlap_gate: float = OVERLAP_GATE,
    detector_confidence: float = DETECTOR_CONFIDENCE,
    diagnostics: BuildDiagnostics | None = None,
) -> MaskDatabase:
    """Seed instances on frame 0, re-detect periodically, track every instance.

    ``redetect_every=None`` (or 0) disables re-detection so only frame-0
    detections become instances.  Each new instance is tracked forward to
    the end of the video and, with ``backward``, back towards frame 0.
    """
    diag = diagnostics if diagnostics is not None else BuildDiagnostics()
    by_frame: dict[int, list[Detection]] = {}
    for d in detections:
        if d.confidence < detector_confidence:
            diag.low_confidence += 1
            continue
        by_frame.setdefault(d.frame_index, []).append(d)

    if redetect_every:
        check_frames = list(range(0, n_frames, int(redetect_every)))
    else:
        check_frames = [0] if n_frames else []

    db = MaskDatabase(height, width, n_frames, fps)
    next_id = 1
    for t in check_frames:
        dets = sorted(by_frame.get(t, []), key=lambda d: (-d.confidence, d.box.as_tuple(), d.category))
        for det in dets:
            tracked = list(db.boxes(t).values())
            if not is_new_instance(det.box, tracked, iou_gate, overlap_gate):
                diag.gated_out += 1
                continue
            mask = tracker.segment(t, det.box)
            if mask is None or not mask.any():
                diag.segment_failures += 1
                continue
            iid = next_id
            next_id += 1
            db.insert_mask(t, iid, det.category, mask)
            if t == 0:
                diag.seeded += 1
            diag.discovered.append((t, iid))
            _track(db, tracker, iid, det.category, t, mask, range(t + 1, n_frames), diag)
            if backward:
                _track(db, tracker, iid, det.category, t, mask, range(t - 1, -1, -1), diag)
    diag.instances_found = next_id - 1
    return db


def _track(db, tracker, iid, category, start, mask, frames, diag) -> None:
    src_frame, src_mask = start, mask
    for t in frames:
        out = tracker.propagate(src_frame, src_mask, t)
        if out is None:
            diag.truncations.append((iid, t))
            return
        if out.any():
            db.insert_mask(t, iid, category, out)
            src_frame, src_mask = t, out


class TubeAssembler(BaseEstimator):
    """Builds a :class:`MaskDatabase` from a detection stream.

    ``fit(detections, tracker=..., n_frames=..., height=..., width=...)``
    stores the database in ``db_`` and the build report in ``diagnostics_``.
    """

    def __init__(self, redetect_every: int | None = REDETECT_EVERY, backward: bool = True,
                 iou_gate: float = IOU_GATE, overlap_gate: float = OVERLAP_GATE,
                 detector_confidence: float = DETECTOR_CONFIDENCE, fps: float = 2.0):
        self.redetect_every = redetect_every
        self.backward = backward
        self.iou_gate = iou_gate
        self.overlap_gate = overlap_gate
        self.detector_confidence = detector_confidence
        self.fps = fps

    def fit(self, detections, y=None, *, tracker: Tracker, n_frames: int, height: int, width: int):
        self.diagnostics_ = BuildDiagnostics()
        self.db_ = assemble_tubes(
            detections, tracker, n_frames, height, width, fps=self.fps,
            redetect_every=self.redetect_every, backward=self.backward,
            iou_gate=self.iou_gate, overlap_gate=self.overlap_gate,
            detector_confidence=self.detector_confidence, diagnostics=self.diagnostics_,
        )
        return self

    def fit_transform(self, detections, y=None, **fit_params) -> MaskDatabase:
        return self.fit(detections, **fit_params).db_


def tube_boxes_from_masks(masks: Mapping[int, np.ndarray]) -> dict[int, BBox]:
    return {t: mask_to_bbox(m) for t, m in masks.items() if m.any()}


def box_mask(box: BBox, height: int, width: int) -> np.ndarray:
    """Pixels whose centres fall inside ``box``."""
    ys = np.arange(height)[:, None] + 0.5
    xs = np.arange(width)[None, :] + 0.5
    return (xs >= box.x1) & (xs < box.x2) & (ys >= box.y1) & (ys < box.y2)


class DetectionTracker:
    """Box-level tracking-by-detection for when only a detections file is available.

    Masks are filled boxes.  An instance follows the best-overlapping
    detection (IoU >= ``match_iou``) in each frame; after more than
    ``max_gap`` frames without a match the track ends.
    """

    def __init__(self, detections: Iterable[Detection], height: int, width: int,
                 match_iou: float = 0.3, max_gap: int = 5,
                 detector_confidence: float = DETECTOR_CONFIDENCE):
        self.height, self.width = height, width
        self.match_iou, self.max_gap = match_iou, max_gap
        self.by_frame: dict[int, list[BBox]] = {}
        for d in detections:
            if d.confidence >= detector_confidence:
                self.by_frame.setdefault(d.frame_index, []).append(d.box)

    def segment(self, frame_index: int, box: BBox) -> np.ndarray | None:
        mask = box_mask(box, self.height, self.width)
        return mask if mask.any() else None

    def propagate(self, src_frame: int, src_mask: np.ndarray, dst_frame: int) -> np.ndarray | None:
        ref = mask_to_bbox(src_mask)
        cands = self.by_frame.get(dst_frame, [])
        best = max(cands, key=lambda b: box_iou(ref, b), default=None)
        if best is not None and box_iou(ref, best) >= self.match_iou:
            return box_mask(best, self.height, self.width)
        if abs(dst_frame - src_frame) > self.max_gap:
            return None
        return np.zeros((self.height, self.width), dtype=bool)
