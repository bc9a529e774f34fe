"""Verifiable rewards for grounding transcripts.

A transcript must be ``<think>...</think>`` followed by ``<answer>...</answer>``
(whitespace allowed around and between the blocks).  The answer body uses the
grammar ``start=<float> end=<float> id=<int>``.
"""
from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import dataclass
from typing import Iterable, Mapping

from ._validation import DataError
from .geometry import BBox, TemporalInterval, box_iou, interval_frames, temporal_iou

VARIANTS = ("decoupled", "coupled", "continuous_spatial", "no_format")

_STRUCTURE = re.compile(r"^\s*<think>(.*?)</think>\s*<answer>(.*?)</answer>\s*$", re.DOTALL)
_FLOAT = r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?"
_ANSWER = re.compile(
    rf"^\s*start\s*=\s*({_FLOAT})\s+end\s*=\s*({_FLOAT})\s+id\s*=\s*(\d+)\s*$"
)
_TAGS = ("<think>", "</think>", "<answer>", "</answer>")


@dataclass(frozen=True)
class Answer:
    interval: TemporalInterval
    instance_id: int


@dataclass(frozen=True)
class Transcript:
    text: str
    structurally_valid: bool
    think: str | None = None
    answer_text: str | None = None
    answer: Answer | None = None


@dataclass(frozen=True)
class RewardBreakdown:
    r_t: float
    r_s: float
    r_f: float
    total: float
    variant: str = "decoupled"


def parse_transcript(text: str) -> Transcript:
    if any(text.count(tag) != 1 for tag in _TAGS):
        return Transcript(text, False)
    m = _STRUCTURE.match(text)
    if m is None:
        return Transcript(text, False)
    think, body = m.group(1), m.group(2)
    a = _ANSWER.match(body)
    answer = None
    if a is not None:
        t_s, t_e = float(a.group(1)), float(a.group(2))
        if t_s <= t_e:
            answer = Answer(TemporalInterval(t_s, t_e), int(a.group(3)))
    return Transcript(text, True, think, body, answer)


def format_answer(interval: TemporalInterval, instance_id: int) -> str:
    return f"start={float(interval.t_s)!r} end={float(interval.t_e)!r} id={int(instance_id)}"


def render_transcript(interval: TemporalInterval, instance_id: int, think: str = "") -> str:
    return f"<think>{think}</think><answer>{format_answer(interval, instance_id)}</answer>"


def reward_temporal(answer: Answer | None, gt: TemporalInterval) -> float:
    if answer is None:
        return 0.0
    return temporal_iou(answer.interval, gt)


def reward_spatial(answer: Answer | None, gt_id: int, db) -> float:
    """1 when the ID is right and the database has it somewhere inside the
    predicted segment."""
    if answer is None or answer.instance_id != gt_id:
        return 0.0
    present = any(answer.interval.contains(db.seconds(t)) for t in db.frames_of(gt_id))
    return 1.0 if present else 0.0


def reward_format(transcript: Transcript) -> float:
    return 1.0 if transcript.structurally_valid else 0.0


def continuous_spatial(answer: Answer | None, gt_interval: TemporalInterval, db,
                       gt_boxes: Mapping[int, BBox] | None = None, gt_id: int | None = None) -> float:
    """Mean box IoU between the predicted tube and the ground truth over the
    frames shared by the predicted and ground-truth segments."""
    if answer is None:
        return 0.0
    shared = sorted(set(interval_frames(answer.interval, db.fps)) & set(interval_frames(gt_interval, db.fps)))
    if not shared:
        return 0.0
    total = 0.0
    for t in shared:
        pred = db.boxes(t).get(answer.instance_id)
        gt = gt_boxes.get(t) if gt_boxes is not None else db.boxes(t).get(gt_id)
        if pred is not None and gt is not None:
            total += box_iou(pred, gt)
    return total / len(shared)


def reward_total(transcript: Transcript | str, gt_interval: TemporalInterval, gt_id: int, db,
                 variant: str = "decoupled", gt_boxes: Mapping[int, BBox] | None = None) -> RewardBreakdown:
    """Score one response.

    ``decoupled``: r_t + r_s + r_f.  ``coupled``: r_t*r_s + r_t + r_f.
    ``continuous_spatial``: r_s replaced by the mean per-frame box IoU over the
    shared frames (ground-truth boxes from ``gt_boxes`` or, if omitted, the
    ``gt_id`` tube in ``db``).  ``no_format``: r_t + r_s, with r_f still reported.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown reward variant {variant!r}; choose from {VARIANTS}")
    if isinstance(transcript, str):
        transcript = parse_transcript(transcript)
    ans = transcript.answer
    r_t = reward_temporal(ans, gt_interval)
    r_f = reward_format(transcript)
    if variant == "continuous_spatial":
        r_s = continuous_spatial(ans, gt_interval, db, gt_boxes, gt_id)
    else:
        r_s = reward_spatial(ans, gt_id, db)
    if variant == "coupled":
        total = r_t * r_s + r_t + r_f
    elif variant == "no_format":
        total = r_t + r_s
    else:
        total = r_t + r_s + r_f
    return RewardBreakdown(r_t, r_s, r_f, total, variant)


def max_total(variant: str) -> float:
    return 2.0 if variant == "no_format" else 3.0


# -- files -------------------------------------------------------------------

def read_transcripts(path) -> list[tuple[str, str]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                out.append((str(row["sample_id"]), str(row["text"])))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad transcript record ({exc})") from exc
    return out


def rewards_csv(rows: Iterable[tuple[str, RewardBreakdown]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sample_id", "r_t", "r_s", "r_f", "total", "variant"])
    for sid, rb in rows:
        writer.writerow([sid, f"{rb.r_t:.6f}", f"{rb.r_s:.6f}", f"{rb.r_f:.6f}", f"{rb.total:.6f}", rb.variant])
    return buf.getvalue()
