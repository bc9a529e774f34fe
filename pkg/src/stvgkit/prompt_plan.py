"""Visual prompt planning: frame budget, instance labels, centroid anchors and stamping.

Frames are ``uint8`` arrays of shape ``(H, W, 3)``.  The raw frame dump is
binary PPM (``P6``): the ASCII header ``P6\\n<W> <H>\\n255\\n`` followed by
``H*W*3`` bytes of row-major RGB.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._font import GLYPH_H, GLYPH_W, GLYPHS
from ._validation import DataError, check_positive
from .mask_db import MaskDatabase, filter_small
from .masks import centroid, rle_decode

GLYPH_SETS = ("numbers", "uppercase", "lowercase", "mixed")


@dataclass(frozen=True)
class MarkerStyle:
    glyph_set: str = "numbers"
    font_size: float = 20
    color: tuple[int, int, int] = (255, 0, 0)

    def __post_init__(self):
        if self.glyph_set not in GLYPH_SETS:
            raise ValueError(f"glyph_set must be one of {GLYPH_SETS}")
        if self.font_size <= 0:
            raise ValueError("font_size must be > 0")

    @property
    def scale(self) -> int:
        """Integer magnification of the 7-pixel-high glyphs."""
        return max(1, int(round(self.font_size / GLYPH_H)))


def _letters(n: int, alphabet: str) -> str:
    # bijective base-26: 1 -> A, 26 -> Z, 27 -> AA
    out = []
    while n > 0:
        n, r = divmod(n - 1, 26)
        out.append(alphabet[r])
    return "".join(reversed(out))


_UPPER = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"


def label_for(instance_id: int, glyph_set: str = "numbers") -> str:
    if instance_id <= 0:
        raise ValueError("instance ids must be positive")
    if glyph_set == "numbers":
        return str(instance_id)
    if glyph_set == "uppercase":
        return _letters(instance_id, _UPPER)
    if glyph_set == "lowercase":
        return _letters(instance_id, _UPPER.lower())
    if glyph_set == "mixed":
        return str(instance_id) if instance_id < 10 else _letters(instance_id - 9, _UPPER)
    raise ValueError(f"unknown glyph set {glyph_set!r}")


def label_extent(label: str, style: MarkerStyle) -> tuple[int, int]:
    """(width, height) in pixels of a rendered label, one scaled column between glyphs."""
    s = style.scale
    n = len(label)
    return n * GLYPH_W * s + (n - 1) * s, GLYPH_H * s


def label_stencil(label: str, style: MarkerStyle) -> np.ndarray:
    s = style.scale
    w, h = label_extent(label, style)
    out = np.zeros((GLYPH_H, w // s), dtype=bool)
    for i, ch in enumerate(label):
        out[:, i * (GLYPH_W + 1): i * (GLYPH_W + 1) + GLYPH_W] = np.array(GLYPHS[ch])
    return np.kron(out, np.ones((s, s), dtype=bool))


def frame_budget(duration_s: float, pixel_budget: float = 1.6e6, fps: float = 2.0,
                 aspect: float = 1.0) -> tuple[int, int, int]:
    """(frame_count, height, width) for a video of ``duration_s`` seconds.

    Per-frame pixels (three channels counted) share ``pixel_budget`` evenly;
    ``aspect`` is width / height and both sides are rounded to even numbers.
    """
    check_positive(duration_s, "duration_s")
    check_positive(pixel_budget, "pixel_budget")
    check_positive(fps, "fps")
    check_positive(aspect, "aspect")
    frames = max(1, int(round(duration_s * fps)))
    area = pixel_budget / frames / 3.0
    h = math.sqrt(area / aspect)
    w = h * aspect

    def even(x):
        return max(2, 2 * int(round(x / 2)))

    H, W = even(h), even(w)
    # rounding up may overshoot; shrink by one even step while above budget
    while frames * H * W * 3 > pixel_budget and (H > 2 or W > 2):
        if W / H > aspect and W > 2:
            W -= 2
        elif H > 2:
            H -= 2
        else:
            W -= 2
    return frames, H, W


@dataclass(frozen=True)
class PromptEntry:
    instance_id: int
    label: str
    anchor: tuple[float, float]  # (x, y) centre of the label


@dataclass
class PromptPlan:
    height: int
    width: int
    style: MarkerStyle
    frames: list[list[PromptEntry]] = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return len(self.frames)


def _clamp_anchor(x: float, y: float, size: tuple[int, int], height: int, width: int) -> tuple[float, float]:
    w, h = size
    lo_x, hi_x = w / 2, width - w / 2
    lo_y, hi_y = h / 2, height - h / 2
    x = width / 2 if lo_x > hi_x else min(max(x, lo_x), hi_x)
    y = height / 2 if lo_y > hi_y else min(max(y, lo_y), hi_y)
    return float(x), float(y)


def plan_prompts(db: MaskDatabase, theta: float = 1 / 3, style: MarkerStyle | None = None) -> PromptPlan:
    """One label per surviving instance per frame, centred on its mask centroid."""
    style = style or MarkerStyle()
    kept = filter_small(db, theta)
    plan = PromptPlan(db.height, db.width, style)
    for t in range(db.n_frames):
        entries = []
        for rec in kept.records(t):
            label = label_for(rec.instance_id, style.glyph_set)
            cx, cy = centroid(rle_decode(rec.mask))
            anchor = _clamp_anchor(cx, cy, label_extent(label, style), db.height, db.width)
            entries.append(PromptEntry(rec.instance_id, label, anchor))
        plan.frames.append(entries)
    return plan


def stamp(frame: np.ndarray, entry: PromptEntry, style: MarkerStyle) -> None:
    """Draw one label in place."""
    H, W = frame.shape[:2]
    sten = label_stencil(entry.label, style)
    h, w = sten.shape
    x0 = int(round(entry.anchor[0] - w / 2))
    y0 = int(round(entry.anchor[1] - h / 2))
    x0 = min(max(x0, 0), max(W - w, 0))
    y0 = min(max(y0, 0), max(H - h, 0))
    region = frame[y0:y0 + h, x0:x0 + w]
    region[sten[:region.shape[0], :region.shape[1]]] = style.color


def rasterize(plan: PromptPlan, frames: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Copies of ``frames`` with every planned label stamped, ascending ID on top."""
    if len(frames) != plan.n_frames:
        raise DataError(f"plan has {plan.n_frames} frames, got {len(frames)}")
    out = []
    for entries, frame in zip(plan.frames, frames):
        frame = np.asarray(frame)
        if frame.shape != (plan.height, plan.width, 3):
            raise DataError(f"frame shape {frame.shape} does not match plan {(plan.height, plan.width, 3)}")
        img = frame.astype(np.uint8, copy=True)
        for e in sorted(entries, key=lambda e: e.instance_id):
            stamp(img, e, plan.style)
        out.append(img)
    return out


class PromptPlanner(TransformerMixin, BaseEstimator):
    """``transform(db)`` -> :class:`PromptPlan`; ``render(db, frames)`` stamps it."""

    def __init__(self, theta: float = 1 / 3, glyph_set: str = "numbers", font_size: float = 20,
                 color: tuple[int, int, int] = (255, 0, 0)):
        self.theta = theta
        self.glyph_set = glyph_set
        self.font_size = font_size
        self.color = color

    def fit(self, db=None, y=None):
        self.style_ = MarkerStyle(self.glyph_set, self.font_size, tuple(self.color))
        return self

    def transform(self, db: MaskDatabase) -> PromptPlan:
        style = getattr(self, "style_", None) or MarkerStyle(self.glyph_set, self.font_size, tuple(self.color))
        return plan_prompts(db, self.theta, style)

    def render(self, db: MaskDatabase, frames: Sequence[np.ndarray]) -> list[np.ndarray]:
        return rasterize(self.transform(db), frames)


# -- files -----------------------------------------------------------------------

def plan_dumps(plan: PromptPlan) -> str:
    """Header line with dimensions and style, then one line per frame."""
    s = plan.style
    lines = [json.dumps({"schema": "stvgkit.promptplan", "version": 1, "height": plan.height,
                         "width": plan.width, "n_frames": plan.n_frames,
                         "style": {"glyph_set": s.glyph_set, "font_size": s.font_size, "color": list(s.color)}},
                        separators=(",", ":"))]
    for t, entries in enumerate(plan.frames):
        lines.append(json.dumps({"frame": t, "labels": [
            {"id": e.instance_id, "label": e.label, "x": e.anchor[0], "y": e.anchor[1]} for e in entries
        ]}, separators=(",", ":")))
    return "\n".join(lines) + "\n"


def plan_loads(text: str) -> PromptPlan:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    try:
        head = json.loads(lines[0])
        st = head["style"]
        plan = PromptPlan(int(head["height"]), int(head["width"]),
                          MarkerStyle(st["glyph_set"], st["font_size"], tuple(st["color"])))
        for line in lines[1:]:
            row = json.loads(line)
            plan.frames.append([PromptEntry(int(e["id"]), str(e["label"]), (float(e["x"]), float(e["y"])))
                                for e in row["labels"]])
    except (IndexError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"bad prompt-plan file: {exc}") from exc
    if len(plan.frames) != int(head["n_frames"]):
        raise DataError(f"prompt plan declares {head['n_frames']} frames, has {len(plan.frames)}")
    return plan


def write_ppm(frame: np.ndarray, path) -> None:
    frame = np.asarray(frame, dtype=np.uint8)
    h, w = frame.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + frame.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6" or parts[2] != b"255":
        raise DataError(f"{path}: not a P6 PPM written by this toolkit")
    w, h = map(int, parts[1].split())
    body = parts[3]
    if len(body) != w * h * 3:
        raise DataError(f"{path}: expected {w * h * 3} pixel bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()
