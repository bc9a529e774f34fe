"""Per-frame instance mask database, size filtering, tubes and file formats.

Mask-database file (JSON Lines, UTF-8)::

    {"schema": "stvgkit.maskdb", "version": 1, "height": H, "width": W, "fps": 2.0, "n_frames": T}
    {"frame": 0, "instances": [{"id": 1, "category": "person", "runs": [0, 4, 12]}, ...]}
    ...  # exactly T frame lines, frame indices 0..T-1 in order

Runs are row-major, starting with a background run.

Detections file (JSON Lines), one detection per line::

    {"frame_index": 0, "category": "person", "confidence": 0.91, "box": [x1, y1, x2, y2]}
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import DataError, SchemaError, check_probability
from .geometry import BBox
from .masks import RleMask, mask_to_bbox, rle_decode, rle_encode

SCHEMA = "stvgkit.maskdb"
SCHEMA_VERSION = 1


class CategoryConflictError(DataError):
    pass


class UnknownInstanceError(KeyError):
    pass


@dataclass(frozen=True)
class InstanceRecord:
    instance_id: int
    category: str
    mask: RleMask

    def __post_init__(self):
        if int(self.instance_id) <= 0:
            raise DataError(f"instance ids must be positive, got {self.instance_id}")

    @property
    def area(self) -> int:
        return self.mask.area

    @property
    def box(self) -> BBox:
        return mask_to_bbox(rle_decode(self.mask))


@dataclass(frozen=True)
class InstanceTube:
    instance_id: int
    frames: tuple[int, ...]
    boxes: tuple[BBox, ...]
    masks: tuple[RleMask, ...]

    def __len__(self):
        return len(self.frames)

    def box_at(self, frame: int) -> BBox | None:
        try:
            return self.boxes[self.frames.index(frame)]
        except ValueError:
            return None


@dataclass
class MaskDatabase:
    """Frames ``0..n_frames-1`` of ``{instance_id: InstanceRecord}``.

    Built by a single writer through :meth:`insert`; treat as read-only
    once evaluation starts.
    """

    height: int
    width: int
    n_frames: int
    fps: float = 2.0
    frames: list[dict[int, InstanceRecord]] = field(default_factory=list)
    categories: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise DataError("frame dimensions must be positive")
        if self.n_frames < 0:
            raise DataError("n_frames must be >= 0")
        if self.fps <= 0:
            raise DataError("fps must be positive")
        if not self.frames:
            self.frames = [{} for _ in range(self.n_frames)]
        if len(self.frames) != self.n_frames:
            raise DataError(f"expected {self.n_frames} frames, got {len(self.frames)}")
        self._box_cache: dict[int, dict[int, BBox]] = {}

    # -- building -------------------------------------------------------
    def insert(self, frame_index: int, record: InstanceRecord) -> "MaskDatabase":
        if not 0 <= frame_index < self.n_frames:
            raise DataError(f"frame {frame_index} outside 0..{self.n_frames - 1}")
        if (record.mask.height, record.mask.width) != (self.height, self.width):
            raise DataError(
                f"mask is {record.mask.height}x{record.mask.width}, "
                f"database frames are {self.height}x{self.width}"
            )
        known = self.categories.get(record.instance_id)
        if known is not None and known != record.category:
            raise CategoryConflictError(
                f"instance {record.instance_id} is {known!r}, cannot insert as {record.category!r}"
            )
        self.categories[record.instance_id] = record.category
        self.frames[frame_index][record.instance_id] = record
        self._box_cache.pop(frame_index, None)
        return self

    def insert_mask(self, frame_index: int, instance_id: int, category: str, mask) -> "MaskDatabase":
        return self.insert(frame_index, InstanceRecord(instance_id, category, rle_encode(mask)))

    # -- queries ----------------------------------------------------------
    def records(self, frame_index: int) -> list[InstanceRecord]:
        return [self.frames[frame_index][k] for k in sorted(self.frames[frame_index])]

    def boxes(self, frame_index: int) -> dict[int, BBox]:
        if not 0 <= frame_index < self.n_frames:
            return {}
        cached = self._box_cache.get(frame_index)
        if cached is None:
            cached = {k: r.box for k, r in sorted(self.frames[frame_index].items())}
            self._box_cache[frame_index] = cached
        return cached

    def instance_ids(self) -> list[int]:
        return sorted({k for f in self.frames for k in f})

    def frames_of(self, instance_id: int) -> list[int]:
        return [t for t, f in enumerate(self.frames) if instance_id in f]

    def seconds(self, frame_index: int) -> float:
        return frame_index / self.fps

    def __len__(self):
        return sum(len(f) for f in self.frames)

    def __eq__(self, other):
        if not isinstance(other, MaskDatabase):
            return NotImplemented
        return (
            (self.height, self.width, self.n_frames, float(self.fps))
            == (other.height, other.width, other.n_frames, float(other.fps))
            and self.frames == other.frames
        )

    def copy(self) -> "MaskDatabase":
        return MaskDatabase(
            self.height, self.width, self.n_frames, self.fps,
            [dict(f) for f in self.frames], dict(self.categories),
        )


def db_insert(db: MaskDatabase, frame_index: int, record: InstanceRecord) -> MaskDatabase:
    return db.insert(frame_index, record)


def filter_small(db: MaskDatabase, theta: float) -> MaskDatabase:
    """Drop records whose area is below ``theta`` times the largest area of the
    same category in the same frame.  Returns a new database."""
    theta = check_probability(theta, "theta")
    out = MaskDatabase(db.height, db.width, db.n_frames, db.fps)
    for t, frame in enumerate(db.frames):
        largest: dict[str, int] = {}
        for rec in frame.values():
            largest[rec.category] = max(largest.get(rec.category, 0), rec.area)
        for k in sorted(frame):
            rec = frame[k]
            if rec.area >= theta * largest[rec.category]:
                out.insert(t, rec)
    return out


def tube_of(db: MaskDatabase, instance_id: int) -> InstanceTube:
    frames, boxes, masks = [], [], []
    for t, frame in enumerate(db.frames):
        rec = frame.get(instance_id)
        if rec is not None:
            frames.append(t)
            boxes.append(rec.box)
            masks.append(rec.mask)
    if not frames:
        raise UnknownInstanceError(instance_id)
    return InstanceTube(instance_id, tuple(frames), tuple(boxes), tuple(masks))


class SizeFilter(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`filter_small` for pipelines."""

    def __init__(self, theta: float = 1 / 3):
        self.theta = theta

    def fit(self, db=None, y=None):
        check_probability(self.theta, "theta")
        return self

    def transform(self, db: MaskDatabase) -> MaskDatabase:
        return filter_small(db, self.theta)


# -- persistence ---------------------------------------------------------

def iter_db_lines(db: MaskDatabase) -> Iterator[str]:
    header = {
        "schema": SCHEMA, "version": SCHEMA_VERSION, "height": db.height,
        "width": db.width, "fps": float(db.fps), "n_frames": db.n_frames,
    }
    yield json.dumps(header, separators=(",", ":"))
    for t in range(db.n_frames):
        instances = [
            {"id": r.instance_id, "category": r.category, "runs": list(r.mask.runs)}
            for r in db.records(t)
        ]
        yield json.dumps({"frame": t, "instances": instances}, separators=(",", ":"))


def dumps(db: MaskDatabase) -> str:
    return "\n".join(iter_db_lines(db)) + "\n"


def save(db: MaskDatabase, path) -> None:
    Path(path).write_text(dumps(db), encoding="utf-8")


def loads(text: str) -> MaskDatabase:
    lines = text.splitlines()
    if not lines:
        raise SchemaError("empty mask-database file")
    header = _json_line(lines[0], 1)
    if not isinstance(header, dict) or header.get("schema") != SCHEMA:
        raise SchemaError("line 1: not a mask-database header")
    if header.get("version") != SCHEMA_VERSION:
        raise SchemaError(f"line 1: unsupported schema version {header.get('version')!r}")
    try:
        db = MaskDatabase(int(header["height"]), int(header["width"]),
                          int(header["n_frames"]), float(header["fps"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"line 1: bad header: {exc}") from exc
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != db.n_frames:
        raise SchemaError(f"header declares {db.n_frames} frames, file has {len(body)}")
    for t, line in enumerate(body):
        lineno = t + 2
        row = _json_line(line, lineno)
        if not isinstance(row, dict) or row.get("frame") != t:
            raise SchemaError(f"line {lineno}: expected frame {t}")
        try:
            for inst in row["instances"]:
                rle = RleMask(db.height, db.width, tuple(inst["runs"]))
                rle_decode(rle)
                db.insert(t, InstanceRecord(int(inst["id"]), str(inst["category"]), rle))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"line {lineno}: {exc}") from exc
    return db


def load(path) -> MaskDatabase:
    return loads(Path(path).read_text(encoding="utf-8"))


def _json_line(line: str, lineno: int):
    try:
        return json.loads(line)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"line {lineno}: invalid JSON ({exc.msg})") from exc


# -- detections ----------------------------------------------------------

@dataclass(frozen=True)
class Detection:
    frame_index: int
    category: str
    confidence: float
    box: BBox


def write_detections(detections: Iterable[Detection], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in detections:
            fh.write(json.dumps({
                "frame_index": d.frame_index, "category": d.category,
                "confidence": d.confidence, "box": list(d.box.as_tuple()),
            }, separators=(",", ":")) + "\n")


def read_detections(path) -> list[Detection]:
    out = []
    last_frame = -1
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                det = Detection(
                    int(row["frame_index"]), str(row["category"]),
                    check_probability(float(row["confidence"]), "confidence"),
                    BBox(*map(float, row["box"])),
                )
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if det.frame_index < last_frame:
                raise DataError(f"{path}:{lineno}: frame indices must be non-decreasing")
            last_frame = det.frame_index
            out.append(det)
    return out


def empty_mask(db: MaskDatabase) -> np.ndarray:
    return np.zeros((db.height, db.width), dtype=bool)
