"""Deterministic synthetic videos: moving shapes, noisy detections and episodes.

Every function here is a pure function of its inputs and seed.  Objects are
drawn in ascending ID order, so a higher ID occludes a lower one; an object
counts as visible in a frame when at least ``visibility_threshold`` of its
in-frame area is unoccluded.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
import numpy as np

from ._validation import DataError, check_positive, check_probability
from .geometry import BBox, TemporalInterval, box_iou
from .identity import GroundTruthTube
from .mask_db import Detection, MaskDatabase, tube_of
from .masks import mask_iou, rle_decode

CATEGORIES = ("person", "car", "dog")
COLORS = ("red", "green", "blue", "yellow")
COLOR_RGB = {
    "red": (200, 40, 40), "green": (40, 170, 60),
    "blue": (40, 70, 200), "yellow": (220, 200, 40),
}
PREDICATES = ("category", "color", "size", "motion", "region")


class NoUniqueObjectError(DataError):
    pass


@dataclass(frozen=True)
class ObjectSpec:
    category: str
    color: str
    shape: str  # "rectangle" | "ellipse"
    size: tuple[float, float]  # (w, h) in pixels
    start: tuple[float, float]  # centre at entry frame
    velocity: tuple[float, float]  # pixels per frame
    entry: int
    exit: int  # inclusive
    motion: str = "linear"  # "linear" | "sinusoidal"
    amplitude: float = 0.0
    period: float = 20.0

    def __post_init__(self):
        if self.entry > self.exit:
            raise ValueError(f"object entry {self.entry} after exit {self.exit}")
        if self.shape not in ("rectangle", "ellipse"):
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.motion not in ("linear", "sinusoidal"):
            raise ValueError(f"unknown motion {self.motion!r}")


@dataclass(frozen=True)
class NoiseConfig:
    miss_prob: float = 0.0
    jitter_sigma: float = 0.0
    false_positive_rate: float = 0.0  # expected false positives per frame
    category_confusion: float = 0.0
    fragmentation_p: float = 0.0

    def validate(self) -> None:
        check_probability(self.miss_prob, "miss_prob")
        check_probability(self.category_confusion, "category_confusion")
        check_probability(self.fragmentation_p, "fragmentation_p")
        check_positive(self.jitter_sigma, "jitter_sigma", strict=False)
        check_positive(self.false_positive_rate, "false_positive_rate", strict=False)


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    height: int = 96
    width: int = 96
    duration: float = 30.0
    fps: float = 2.0
    n_objects: tuple[int, int] = (2, 5)
    categories: tuple[str, ...] = CATEGORIES
    size_range: tuple[float, float] = (10.0, 28.0)
    speed_range: tuple[float, float] = (0.2, 1.2)
    late_entry_prob: float = 0.5
    early_exit_prob: float = 0.2
    min_lifespan: int = 16
    sinusoidal_prob: float = 0.3
    layout: str = "free"  # "free" | "lanes" (one horizontal lane per object, no overlap)
    visibility_threshold: float = 0.3
    objects: tuple[ObjectSpec, ...] | None = None  # explicit scene; overrides sampling
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    @property
    def n_frames(self) -> int:
        return max(1, int(round(self.duration * self.fps)))

    def validate(self) -> None:
        if self.height <= 0 or self.width <= 0:
            raise ValueError("frame dimensions must be positive")
        check_positive(self.duration, "duration")
        check_positive(self.fps, "fps")
        lo, hi = self.n_objects
        if not 0 <= lo <= hi:
            raise ValueError(f"bad object count range {self.n_objects}")
        if not 0 < self.size_range[0] <= self.size_range[1]:
            raise ValueError(f"bad size range {self.size_range}")
        if self.layout not in ("free", "lanes"):
            raise ValueError(f"unknown layout {self.layout!r}")
        if not self.categories:
            raise ValueError("need at least one category")
        for p in ("late_entry_prob", "early_exit_prob", "sinusoidal_prob", "visibility_threshold"):
            check_probability(getattr(self, p), p)
        self.noise.validate()


@dataclass
class World:
    config: WorldConfig
    objects: tuple[ObjectSpec, ...]
    gt_db: MaskDatabase  # visible masks, instance id = object index + 1

    @property
    def n_frames(self) -> int:
        return self.gt_db.n_frames

    def object_id(self, index: int) -> int:
        return index + 1

    def visible_frames(self, object_id: int) -> list[int]:
        return self.gt_db.frames_of(object_id)


# -- world generation ----------------------------------------------------

def _sample_objects(cfg: WorldConfig, rng: np.random.Generator) -> tuple[ObjectSpec, ...]:
    T = cfg.n_frames
    n = int(rng.integers(cfg.n_objects[0], cfg.n_objects[1] + 1))
    lane_h = cfg.height / max(n, 1)
    objs = []
    for i in range(n):
        category = str(rng.choice(cfg.categories))
        color = str(rng.choice(COLORS))
        shape = str(rng.choice(("rectangle", "ellipse")))
        w, h = rng.uniform(*cfg.size_range, size=2)
        span = min(cfg.min_lifespan, T)
        entry = 0
        if T > span and rng.random() < cfg.late_entry_prob:
            entry = int(rng.integers(1, T - span + 1))
        exit_ = T - 1
        if rng.random() < cfg.early_exit_prob and entry + span - 1 < T - 1:
            exit_ = int(rng.integers(entry + span - 1, T - 1))
        speed = rng.uniform(*cfg.speed_range)
        motion = "sinusoidal" if rng.random() < cfg.sinusoidal_prob else "linear"
        if cfg.layout == "lanes":
            h = min(h, lane_h - 2)
            cy = lane_h * (i + 0.5)
            cx = rng.uniform(w / 2, cfg.width - w / 2)
            velocity = (float(speed * rng.choice((-1, 1))), 0.0)
            motion, amplitude = "linear", 0.0
        else:
            cx = rng.uniform(w / 2, cfg.width - w / 2)
            cy = rng.uniform(h / 2, cfg.height - h / 2)
            angle = rng.uniform(0, 2 * np.pi)
            velocity = (float(speed * np.cos(angle)), float(speed * np.sin(angle)))
            amplitude = float(rng.uniform(2, 6)) if motion == "sinusoidal" else 0.0
        objs.append(ObjectSpec(
            category=category, color=color, shape=shape, size=(float(w), float(h)),
            start=(float(cx), float(cy)), velocity=velocity, entry=entry, exit=exit_,
            motion=motion, amplitude=amplitude, period=float(rng.uniform(10, 30)),
        ))
    return tuple(objs)


def _reflect(x: float, lo: float, hi: float) -> float:
    if hi <= lo:
        return (lo + hi) / 2
    span = hi - lo
    y = (x - lo) % (2 * span)
    return lo + (y if y <= span else 2 * span - y)


def object_center(obj: ObjectSpec, t: int, height: int, width: int) -> tuple[float, float]:
    dt = t - obj.entry
    cx = obj.start[0] + obj.velocity[0] * dt
    cy = obj.start[1] + obj.velocity[1] * dt
    if obj.motion == "sinusoidal":
        # offset perpendicular to the direction of travel
        vx, vy = obj.velocity
        norm = np.hypot(vx, vy) or 1.0
        off = obj.amplitude * np.sin(2 * np.pi * dt / obj.period)
        cx += -vy / norm * off
        cy += vx / norm * off
    w, h = obj.size
    return _reflect(cx, w / 2, width - w / 2), _reflect(cy, h / 2, height - h / 2)


def rasterize_object(obj: ObjectSpec, t: int, height: int, width: int) -> np.ndarray:
    cx, cy = object_center(obj, t, height, width)
    w, h = obj.size
    ys = np.arange(height)[:, None] + 0.5
    xs = np.arange(width)[None, :] + 0.5
    if obj.shape == "rectangle":
        return (np.abs(xs - cx) <= w / 2) & (np.abs(ys - cy) <= h / 2)
    return ((xs - cx) / (w / 2)) ** 2 + ((ys - cy) / (h / 2)) ** 2 <= 1.0


def gen_world(cfg: WorldConfig) -> World:
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 0])
    objects = cfg.objects if cfg.objects is not None else _sample_objects(cfg, rng)
    T, H, W = cfg.n_frames, cfg.height, cfg.width
    for obj in objects:
        if obj.exit >= T or obj.entry < 0:
            raise ValueError(f"object lifespan {obj.entry}..{obj.exit} outside 0..{T - 1}")
    db = MaskDatabase(H, W, T, cfg.fps)
    for t in range(T):
        alive = [(i, rasterize_object(o, t, H, W)) for i, o in enumerate(objects) if o.entry <= t <= o.exit]
        cover = np.zeros((H, W), dtype=bool)
        for i, full in reversed(alive):  # highest id first: it sits on top
            visible = full & ~cover
            cover |= full
            area = np.count_nonzero(full)
            if area and np.count_nonzero(visible) >= cfg.visibility_threshold * area and visible.any():
                db.insert_mask(t, i + 1, objects[i].category, visible)
    return World(cfg, tuple(objects), db)


def render_frames(world: World, background: int = 128) -> list[np.ndarray]:
    """RGB frames (uint8, H x W x 3) with each visible mask filled in its colour."""
    H, W = world.gt_db.height, world.gt_db.width
    frames = []
    for t in range(world.n_frames):
        img = np.full((H, W, 3), background, dtype=np.uint8)
        for rec in world.gt_db.records(t):
            img[rle_decode(rec.mask)] = COLOR_RGB[world.objects[rec.instance_id - 1].color]
        frames.append(img)
    return frames


# -- detections and tracking -----------------------------------------------

def render_detections(world: World, noise: NoiseConfig | None = None, seed: int | None = None) -> list[Detection]:
    noise = world.config.noise if noise is None else noise
    noise.validate()
    seed = world.config.seed if seed is None else seed
    rng = np.random.default_rng([seed, 1])
    cfg = world.config
    H, W = cfg.height, cfg.width
    out = []
    for t in range(world.n_frames):
        for iid, box in world.gt_db.boxes(t).items():
            if rng.random() < noise.miss_prob:
                continue
            dx, dy = rng.normal(0.0, noise.jitter_sigma, size=2) if noise.jitter_sigma > 0 else (0.0, 0.0)
            box = _clip_box(BBox(box.x1 + dx, box.y1 + dy, box.x2 + dx, box.y2 + dy), H, W)
            category = world.objects[iid - 1].category
            if noise.category_confusion > 0 and rng.random() < noise.category_confusion:
                others = [c for c in cfg.categories if c != category]
                if others:
                    category = str(rng.choice(others))
            out.append(Detection(t, category, float(rng.uniform(0.5, 1.0)), box))
        n_fp = int(rng.poisson(noise.false_positive_rate)) if noise.false_positive_rate > 0 else 0
        for _ in range(n_fp):
            w, h = rng.uniform(*cfg.size_range, size=2)
            x1, y1 = rng.uniform(0, W - w), rng.uniform(0, H - h)
            out.append(Detection(t, str(rng.choice(cfg.categories)), float(rng.uniform(0.05, 0.6)),
                                 BBox(float(x1), float(y1), float(x1 + w), float(y1 + h))))
    return out


def _clip_box(b: BBox, height: int, width: int) -> BBox:
    x1, x2 = min(max(b.x1, 0.0), width), min(max(b.x2, 0.0), width)
    y1, y2 = min(max(b.y1, 0.0), height), min(max(b.y2, 0.0), height)
    return BBox(x1, y1, max(x1, x2), max(y1, y2))


class WorldTracker:
    """Segmenter/tracker oracle backed by the world's ground-truth masks.

    ``segment`` returns the visible mask of the object whose box best
    matches the prompt (IoU >= ``match_iou``), otherwise a box-shaped mask.
    ``propagate`` identifies the object under ``src_mask`` (mask IoU >=
    ``match_iou``) and returns its mask in ``dst_frame``; unidentifiable
    masks fail (``None``).
    """

    def __init__(self, world: World, match_iou: float = 0.3):
        self.world = world
        self.match_iou = match_iou
        self._cache: dict[int, dict[int, np.ndarray]] = {}

    def _masks(self, t: int) -> dict[int, np.ndarray]:
        if t not in self._cache:
            self._cache[t] = {r.instance_id: rle_decode(r.mask) for r in self.world.gt_db.records(t)}
        return self._cache[t]

    def segment(self, frame_index: int, box: BBox) -> np.ndarray | None:
        boxes = self.world.gt_db.boxes(frame_index)
        best = max(boxes, key=lambda k: (box_iou(box, boxes[k]), -k), default=None)
        if best is not None and box_iou(box, boxes[best]) >= self.match_iou:
            return self._masks(frame_index)[best].copy()
        H, W = self.world.gt_db.height, self.world.gt_db.width
        mask = np.zeros((H, W), dtype=bool)
        mask[int(np.floor(box.y1)):int(np.ceil(box.y2)), int(np.floor(box.x1)):int(np.ceil(box.x2))] = True
        return mask

    def identify(self, frame_index: int, mask: np.ndarray) -> int | None:
        masks = self._masks(frame_index)
        scores = {k: mask_iou(mask, m) for k, m in masks.items()}
        best = max(scores, key=lambda k: (scores[k], -k), default=None)
        if best is None or scores[best] < self.match_iou:
            return None
        return best

    def propagate(self, src_frame: int, src_mask: np.ndarray, dst_frame: int) -> np.ndarray | None:
        iid = self.identify(src_frame, src_mask)
        if iid is None:
            return None
        dst = self._masks(dst_frame).get(iid)
        if dst is None:
            return np.zeros_like(src_mask, dtype=bool)
        return dst.copy()


# -- episodes --------------------------------------------------------------

@dataclass(frozen=True)
class Candidate:
    instance_id: int
    interval: TemporalInterval


@dataclass
class Episode:
    sample_id: str
    db: MaskDatabase
    gt: GroundTruthTube
    target_id: int
    query: dict[str, str]
    candidates: list[Candidate]
    world: World | None = None


def object_attributes(world: World) -> dict[int, dict[str, str]]:
    """Query attributes of every object that is visible at least once."""
    W = world.gt_db.width
    stats = {}
    for i, obj in enumerate(world.objects):
        iid = i + 1
        frames = world.visible_frames(iid)
        if not frames:
            continue
        recs = [world.gt_db.frames[t][iid] for t in frames]
        area = float(np.mean([r.area for r in recs]))
        cx = float(np.mean([r.box.center[0] for r in recs]))
        vx, vy = obj.velocity
        if abs(vx) < 1e-9 and abs(vy) < 1e-9:
            motion = "static"
        elif abs(vx) >= abs(vy):
            motion = "right" if vx > 0 else "left"
        else:
            motion = "down" if vy > 0 else "up"
        stats[iid] = {"category": obj.category, "color": obj.color, "_area": area,
                      "motion": motion, "region": "left" if cx < W / 2 else "right"}
    if stats:
        median = float(np.median([s["_area"] for s in stats.values()]))
        for s in stats.values():
            s["size"] = "large" if s.pop("_area") >= median else "small"
    return stats


def unique_query(attrs: dict[int, dict[str, str]], target: int) -> dict[str, str]:
    """Smallest predicate set (in fixed predicate order) that singles out ``target``."""
    mine = attrs[target]
    for r in range(1, len(PREDICATES) + 1):
        for combo in itertools.combinations(PREDICATES, r):
            matches = [k for k, a in attrs.items() if all(a[p] == mine[p] for p in combo)]
            if matches == [target]:
                return {p: mine[p] for p in combo}
    raise NoUniqueObjectError(f"object {target} is indistinguishable from another object")


def frames_to_interval(f0: int, f1: int, fps: float) -> TemporalInterval:
    return TemporalInterval(f0 / fps, f1 / fps)


def gen_episode(world: World, seed: int = 0, subspan: bool = False, sample_id: str | None = None) -> Episode:
    rng = np.random.default_rng([seed, 2])
    attrs = object_attributes(world)
    if not attrs:
        raise NoUniqueObjectError("world has no visible objects")
    target = int(rng.choice(sorted(attrs)))
    query = unique_query(attrs, target)
    fps = world.gt_db.fps
    frames = world.visible_frames(target)
    f0, f1 = frames[0], frames[-1]
    if subspan and f1 > f0:
        length = int(rng.integers(max(1, (f1 - f0) // 4), f1 - f0 + 1))
        f0 = int(rng.integers(f0, f1 - length + 1))
        f1 = f0 + length
    interval = frames_to_interval(f0, f1, fps)
    boxes = {t: b for t, b in zip(*_tube_items(world.gt_db, target)) if f0 <= t <= f1}
    gt = GroundTruthTube(interval, boxes)
    cands = []
    for iid in sorted(attrs):
        fr = world.visible_frames(iid)
        for c in (Candidate(iid, frames_to_interval(fr[0], fr[-1], fps)), Candidate(iid, interval)):
            if c not in cands:
                cands.append(c)
    sid = sample_id if sample_id is not None else f"w{world.config.seed}-e{seed}"
    return Episode(sid, world.gt_db, gt, target, query, cands, world)


def _tube_items(db: MaskDatabase, iid: int):
    tube = tube_of(db, iid)
    return tube.frames, tube.boxes


def gen_corpus(cfg: WorldConfig, n: int, subspan: bool = False, max_tries: int | None = None) -> list[Episode]:
    """``n`` episodes from worlds seeded ``cfg.seed, cfg.seed+1, ...``, skipping
    worlds that cannot produce a uniquely describable target."""
    out, seed = [], cfg.seed
    limit = max_tries if max_tries is not None else 10 * n + 10
    while len(out) < n and seed - cfg.seed < limit:
        world = gen_world(replace(cfg, seed=seed))
        try:
            out.append(gen_episode(world, seed=seed, subspan=subspan, sample_id=f"ep{len(out):04d}"))
        except NoUniqueObjectError:
            pass
        seed += 1
    if len(out) < n:
        raise NoUniqueObjectError(f"only {len(out)} of {n} episodes could be generated")
    return out


def corrupt_tracks(db: MaskDatabase, fragmentation_p: float, seed: int = 0) -> MaskDatabase:
    """Split tubes: at each frame transition, with probability ``fragmentation_p``,
    the instance continues under a fresh ID for the rest of its tube."""
    check_probability(fragmentation_p, "fragmentation_p")
    rng = np.random.default_rng([seed, 3])
    out = MaskDatabase(db.height, db.width, db.n_frames, db.fps)
    ids = db.instance_ids()
    fresh = (max(ids) if ids else 0) + 1
    for iid in ids:
        label = iid
        for i, t in enumerate(db.frames_of(iid)):
            if i > 0 and rng.random() < fragmentation_p:
                label, fresh = fresh, fresh + 1
            rec = db.frames[t][iid]
            out.insert(t, replace(rec, instance_id=label))
    return out

