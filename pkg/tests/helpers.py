"""Small builders shared by several test modules."""
import numpy as np

from stvgkit.geometry import BBox
from stvgkit.mask_db import MaskDatabase
from stvgkit.simulator import ObjectSpec, WorldConfig


def square(h, w, r0, c0, r1, c1):
    m = np.zeros((h, w), bool)
    m[r0:r1, c0:c1] = True
    return m


def db_from_boxes(per_frame, n_frames, height=64, width=64, categories=None, fps=2.0):
    """``per_frame``: {frame: {id: (x1, y1, x2, y2)}} with integer pixel boxes."""
    db = MaskDatabase(height, width, n_frames, fps)
    categories = categories or {}
    for t, items in per_frame.items():
        for iid, (x1, y1, x2, y2) in items.items():
            db.insert_mask(t, iid, categories.get(iid, "thing"), square(height, width, y1, x1, y2, x2))
    return db


def random_db(rng, n_frames=50, height=24, width=32, max_ids=6):
    db = MaskDatabase(height, width, n_frames, 2.0)
    cats = {i: ("a", "b")[i % 2] for i in range(1, max_ids + 1)}
    for t in range(n_frames):
        for iid in range(1, max_ids + 1):
            if rng.random() < 0.5:
                m = rng.random((height, width)) < rng.uniform(0.01, 0.3)
                if m.any():
                    db.insert_mask(t, iid, cats[iid], m)
    return db


def box_to_tuple(b: BBox):
    return b.as_tuple()


def static_object(x, y, w, h, entry, exit_, category="person", color="red"):
    return ObjectSpec(category=category, color=color, shape="rectangle", size=(w, h),
                      start=(x, y), velocity=(0.0, 0.0), entry=entry, exit=exit_)


def scene(objects, n_frames=60, size=64, fps=2.0, **kw):
    return WorldConfig(seed=0, height=size, width=size, duration=n_frames / fps, fps=fps,
                       objects=tuple(objects), **kw)


def random_transcript(rng, n_frames=60, fps=2.0, max_id=6):
    """Mix of well-formed, malformed and adversarial responses."""
    dur = n_frames / fps
    s, e = (float(v) for v in sorted(rng.uniform(-2, dur + 2, 2)))
    iid = int(rng.integers(0, max_id + 2))
    body = f"start={s!r} end={e!r} id={iid}"
    kind = int(rng.integers(0, 9))
    if kind == 0:
        return f"<answer>{body}</answer>"
    if kind == 1:
        return f"<think>hm</think><answer>start=x end={e} id={iid}</answer>"
    if kind == 2:
        return f"<think>a</think><think>b</think><answer>{body}</answer>"
    if kind == 3:
        return f"<answer>{body}</answer><think>late</think>"
    if kind == 4:
        return f"<think>swap</think><answer>start={e!r} end={s!r} id={iid}</answer>"
    if kind == 5:
        return "".join(chr(int(c)) for c in rng.integers(32, 127, int(rng.integers(0, 60))))
    return f"  <think>{'why ' * int(rng.integers(0, 5))}</think>\n<answer> {body} </answer> "
