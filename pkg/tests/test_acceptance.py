"""Acceptance criteria, one test each.

Every test records a single PASS/FAIL line; the lines are printed at the end
of the pytest run (see ``conftest.py``) and when this file is executed
directly with ``python3 tests/test_acceptance.py``.
"""
import time

import numpy as np
import pytest

from oracles import bit_iou, enumerated_viou, grid_iou, grid_overlap_min, runs_naive, sampled_tiou
from stvgkit.evaluation import Prediction, id_repair, score_stvg, upper_bound, viou
from stvgkit.geometry import BBox, TemporalInterval, box_iou, overlap_ratio_min, temporal_iou
from stvgkit.grpo import (GrpoConfig, ToyPolicy, converged_at, convergence_target, default_env,
                          grpo_gradient, grpo_objective, normalize_advantages, surrogate_term,
                          train_toy)
from stvgkit.identity import GroundTruthTube, assemble_tubes
from stvgkit.mask_db import MaskDatabase
from stvgkit.masks import MalformedRLEError, RleMask, mask_iou, rle_decode, rle_encode
from stvgkit.prompt_plan import frame_budget
from stvgkit.rewards import parse_transcript, reward_total
from stvgkit.simulator import WorldConfig, WorldTracker, corrupt_tracks, gen_corpus, render_detections

RESULTS: dict[int, str] = {}


def record(number: int, title: str, ok: bool, detail: str) -> None:
    RESULTS[number] = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail}"
    assert ok, RESULTS[number]


# -- 1 ---------------------------------------------------------------------------

def test_01_oracle_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    n = 150
    worst = {"box_iou": 0.0, "overlap_min": 0.0, "temporal_iou": 0.0, "mask_iou": 0.0, "viou": 0.0,
             "box_iou_grid_rel": 0.0}
    for _ in range(n):
        # integer boxes: unit-cell counting is exact
        a = tuple(int(v) for v in (*rng.integers(0, 40, 2), 0, 0))
        a = (a[0], a[1], a[0] + int(rng.integers(1, 30)), a[1] + int(rng.integers(1, 30)))
        b0 = rng.integers(0, 40, 2)
        b = (int(b0[0]), int(b0[1]), int(b0[0] + rng.integers(1, 30)), int(b0[1] + rng.integers(1, 30)))
        worst["box_iou"] = max(worst["box_iou"], abs(box_iou(BBox(*a), BBox(*b)) - grid_iou(a, b)))
        worst["overlap_min"] = max(worst["overlap_min"],
                                   abs(overlap_ratio_min(BBox(*a), BBox(*b)) - grid_overlap_min(a, b)))
        # continuous boxes against a fine grid
        fa = rng.uniform(0, 20, 2)
        fb = fa + rng.uniform(-6, 6, 2)
        ca = (*fa, *(fa + rng.uniform(4, 10, 2)))
        cb = (*fb, *(fb + rng.uniform(4, 10, 2)))
        exact = box_iou(BBox(*ca), BBox(*cb))
        approx = grid_iou(ca, cb, step=0.01)
        if exact > 0.05:
            worst["box_iou_grid_rel"] = max(worst["box_iou_grid_rel"], abs(exact - approx) / exact)
        # intervals on a millisecond grid: midpoint sampling is exact
        p = tuple(sorted(np.round(rng.uniform(0, 20, 2), 3)))
        g = tuple(sorted(np.round(rng.uniform(0, 20, 2), 3)))
        if p[1] > p[0] and g[1] > g[0]:
            worst["temporal_iou"] = max(worst["temporal_iou"],
                                        abs(temporal_iou(TemporalInterval(*p), TemporalInterval(*g)) - sampled_tiou(p, g)))
        ma = rng.random((20, 25)) < rng.uniform(0.05, 0.6)
        mb = rng.random((20, 25)) < rng.uniform(0.05, 0.6)
        worst["mask_iou"] = max(worst["mask_iou"], abs(mask_iou(ma, mb) - bit_iou(ma, mb)))
        # vIoU against frame enumeration
        frames = 20
        pred_boxes, gt_boxes = {}, {}
        db = MaskDatabase(48, 48, frames, 2.0)
        for t in range(frames):
            x, y = (int(v) for v in rng.integers(0, 30, 2))
            gt_boxes[t] = (x, y, x + int(rng.integers(2, 15)), y + int(rng.integers(2, 15)))
            if rng.random() < 0.8:
                x, y = (int(v) for v in rng.integers(0, 30, 2))
                pred_boxes[t] = (x, y, x + int(rng.integers(2, 15)), y + int(rng.integers(2, 15)))
                m = np.zeros((48, 48), bool)
                m[pred_boxes[t][1]:pred_boxes[t][3], pred_boxes[t][0]:pred_boxes[t][2]] = True
                db.insert_mask(t, 1, "x", m)
        ps, pe = sorted(np.round(rng.uniform(0, 9.5, 2) * 4) / 4)
        gs, ge = sorted(np.round(rng.uniform(0, 9.5, 2) * 4) / 4)
        gt = GroundTruthTube(TemporalInterval(gs, ge), {t: BBox(*bx) for t, bx in gt_boxes.items()})
        got = viou(Prediction("s", TemporalInterval(ps, pe), 1), gt, db)
        worst["viou"] = max(worst["viou"], abs(got - enumerated_viou((ps, pe), (gs, ge), pred_boxes, gt_boxes, 2.0, frames)))
    elapsed = time.perf_counter() - t0
    exact_ok = all(v <= 1e-9 for k, v in worst.items() if k != "box_iou_grid_rel")
    ok = exact_ok and worst["box_iou_grid_rel"] <= 0.02 and elapsed < 30
    detail = ", ".join(f"{k} {v:.2e}" for k, v in worst.items()) + f"; {n} instances each, {elapsed:.1f}s"
    record(1, "geometry/metric oracles", ok, detail)


# -- 2 ---------------------------------------------------------------------------

def test_02_rle_codec():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    exact = 0
    for _ in range(1000):
        h, w = (int(v) for v in rng.integers(1, 64, 2))
        m = rng.random((h, w)) < rng.random()
        r = rle_encode(m)
        exact += np.array_equal(rle_decode(r), m) and list(r.runs) == runs_naive(m)
    rejected = 0
    for bad in (RleMask(4, 4, (3, 4)), RleMask(4, 4, (20,)), RleMask(2, 2, (5, -1)), RleMask(2, 2, ())):
        try:
            rle_decode(bad)
        except MalformedRLEError:
            rejected += 1
    elapsed = time.perf_counter() - t0
    ok = exact == 1000 and rejected == 4 and elapsed < 5
    record(2, "RLE codec", ok, f"{exact}/1000 exact round trips, {rejected}/4 malformed rejected, {elapsed:.2f}s")


# -- 3 ---------------------------------------------------------------------------

def test_03_advantages():
    rng = np.random.default_rng(3)
    worst_mean = worst_std = 0.0
    groups = 0
    while groups < 10 ** 4:
        r = rng.normal(size=8) * rng.uniform(0.01, 5) + rng.uniform(-3, 3)
        if np.std(r) == 0:
            continue
        a = normalize_advantages(r)
        worst_mean = max(worst_mean, abs(a.mean()))
        worst_std = max(worst_std, abs(a.std() - 1))
        groups += 1
    pair = normalize_advantages([0, 2]).tolist()
    ok = worst_mean < 1e-9 and worst_std < 1e-9 and pair == [-1.0, 1.0]
    record(3, "advantage normalisation", ok,
           f"max |mean| {worst_mean:.1e}, max |std-1| {worst_std:.1e} over 1e4 groups; [0,2] -> {pair}")


# -- 4 ---------------------------------------------------------------------------

def test_04_surrogate_and_gradient():
    cases = [surrogate_term(1.0, 0.37, 0.2), surrogate_term(2.0, 1.0, 0.2), surrogate_term(0.5, -1.0, 0.2)]
    cases_ok = abs(cases[0] - 0.37) < 1e-12 and abs(cases[1] - 1.2) < 1e-12 and abs(cases[2] + 0.8) < 1e-12
    env = default_env(0)
    rng = np.random.default_rng(11)
    worst, checked = 0.0, 0
    while checked < 50:
        ep = env.episodes[checked % len(env.episodes)]
        X = ep.features
        old = ToyPolicy(rng.normal(size=X.shape[1]), rng.normal(size=X.shape[0]), float(rng.uniform(0.5, 2)))
        pol = old.with_params(old.params() + rng.normal(scale=0.3, size=old.n_params))
        ref = ToyPolicy(rng.normal(size=X.shape[1]), rng.normal(size=X.shape[0]), old.temperature)
        old_p, ref_p = old.probs(X), ref.probs(X)
        samples = [int(s) for s in rng.choice(X.shape[0], size=8, p=old_p)]
        adv = normalize_advantages(rng.normal(size=8))
        ratios = pol.probs(X)[samples] / old_p[samples]
        if np.min(np.abs(np.abs(ratios - 1) - 0.2)) < 1e-3:
            continue  # a clip kink is not differentiable
        g = grpo_gradient(pol, X, old_p, ref_p, samples, adv, 0.2, 0.04)
        theta, h = pol.params(), 1e-5
        fd = np.empty_like(theta)
        for i in range(theta.size):
            e = np.zeros_like(theta)
            e[i] = h
            f = lambda th: grpo_objective(pol.with_params(th), X, old_p, ref_p, samples, adv, 0.2, 0.04)  # noqa: E731
            fd[i] = (f(theta + e) - f(theta - e)) / (2 * h)
        rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-6)
        worst = max(worst, float(rel.max()))
        checked += 1
    ok = cases_ok and worst < 1e-4
    record(4, "clipped surrogate and gradient", ok,
           f"hand cases {['%.3f' % c for c in cases]}, max FD relative error {worst:.2e} on {checked} episodes")


# -- 5 ---------------------------------------------------------------------------

def test_05_toy_grpo_convergence():
    env = default_env(0)
    parts, ok = [], True
    for variant in ("decoupled", "no_format", "coupled"):
        cfg = GrpoConfig(reward_variant=variant, updates=2000, n=8)
        t0 = time.perf_counter()
        run = train_toy(env, cfg)
        elapsed = time.perf_counter() - t0
        hit = converged_at(run.curve, convergence_target(variant))
        deterministic = True
        if variant == "decoupled":
            deterministic = train_toy(env, cfg).curve == run.curve
        ok &= hit is not None and deterministic and elapsed < 60
        parts.append(f"{variant}: reached {convergence_target(variant):.2f} at update {hit}"
                     f"{' (deterministic)' if variant == 'decoupled' and deterministic else ''} in {elapsed:.1f}s")
    record(5, "toy GRPO convergence", ok, "; ".join(parts))


# -- shared corpus for 6-9 ---------------------------------------------------------

def _build(ep, **opts):
    w = ep.world
    return assemble_tubes(render_detections(w), WorldTracker(w), w.n_frames, w.gt_db.height, w.gt_db.width,
                          fps=w.gt_db.fps, **opts)


def _identity_coverage(truth, built):
    """Per ground-truth object: (frames owned by its best built instance, visible frames).

    A built instance owns a frame when it stores exactly the object's mask there.
    """
    out = []
    for iid in truth.instance_ids():
        frames = truth.frames_of(iid)
        owners = {}
        for t in frames:
            for k, rec in built.frames[t].items():
                if rec.mask == truth.frames[t][iid].mask:
                    owners[k] = owners.get(k, 0) + 1
        out.append((max(owners.values(), default=0), len(frames)))
    return out


@pytest.fixture(scope="module")
def corpus():
    # lanes keep objects apart, which is the precondition of the re-detection gate
    eps = gen_corpus(WorldConfig(seed=0, layout="lanes"), 200)
    return {"episodes": eps, "full": {ep.sample_id: _build(ep) for ep in eps},
            "gts": {ep.sample_id: ep.gt for ep in eps}}


# -- 6 ---------------------------------------------------------------------------

def test_06_pipeline_closure(corpus):
    eps = corpus["episodes"][:100]
    cov = [c for ep in eps for c in _identity_coverage(ep.world.gt_db, corpus["full"][ep.sample_id])]
    coverage = 100.0 * sum(a for a, _ in cov) / sum(b for _, b in cov)
    complete = sum(a == b for a, b in cov)
    ub = upper_bound({ep.sample_id: corpus["full"][ep.sample_id] for ep in eps},
                     {ep.sample_id: ep.gt for ep in eps}, theta=0.0).summary["m_vIoU"]
    # free layout for reference: objects overlapping at every check frame are gated out
    free = gen_corpus(WorldConfig(seed=0), 100)
    free_cov = [c for ep in free for c in _identity_coverage(ep.world.gt_db, _build(ep))]
    merged = sum(a == 0 for a, _ in free_cov)
    ok = coverage == 100.0 and ub >= 95
    record(6, "pipeline closure", ok,
           f"coverage {coverage:.1f}% of visible frames, {complete}/{len(cov)} objects complete, "
           f"upper-bound m_vIoU {ub:.2f} (theta 0, {len(eps)} lane episodes); "
           f"free layout: {merged}/{len(free_cov)} objects absorbed by the gate")


# -- 7 ---------------------------------------------------------------------------

def test_07_redetection_and_backward_ablation(corpus):
    eps = corpus["episodes"][:100]
    gts = {ep.sample_id: ep.gt for ep in eps}
    scores = {}
    for name, opts in (("full", None), ("no-backward", {"backward": False}), ("no-redetection", {"redetect_every": None})):
        dbs = {ep.sample_id: corpus["full"][ep.sample_id] if opts is None else _build(ep, **opts) for ep in eps}
        scores[name] = upper_bound(dbs, gts).summary["m_vIoU"]
    late = sum(any(o.entry > 0 for o in ep.world.objects) for ep in eps)
    drop_back = scores["full"] - scores["no-backward"]
    drop_redet = scores["full"] - scores["no-redetection"]
    ok = drop_redet > 0 and 0 <= drop_back < drop_redet
    record(7, "re-detection/backward ablation trend", ok,
           f"m_vIoU full {scores['full']:.2f}, no-backward {scores['no-backward']:.2f}, "
           f"no-redetection {scores['no-redetection']:.2f} ({late}/{len(eps)} scenes with late entries)")


# -- 8 ---------------------------------------------------------------------------

def test_08_size_filter_trend(corpus):
    third = upper_bound(corpus["full"], corpus["gts"], theta=1 / 3).summary["m_vIoU"]
    half = upper_bound(corpus["full"], corpus["gts"], theta=1 / 2).summary["m_vIoU"]
    ok = half < third
    record(8, "size-filter trend", ok,
           f"upper-bound m_vIoU theta 1/3 {third:.2f} vs theta 1/2 {half:.2f} on {len(corpus['gts'])} episodes")


# -- 9 ---------------------------------------------------------------------------

def test_09_id_repair(corpus):
    rng = np.random.default_rng(9)
    frames_checked = frames_present = 0
    worse = 0
    on_all, off_all = [], []
    for i, ep in enumerate(corpus["episodes"]):
        broken = corrupt_tracks(corpus["full"][ep.sample_id], 0.3, seed=i)
        target = max(broken.instance_ids(),
                     key=lambda k: (sum(1 for t in ep.gt.boxes if k in broken.boxes(t)), -k))
        shift = float(rng.uniform(-2, 2))
        iv = ep.gt.interval
        pred = Prediction(ep.sample_id, TemporalInterval(max(0.0, iv.t_s + shift), max(0.0, iv.t_e + shift)), target)
        view = id_repair(pred, broken)
        for t in view.frames:
            if broken.boxes(t):
                frames_checked += 1
                frames_present += target in view.boxes(t)
        off = score_stvg([pred], {ep.sample_id: ep.gt}, broken, repair=False).rows[0]["vIoU"]
        on = score_stvg([pred], {ep.sample_id: ep.gt}, broken, repair=True).rows[0]["vIoU"]
        worse += on < off
        on_all.append(on)
        off_all.append(off)
    ok = frames_present == frames_checked and worse == 0
    record(9, "ID-Repair", ok,
           f"target present in {frames_present}/{frames_checked} segment frames with boxes; "
           f"{worse} samples worse; m_vIoU off {100 * np.mean(off_all):.2f} -> on {100 * np.mean(on_all):.2f}")


# -- 10 --------------------------------------------------------------------------

def test_10_reward_bounds():
    from helpers import db_from_boxes, random_transcript
    per = {t: {1: (0, 0, 10, 10)} for t in range(10, 40)}
    for t in range(0, 60):
        per.setdefault(t, {})[2] = (30, 30, 40, 40)
    db = db_from_boxes(per, 60)
    gt = TemporalInterval(5, 19.5)
    rng = np.random.default_rng(10)
    out_of_range = bad_spatial = bad_unparsed = parsed = 0
    for _ in range(10 ** 4):
        text = random_transcript(rng, 60, max_id=3)
        t = parse_transcript(text)
        parsed += t.answer is not None
        rb = reward_total(t, gt, 1, db)
        out_of_range += not (0 <= rb.total <= 3)
        if rb.r_s == 1:
            a = t.answer
            in_segment = any(a.interval.contains(db.seconds(f)) for f in db.frames_of(a.instance_id))
            bad_spatial += not (a.instance_id == 1 and in_segment)
        if t.answer is None:
            bad_unparsed += rb.r_t != 0 or rb.r_s != 0
    ok = out_of_range == 0 and bad_spatial == 0 and bad_unparsed == 0 and 0 < parsed < 10 ** 4
    record(10, "reward bounds", ok,
           f"{out_of_range} totals outside [0,3], {bad_spatial} unverified r_s=1, "
           f"{bad_unparsed} unparsed with nonzero r_t/r_s ({parsed} of 10000 parsed)")


# -- 11 --------------------------------------------------------------------------

def test_11_frame_budget():
    n, h, w = frame_budget(30, 1.6e6)
    rel = abs(h * w * 3 - 27648) / 27648
    ok = n == 60 and rel <= 0.10
    record(11, "frame budget", ok, f"{n} frames of {h}x{w}x3 = {h * w * 3} values ({100 * rel:.1f}% from 27648)")


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
