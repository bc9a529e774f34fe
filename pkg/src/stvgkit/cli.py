"""``stvgkit`` command line.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 internal
invariant violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import mask_db
from ._validation import DataError
from .config import ConfigError, RunConfig, load_config
from .grpo import (ToyEnv, convergence_target, converged_at, curve_csv, save_policy, train_toy)
from .identity import BuildDiagnostics, DetectionTracker, assemble_tubes, derive_answer
from .prompt_plan import (MarkerStyle, plan_dumps, plan_loads, plan_prompts, rasterize, read_ppm,
                          write_ppm)
from .rewards import read_transcripts, reward_total, rewards_csv
from .simulator import (NoUniqueObjectError, WorldTracker, gen_corpus, render_detections, render_frames)

log = logging.getLogger("stvgkit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--seed", type=int, help="shortcut for simulator.seed and grpo.seed")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and continue")


def _resolve(args) -> RunConfig:
    overrides = list(args.overrides)
    if getattr(args, "seed", None) is not None:
        overrides += [f"simulator.seed={args.seed}", f"grpo.seed={args.seed}"]
    if getattr(args, "no_redetection", False):
        overrides.append("identity.redetect_every=0")
    if getattr(args, "no_backward_tracking", False):
        overrides.append("identity.backward=false")
    if getattr(args, "reward_variant", None):
        overrides.append(f"rewards.variant={args.reward_variant}")
    if getattr(args, "theta", None) is not None:
        overrides.append(f"prompt.theta={args.theta}")
    if getattr(args, "repair", False):
        overrides.append("evaluation.repair=true")
    cfg = load_config(args.config, overrides).validate()
    if args.print_config:
        sys.stdout.write(cfg.dump())
    return cfg


def _write(path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, bytes):
        path.write_bytes(data)
    else:
        path.write_text(data, encoding="utf-8")


def _episodes(cfg: RunConfig):
    world_cfg = cfg.simulator.world_config()
    if world_cfg.n_objects[1] == 0:
        raise DataError("simulator config produces no objects, so no episode can be built")
    try:
        return gen_corpus(world_cfg, cfg.simulator.n_episodes, subspan=cfg.simulator.subspan)
    except NoUniqueObjectError as exc:
        raise DataError(str(exc)) from exc


# -- commands --------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out)
    eps = _episodes(cfg)
    out.mkdir(parents=True, exist_ok=True)
    gt_items, meta = [], []
    for ep in eps:
        mask_db.save(ep.db, out / f"{ep.sample_id}.maskdb.jsonl")
        mask_db.write_detections(render_detections(ep.world), out / f"{ep.sample_id}.detections.jsonl")
        gt_items.append((ep.sample_id, ep.gt, ep.target_id))
        meta.append({"sample_id": ep.sample_id, "world_seed": ep.world.config.seed, "query": ep.query,
                     "target_id": ep.target_id,
                     "candidates": [{"instance_id": c.instance_id, "t_s": c.interval.t_s, "t_e": c.interval.t_e}
                                    for c in ep.candidates]})
        if args.frames:
            for t, img in enumerate(render_frames(ep.world)):
                write_ppm(img, out / f"{ep.sample_id}.frames" / f"frame_{t:05d}.ppm")
    ev.write_ground_truth(gt_items, out / "ground_truth.jsonl")
    _write(out / "episodes.jsonl", "".join(json.dumps(m, sort_keys=True) + "\n" for m in meta))
    _write(out / "config.yaml", cfg.dump())
    log.info("wrote %d episodes to %s", len(eps), out)
    return 0


def cmd_build_db(args) -> int:
    cfg = _resolve(args)
    idc = cfg.identity
    opts = dict(redetect_every=idc.redetect_every or None, backward=idc.backward, iou_gate=idc.iou_gate,
                overlap_gate=idc.overlap_gate, detector_confidence=idc.detector_confidence)
    out = Path(args.out)
    report = {}
    if args.simulate:
        out.mkdir(parents=True, exist_ok=True)
        for ep in _episodes(cfg):
            w = ep.world
            diag = BuildDiagnostics()
            db = assemble_tubes(render_detections(w), WorldTracker(w), w.n_frames, w.gt_db.height,
                                w.gt_db.width, fps=w.gt_db.fps, diagnostics=diag, **opts)
            mask_db.save(db, out / f"{ep.sample_id}.maskdb.jsonl")
            report[ep.sample_id] = _diag_dict(diag)
    else:
        if not args.detections:
            raise UsageError("build-db needs --detections PATH or --simulate")
        dets = mask_db.read_detections(args.detections)
        height = args.height or int(np.ceil(max((d.box.y2 for d in dets), default=1)))
        width = args.width or int(np.ceil(max((d.box.x2 for d in dets), default=1)))
        n_frames = args.n_frames or (max((d.frame_index for d in dets), default=-1) + 1)
        diag = BuildDiagnostics()
        tracker = DetectionTracker(dets, height, width, detector_confidence=idc.detector_confidence)
        db = assemble_tubes(dets, tracker, n_frames, height, width, fps=cfg.simulator.fps,
                            diagnostics=diag, **opts)
        out.parent.mkdir(parents=True, exist_ok=True)
        mask_db.save(db, out)
        report = _diag_dict(diag)
    if args.diagnostics:
        _write(args.diagnostics, json.dumps(report, indent=2, sort_keys=True) + "\n")
    return 0


def _diag_dict(d: BuildDiagnostics) -> dict:
    out = asdict(d)
    out["fragments"] = len(d.truncations)
    return out


def _load_dbs(path):
    path = Path(path)
    if path.is_dir():
        return {p.name[: -len(".maskdb.jsonl")]: mask_db.load(p) for p in sorted(path.glob("*.maskdb.jsonl"))}
    return mask_db.load(path)


def cmd_plan_prompts(args) -> int:
    cfg = _resolve(args)
    p = cfg.prompt
    db = mask_db.load(args.db)
    plan = plan_prompts(db, p.theta, MarkerStyle(p.glyph_set, p.font_size, tuple(p.color)))
    _write(args.out, plan_dumps(plan))
    return 0


def cmd_rasterize(args) -> int:
    _resolve(args)
    plan = plan_loads(Path(args.plan).read_text(encoding="utf-8"))
    if args.frames_dir:
        files = sorted(Path(args.frames_dir).glob("*.ppm"))
        frames = [read_ppm(f) for f in files]
    else:
        frames = [np.zeros((plan.height, plan.width, 3), np.uint8) for _ in range(plan.n_frames)]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for t, img in enumerate(rasterize(plan, frames)):
        write_ppm(img, out / f"frame_{t:05d}.ppm")
    return 0


def _emit(report: ev.MetricReport, args) -> None:
    if args.json:
        _write(args.json, report.to_json() + "\n")
    if args.csv:
        _write(args.csv, ev.emit_report(report, "csv"))
    if args.markdown:
        _write(args.markdown, ev.emit_report(report, "markdown"))
    if not (args.json or args.csv or args.markdown):
        sys.stdout.write(ev.emit_report(report, "markdown").decode())


def cmd_score(args) -> int:
    cfg = _resolve(args)
    preds = ev.read_predictions(args.pred)
    gts, _ = ev.read_ground_truth(args.gt)
    if args.db is None and not args.temporal_only:
        raise UsageError("spatial metrics need --db (or pass --temporal-only)")
    db = None if args.temporal_only else _load_dbs(args.db)
    report = ev.score_stvg(preds, gts, db, repair=cfg.evaluation.repair)
    _emit(report, args)
    return 0


def cmd_upper_bound(args) -> int:
    cfg = _resolve(args)
    gts, _ = ev.read_ground_truth(args.gt)
    theta = cfg.prompt.theta if args.filter else None
    report = ev.upper_bound(_load_dbs(args.db), gts, theta=theta)
    _emit(report, args)
    return 0


def cmd_repair(args) -> int:
    _resolve(args)
    preds = ev.read_predictions(args.pred)
    dbs = _load_dbs(args.db)
    lines = []
    for sid in sorted(preds):
        view = ev.id_repair(preds[sid], ev._db_for(dbs, sid))
        for t, old, rule in view.events:
            lines.append(json.dumps({"sample_id": sid, "frame": t, "old_id": old,
                                     "new_id": view.target_id, "rule": rule}))
        for t in view.empty_frames:
            lines.append(json.dumps({"sample_id": sid, "frame": t, "old_id": None,
                                     "new_id": None, "rule": "no_boxes"}))
    _write(args.out, "".join(ln + "\n" for ln in lines))
    return 0


def cmd_train_toy(args) -> int:
    cfg = _resolve(args)
    g = cfg.grpo
    world_cfg = cfg.simulator.world_config()
    env = ToyEnv.from_simulator(world_cfg, n_episodes=g.n_episodes, n_candidates=g.n_candidates)
    result = train_toy(env, g.grpo_config(cfg.rewards.variant))
    out = Path(args.out_dir)
    _write(out / "curve.csv", curve_csv(result.curve))
    out.mkdir(parents=True, exist_ok=True)
    save_policy(result.policy, out / "policy.json")
    hit = converged_at(result.curve, convergence_target(cfg.rewards.variant))
    log.info("converged at update %s", hit)
    return 0


def cmd_report(args) -> int:
    _resolve(args)
    report = ev.MetricReport.from_json(Path(args.report).read_text(encoding="utf-8"))
    _emit(report, args)
    return 0


def cmd_reward(args) -> int:
    cfg = _resolve(args)
    transcripts = read_transcripts(args.transcripts)
    gts, targets = ev.read_ground_truth(args.gt)
    dbs = _load_dbs(args.db)
    rows = []
    for sid, text in transcripts:
        if sid not in gts:
            raise DataError(f"transcript {sid!r} has no ground truth")
        db = ev._db_for(dbs, sid)
        gt = gts[sid]
        target = targets[sid] if sid in targets else derive_answer(db, gt).answer
        rows.append((sid, reward_total(text, gt.interval, target, db, cfg.rewards.variant, gt_boxes=gt.boxes)))
    _write(args.out, rewards_csv(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stvgkit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate synthetic worlds, episodes and detections")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", action="store_true", help="also write rendered RGB frames (PPM)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("build-db", help="assemble a mask database from detections")
    _common(p)
    p.add_argument("--detections")
    p.add_argument("--simulate", action="store_true", help="build from simulator episodes instead")
    p.add_argument("--out", required=True, help="output file (or directory with --simulate)")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--n-frames", type=int)
    p.add_argument("--no-redetection", action="store_true")
    p.add_argument("--no-backward-tracking", action="store_true")
    p.add_argument("--diagnostics", help="write build diagnostics JSON here")
    p.set_defaults(func=cmd_build_db)

    p = sub.add_parser("plan-prompts", help="place instance labels for a mask database")
    _common(p)
    p.add_argument("--db", required=True)
    p.add_argument("--theta", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plan_prompts)

    p = sub.add_parser("rasterize", help="stamp a prompt plan onto frames")
    _common(p)
    p.add_argument("--plan", required=True)
    p.add_argument("--frames-dir")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_rasterize)

    for name, func, helptext in (("score", cmd_score, "score predictions against ground truth"),
                                 ("upper-bound", cmd_upper_bound, "best achievable score of a mask database")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        if name == "score":
            p.add_argument("--pred", required=True)
            p.add_argument("--repair", action="store_true", help="apply ID repair before vIoU")
            p.add_argument("--temporal-only", action="store_true")
            p.add_argument("--db")
        else:
            p.add_argument("--db", required=True)
            p.add_argument("--filter", action="store_true", help="apply size filtering (prompt.theta) first")
            p.add_argument("--theta", type=float)
        p.add_argument("--gt", required=True)
        p.add_argument("--csv")
        p.add_argument("--markdown")
        p.add_argument("--json")
        p.set_defaults(func=func)

    p = sub.add_parser("repair", help="list ID-repair relabelling events")
    _common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_repair)

    p = sub.add_parser("train-toy", help="GRPO on the synthetic candidate-answer environment")
    _common(p)
    p.add_argument("--reward-variant", choices=("decoupled", "coupled", "continuous_spatial", "no_format"))
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("report", help="render a JSON metric report as CSV/Markdown")
    _common(p)
    p.add_argument("--report", required=True)
    p.add_argument("--csv")
    p.add_argument("--markdown")
    p.add_argument("--json")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("reward", help="score transcripts with the reward model")
    _common(p)
    p.add_argument("--transcripts", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--reward-variant", choices=("decoupled", "coupled", "continuous_spatial", "no_format"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reward)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"stvgkit: error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError, KeyError) as exc:
        print(f"stvgkit: data error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:  # parameter validation outside the config loader
        print(f"stvgkit: error: {exc}", file=sys.stderr)
        return 1
    except AssertionError as exc:
        print(f"stvgkit: internal invariant violated: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
