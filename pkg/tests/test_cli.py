import json
import subprocess
import sys
import time

import pytest
import yaml

from stvgkit import mask_db
from stvgkit.cli import main
from stvgkit.config import load_config
from stvgkit.evaluation import Prediction, read_ground_truth, write_predictions


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert run("simulate", "--out", out, "--set", "simulator.n_episodes=6") == 0
    return out


def test_simulate_outputs_and_determinism(sim_dir, tmp_path):
    names = sorted(p.name for p in sim_dir.iterdir())
    assert "ground_truth.jsonl" in names and "episodes.jsonl" in names and "config.yaml" in names
    assert len([n for n in names if n.endswith(".maskdb.jsonl")]) == 6
    again = tmp_path / "again"
    assert run("simulate", "--out", again, "--set", "simulator.n_episodes=6") == 0
    for p in sim_dir.iterdir():
        assert (again / p.name).read_bytes() == p.read_bytes()


def test_simulate_zero_objects_is_data_error(tmp_path, capsys):
    assert run("simulate", "--out", tmp_path, "--set", "simulator.n_objects=[0,0]") == 2
    assert "no objects" in capsys.readouterr().err


def test_simulate_hundred_episodes_quickly(tmp_path):
    t0 = time.perf_counter()
    assert run("simulate", "--out", tmp_path, "--set", "simulator.n_episodes=100") == 0
    assert time.perf_counter() - t0 < 10


def test_print_config_lists_defaults(tmp_path, capsys):
    assert run("train-toy", "--out-dir", tmp_path, "--print-config", "--set", "grpo.updates=5") == 0
    dumped = yaml.safe_load(capsys.readouterr().out)
    assert dumped["identity"] == {"redetect_every": 15, "backward": True, "iou_gate": 0.4,
                                  "overlap_gate": 0.6, "detector_confidence": 0.25}
    assert dumped["prompt"]["theta"] == pytest.approx(1 / 3)
    assert dumped["prompt"]["font_size"] == 20 and dumped["grpo"]["n"] == 8


def test_config_file_and_errors(tmp_path, capsys):
    cfg = tmp_path / "run.yaml"
    cfg.write_text("grpo:\n  updates: 7\n  beta: 0\n")
    assert load_config(cfg).grpo.updates == 7
    assert run("train-toy", "--config", cfg, "--out-dir", tmp_path / "o") == 0
    assert len((tmp_path / "o" / "curve.csv").read_text().splitlines()) == 8
    cfg.write_text("grpo:\n  nonsense: 1\n")
    assert run("train-toy", "--config", cfg, "--out-dir", tmp_path) == 1
    assert run("train-toy", "--config", tmp_path / "missing.yaml", "--out-dir", tmp_path) == 1
    assert run("train-toy", "--set", "grpo.updates=abc", "--out-dir", tmp_path) == 1
    assert run("train-toy", "--set", "grpo.clip_eps=-1", "--out-dir", tmp_path) == 1
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 1


def test_build_db_from_simulator_matches_ground_truth(sim_dir, tmp_path):
    out = tmp_path / "built"
    assert run("build-db", "--simulate", "--out", out, "--set", "simulator.n_episodes=6",
               "--diagnostics", tmp_path / "diag.json") == 0
    for p in sim_dir.glob("*.maskdb.jsonl"):
        built, truth = mask_db.load(out / p.name), mask_db.load(p)
        assert sorted(built.frames_of(i) for i in built.instance_ids()) == \
            sorted(truth.frames_of(i) for i in truth.instance_ids())
    diag = json.loads((tmp_path / "diag.json").read_text())
    assert all("instances_found" in d and "fragments" in d for d in diag.values())


def test_no_redetection_finds_fewer(tmp_path):
    args = ["--simulate", "--set", "simulator.n_episodes=8", "--set", "simulator.late_entry_prob=1.0"]
    assert run("build-db", *args, "--out", tmp_path / "a", "--diagnostics", tmp_path / "a.json") == 0
    assert run("build-db", *args, "--no-redetection", "--out", tmp_path / "b",
               "--diagnostics", tmp_path / "b.json") == 0
    a = json.loads((tmp_path / "a.json").read_text())
    b = json.loads((tmp_path / "b.json").read_text())
    assert sum(d["instances_found"] for d in b.values()) < sum(d["instances_found"] for d in a.values())


def test_build_db_from_detections_file(sim_dir, tmp_path, capsys):
    det = sorted(sim_dir.glob("*.detections.jsonl"))[0]
    out = tmp_path / "db.jsonl"
    assert run("build-db", "--detections", det, "--out", out, "--height", 96, "--width", 96,
               "--n-frames", 60) == 0
    assert mask_db.load(out).n_frames == 60
    bad = tmp_path / "bad.jsonl"
    bad.write_text(det.read_text().splitlines()[0] + "\n{not json\n")
    assert run("build-db", "--detections", bad, "--out", out) == 2
    assert "bad.jsonl:2" in capsys.readouterr().err
    assert run("build-db", "--out", out) == 1


def write_oracle_predictions(sim_dir, path, shift=0.0):
    gts, targets = read_ground_truth(sim_dir / "ground_truth.jsonl")
    preds = [Prediction(sid, type(gt.interval)(gt.interval.t_s + shift, gt.interval.t_e + shift), targets[sid])
             for sid, gt in gts.items()]
    write_predictions(preds, path)


def test_score_and_report(sim_dir, tmp_path, capsys):
    pred = tmp_path / "pred.jsonl"
    write_oracle_predictions(sim_dir, pred)
    assert run("score", "--pred", pred, "--gt", sim_dir / "ground_truth.jsonl", "--db", sim_dir,
               "--csv", tmp_path / "r.csv", "--json", tmp_path / "r.json") == 0
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert rows[0] == "scope,metric,value"
    assert "summary,m_tIoU,100.0000" in rows
    assert run("report", "--report", tmp_path / "r.json", "--markdown", tmp_path / "r.md") == 0
    assert (tmp_path / "r.md").read_text().startswith("## STVG summary (%)")
    assert run("score", "--pred", pred, "--gt", sim_dir / "ground_truth.jsonl") == 1
    assert "--db" in capsys.readouterr().err
    assert run("score", "--pred", pred, "--gt", sim_dir / "ground_truth.jsonl", "--temporal-only") == 0
    assert run("score", "--pred", tmp_path / "nope.jsonl", "--gt", sim_dir / "ground_truth.jsonl",
               "--temporal-only") == 2


def test_repair_flag_never_lowers_viou(sim_dir, tmp_path):
    from stvgkit.simulator import corrupt_tracks
    broken = tmp_path / "broken"
    broken.mkdir()
    for p in sim_dir.glob("*.maskdb.jsonl"):
        mask_db.save(corrupt_tracks(mask_db.load(p), 0.3, seed=2), broken / p.name)
    pred = tmp_path / "pred.jsonl"
    write_oracle_predictions(sim_dir, pred, shift=0.5)
    gt = sim_dir / "ground_truth.jsonl"
    assert run("score", "--pred", pred, "--gt", gt, "--db", broken, "--json", tmp_path / "off.json") == 0
    assert run("score", "--pred", pred, "--gt", gt, "--db", broken, "--repair", "--json", tmp_path / "on.json") == 0
    off = json.loads((tmp_path / "off.json").read_text())
    on = json.loads((tmp_path / "on.json").read_text())
    assert on["summary"]["m_vIoU"] >= off["summary"]["m_vIoU"]
    for a, b in zip(on["rows"], off["rows"]):
        assert a["vIoU"] >= b["vIoU"]
    assert run("repair", "--pred", pred, "--db", broken, "--out", tmp_path / "events.jsonl") == 0
    events = [json.loads(x) for x in (tmp_path / "events.jsonl").read_text().splitlines()]
    assert events and {e["rule"] for e in events} <= {"match", "correction", "largest", "no_boxes"}


def test_upper_bound_command(sim_dir, tmp_path):
    gt = sim_dir / "ground_truth.jsonl"
    assert run("upper-bound", "--db", sim_dir, "--gt", gt, "--json", tmp_path / "ub.json") == 0
    assert run("upper-bound", "--db", sim_dir, "--gt", gt, "--filter", "--theta", 0.5,
               "--json", tmp_path / "ub_f.json") == 0
    full = json.loads((tmp_path / "ub.json").read_text())["summary"]["m_vIoU"]
    filt = json.loads((tmp_path / "ub_f.json").read_text())["summary"]["m_vIoU"]
    assert full >= 95 and filt <= full


def test_prompts_and_rasterize(sim_dir, tmp_path):
    db = sorted(sim_dir.glob("*.maskdb.jsonl"))[0]
    assert run("plan-prompts", "--db", db, "--out", tmp_path / "plan.jsonl") == 0
    assert run("rasterize", "--plan", tmp_path / "plan.jsonl", "--out-dir", tmp_path / "frames") == 0
    frames = sorted((tmp_path / "frames").glob("*.ppm"))
    assert len(frames) == 60
    assert run("rasterize", "--plan", tmp_path / "plan.jsonl", "--out-dir", tmp_path / "frames2") == 0
    assert all(a.read_bytes() == (tmp_path / "frames2" / a.name).read_bytes() for a in frames)


def test_train_toy_deterministic_and_variants(tmp_path):
    for d in ("a", "b"):
        assert run("train-toy", "--out-dir", tmp_path / d, "--set", "grpo.updates=60") == 0
    assert (tmp_path / "a" / "curve.csv").read_bytes() == (tmp_path / "b" / "curve.csv").read_bytes()
    assert (tmp_path / "a" / "policy.json").read_bytes() == (tmp_path / "b" / "policy.json").read_bytes()
    assert run("train-toy", "--out-dir", tmp_path / "c", "--reward-variant", "coupled",
               "--set", "grpo.updates=20", "--set", "grpo.beta=0") == 0


def test_reward_command(sim_dir, tmp_path):
    gts, targets = read_ground_truth(sim_dir / "ground_truth.jsonl")
    from stvgkit.rewards import render_transcript
    lines = [json.dumps({"sample_id": sid, "text": render_transcript(gt.interval, targets[sid])})
             for sid, gt in gts.items()]
    (tmp_path / "t.jsonl").write_text("\n".join(lines) + "\n")
    assert run("reward", "--transcripts", tmp_path / "t.jsonl", "--gt", sim_dir / "ground_truth.jsonl",
               "--db", sim_dir, "--out", tmp_path / "r.csv") == 0
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert len(rows) == len(gts) + 1
    assert all(r.split(",")[4] == "3.000000" for r in rows[1:])


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "stvgkit.cli", "train-toy", "--out-dir", tmp_path,
                           "--set", "grpo.updates=2"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
