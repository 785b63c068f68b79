import csv
import json

import pytest

from astra.cli import load_flag_sets, main, num_workers
from astra.core import AblationFlags
from astra.data import SyntheticSpec
from conftest import tiny_config


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = SyntheticSpec(num_timelines=6, duration_s=40, num_classes=3, class_weights=[1, 1, 1],
                         non_visible_prob=[0.2] * 3, jitter_std=[0, 0, 0], visual_dims=(5, 4),
                         audio_patch=(4, 4), action_rate=0.15, valid_fraction=0.2, test_fraction=0.2, seed=2)
    (root / "spec.json").write_text(json.dumps(spec.to_dict()))
    assert main(["generate-data", "--spec", str(root / "spec.json"), "--out", str(root / "data")]) == 0
    return root


def _perfect(data_dir, out):
    out.mkdir(exist_ok=True)
    for p in (data_dir / "data" / "annotations").glob("*.json"):
        ann = json.loads(p.read_text())
        rows = [{"class_id": a["class_id"], "time_s": a["time_s"], "confidence": 1.0} for a in ann["actions"]]
        (out / p.name).write_text(json.dumps(rows))
    return out


def test_eval_assert_min_exit_codes(data_dir, tmp_path):
    dets = _perfect(data_dir, tmp_path / "dets")
    ann = str(data_dir / "data" / "annotations")
    assert main(["eval", "--detections", str(dets), "--annotations", ann, "--assert-min", "0.99"]) == 0
    for p in dets.glob("*.json"):
        p.write_text("[]")
    assert main(["eval", "--detections", str(dets), "--annotations", ann, "--assert-min", "0.5"]) == 1
    report = tmp_path / "r.json"
    assert main(["eval", "--detections", str(dets), "--annotations", ann, "--subset", "non-visible",
                 "--metric", "loose", "--out", str(report)]) == 0
    assert "loose/non_visible" in json.loads(report.read_text())["slices"]


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as e:
        main(["eval", "--bogus"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 2


def test_missing_input_exits_2(tmp_path):
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--data", str(tmp_path),
                 "--out", str(tmp_path / "o")]) == 2


def test_num_workers_cap(monkeypatch):
    monkeypatch.setenv("ASTRA_NUM_WORKERS", "2")
    assert num_workers(8) == 2 and num_workers(None) == 2
    monkeypatch.delenv("ASTRA_NUM_WORKERS")
    assert num_workers(None) == 1 and num_workers(3) == 3


def test_flag_set_formats(tmp_path):
    p = tmp_path / "f.json"
    p.write_text(json.dumps(["M0", "M9"]))
    assert list(load_flag_sets(p)) == ["M0", "M9"]
    p.write_text(json.dumps({"noaudio": {"use_audio": False}, "full": "M9"}))
    sets = load_flag_sets(p)
    assert sets["full"] == AblationFlags.preset("M9") and not sets["noaudio"].use_audio


def test_train_infer_eval_report_and_ablate(data_dir, tmp_path):
    cfg = tiny_config(clip_seconds=10, epochs=1, clips_per_epoch=8, eval_every=1).to_dict()
    (tmp_path / "cfg.json").write_text(json.dumps({"pipeline": cfg, "flags": None}))
    data = str(data_dir / "data")
    run = tmp_path / "run"
    assert main(["train", "--config", str(tmp_path / "cfg.json"), "--data", data, "--seed", "1",
                 "--out", str(run)]) == 0
    for refine, name in ((True, "ref"), (False, "noref")):
        argv = ["infer", "--checkpoint", str(run / "model.ckpt"), "--data", data, "--out", str(tmp_path / name)]
        assert main(argv + ([] if refine else ["--no-refine"])) == 0
    # ensemble of the same checkpoint twice
    assert main(["infer", "--checkpoint", f"{run / 'model.ckpt'},{run / 'model.ckpt'}", "--data", data,
                 "--out", str(tmp_path / "ens")]) == 0
    ann = str(data_dir / "data" / "annotations")
    for name in ("ref", "noref"):
        assert main(["eval", "--detections", str(tmp_path / name), "--annotations", ann,
                     "--out", str(tmp_path / f"{name}.json")]) == 0
    assert main(["report", "--runs", f"{tmp_path / 'noref.json'},{tmp_path / 'ref.json'}",
                 "--out", str(tmp_path / "d.csv")]) == 0
    assert (tmp_path / "d.csv").read_text().startswith("metric,subset,class,delta")
    assert main(["report", "--runs", str(tmp_path / "ref.json"), "--out", str(tmp_path / "x.csv")]) == 2

    (tmp_path / "flags.json").write_text(json.dumps({"full": "M9", "noaudio": {"use_audio": False}}))
    table = tmp_path / "table.csv"
    assert main(["ablate", "--config", str(tmp_path / "cfg.json"), "--flags", str(tmp_path / "flags.json"),
                 "--seeds", "2", "--data", data, "--out", str(table)]) == 0
    rows = list(csv.DictReader(open(table)))
    assert [r["name"] for r in rows] == ["full", "noaudio"]
    assert all(r["seeds"] == "2" and 0 <= float(r["tight_mean"]) <= 1 for r in rows)


def test_idempotent_outputs(data_dir, tmp_path):
    cfg = tiny_config(clip_seconds=10, epochs=1, clips_per_epoch=8).to_dict()
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    data = str(data_dir / "data")
    outs = []
    for k in range(2):
        run = tmp_path / f"run{k}"
        assert main(["train", "--config", str(tmp_path / "cfg.json"), "--data", data, "--out", str(run)]) == 0
        assert main(["infer", "--checkpoint", str(run / "model.ckpt"), "--data", data,
                     "--out", str(tmp_path / f"d{k}")]) == 0
        outs.append(run)
    assert (outs[0] / "model.ckpt").read_bytes() == (outs[1] / "model.ckpt").read_bytes()
    for p in (tmp_path / "d0").glob("*.json"):
        assert p.read_bytes() == (tmp_path / "d1" / p.name).read_bytes()
