import csv
import json

import pytest

from detal.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, load_config, main
from detal.formats import read_jsonl

SMALL = {"config": {"epochs_stage1": 2, "epochs_stage2": 1},
         "synth": {"num_videos": 3, "num_test_videos": 2, "T_range": [80, 100],
                   "instances_per_video_range": [1, 3]}}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "run.json").write_text(json.dumps(SMALL))
    assert main(["synth", "--config", str(d / "run.json"), "--out", str(d / "ds")]) == EXIT_OK
    assert main(["train", "--config", str(d / "run.json"), "--data", str(d / "ds"), "--out", str(d / "run")]) == EXIT_OK
    return d


def test_train_writes_artifacts(workdir):
    for name in ("stage1.ckpt", "stage2_0.ckpt", "final.ckpt", "pool_0.jsonl", "epochs.csv", "summary.json"):
        assert (workdir / "run" / name).exists(), name


def test_stage_split_equals_two_stage(workdir):
    d = workdir
    args = ["--config", str(d / "run.json"), "--data", str(d / "ds")]
    assert main(["train", *args, "--stage", "1", "--out", str(d / "s1")]) == EXIT_OK
    assert main(["train", *args, "--stage", "2", "--init", str(d / "s1" / "stage1.ckpt"),
                 "--out", str(d / "s2")]) == EXIT_OK
    assert (d / "s2" / "final.ckpt").read_bytes() == (d / "run" / "final.ckpt").read_bytes()


def test_ablation_flag_recorded(workdir):
    d = workdir
    assert main(["train", "--config", str(d / "run.json"), "--data", str(d / "ds"), "--out", str(d / "nohb"),
                 "--no-hb", "--no-eb"]) == EXIT_OK
    summary = json.loads((d / "nohb" / "summary.json").read_text())
    assert summary["ablation"]["no_hb"] and summary["ablation"]["no_eb"] and summary["variant"] == "no_eb+no_hb"


def test_mine_infer_eval(workdir):
    d = workdir
    ck = str(d / "run" / "stage1.ckpt")
    assert main(["mine", "--data", str(d / "ds"), "--checkpoint", ck, "--out", str(d / "pool.jsonl")]) == EXIT_OK
    assert len(read_jsonl(d / "pool.jsonl")) == 3
    assert main(["infer", "--data", str(d / "ds"), "--checkpoint", ck, "--out", str(d / "dets.jsonl")]) == EXIT_OK
    for r in read_jsonl(d / "dets.jsonl"):
        assert set(r) == {"video_id", "start", "end", "class_id", "confidence"}
    assert main(["eval", "--data", str(d / "ds"), "--detections", str(d / "dets.jsonl"),
                 "--out", str(d / "ev")]) == EXIT_OK
    assert main(["eval", "--data", str(d / "ds"), "--checkpoint", ck, "--out", str(d / "ev2")]) == EXIT_OK
    assert (d / "ev" / "report.json").read_text() == (d / "ev2" / "report.json").read_text()
    rows = list(csv.reader(open(d / "ev" / "report.csv")))
    assert rows[0] == ["iou_threshold", "mAP"] and rows[-1][0] == "avg"


def test_eval_reports_missing_videos(workdir, tmp_path):
    import shutil
    ds = tmp_path / "ds"
    shutil.copytree(workdir / "ds", ds)
    victim = sorted((ds / "features").glob("test_*_rgb.bin"))[0]
    victim.unlink()
    assert main(["eval", "--data", str(ds), "--checkpoint", str(workdir / "run" / "final.ckpt"),
                 "--out", str(tmp_path / "ev")]) == EXIT_OK
    rep = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert [m[0] for m in rep["missing"]] == [victim.name.rsplit("_", 1)[0]]


def test_invalid_config_exit_code(tmp_path, workdir):
    bad = tmp_path / "bad.json"
    for doc in ({"config": {"nope": 1}}, {"extra": {}}, {"config": {"eta": 2.0}}):
        bad.write_text(json.dumps(doc))
        assert main(["train", "--config", str(bad), "--data", str(workdir / "ds"), "--out", str(tmp_path)]) == EXIT_CONFIG
    bad.write_text("{not json")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert main(["train", "--data", str(workdir / "ds"), "--stage", "2", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_data_error_exit_code(tmp_path, workdir):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == EXIT_DATA
    (tmp_path / "junk.ckpt").write_bytes(b"junk")
    assert main(["infer", "--data", str(workdir / "ds"), "--checkpoint", str(tmp_path / "junk.ckpt"),
                 "--out", str(tmp_path / "d.jsonl")]) == EXIT_DATA
    (tmp_path / "d.jsonl").write_text('{"video_id": "x"}\n')
    assert main(["eval", "--data", str(workdir / "ds"), "--detections", str(tmp_path / "d.jsonl"),
                 "--out", str(tmp_path / "e")]) == EXIT_DATA


def test_numerical_failure_exit_code(tmp_path, workdir):
    bad = tmp_path / "lr.json"
    bad.write_text(json.dumps({**SMALL, "config": {"epochs_stage1": 1, "epochs_stage2": 0, "learning_rate": 1e300}}))
    assert main(["train", "--config", str(bad), "--data", str(workdir / "ds"), "--out", str(tmp_path / "o")]) == EXIT_NUMERIC
    assert main(["gradcheck", "--instances", "1", "--tol", "1e-30"]) == EXIT_NUMERIC


def test_gradcheck_passes():
    assert main(["gradcheck", "--instances", "2"]) == EXIT_OK


def test_load_config_defaults():
    conf = load_config(None)
    assert set(conf) == {"config", "synth", "ablation"}
    assert conf["synth"].num_videos == 20
