import json

from click.testing import CliRunner

from hd_lab.cli import apply_flags, main

FAST = ["--size", "S", "--batch-size", "16"]


def run(args):
    return CliRunner().invoke(main, args, catch_exceptions=False)


def test_flags_override_config():
    cfg = apply_flags({"size": "XL", "weights": {"dmd": 2.0}}, "S", 3, 10, 1.75, "awd", None, 0.1, None)
    assert cfg["size"] == "S" and cfg["seed"] == 3 and cfg["sampler_steps"] == 10
    assert cfg["cfg_scale"] == 1.75 and cfg["n_classes"] == 2 and cfg["adversarial"] == "awd"
    assert cfg["weights"] == {"dmd": 2.0, "adv_g": 0.1}


def test_train_teacher_command(tmp_path):
    res = run(["train-teacher", *FAST, "--iters", "10", "--steps", "5", "--out", str(tmp_path)])
    assert res.exit_code == 0
    body = json.loads(res.output)
    assert body["summary"]["final_stage"] == "teacher" and body["summary"]["rows"] == 10


def test_config_file_and_pipeline_commands(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"teacher_iters": 10, "td_iters": 5, "stage2_iters": 3, "probe_size": 32}))
    t = json.loads(run(["train-teacher", *FAST, "--config", str(cfg), "--out", str(tmp_path)]).output)
    teacher = t["checkpoints"]["teacher"]
    d = json.loads(run(["distill-td", *FAST, "--config", str(cfg), "--teacher", teacher,
                        "--out", str(tmp_path)]).output)
    assert d["summary"]["rows"] == 5
    r = run(["refine", *FAST, "--config", str(cfg), "--teacher", teacher, "--student", d["checkpoints"]["td"],
             "--disc", "gap", "--lambda2", "0.1", "--out", str(tmp_path)])
    body = json.loads(r.output)
    assert body["summary"]["final_stage"] == "stage2" and body["summary"]["rows"] == 3
    e = json.loads(run(["eval", body["checkpoints"]["stage2"], "--probe-size", "16"]).output)
    assert e["mode"] == "one-step"
    x = json.loads(run(["export", teacher, "--out", str(tmp_path / "x"), "-n", "8", "--steps", "3",
                        "--format", "csv"]).output)
    assert x["n"] == 8 and x["files"][0].endswith("samples.csv")


def test_verify_theory_exit_code():
    res = CliRunner().invoke(main, ["verify-theory"])
    assert "N" in res.output and "PASS" in res.output
    failed = "FAIL" in res.output
    assert res.exit_code == (1 if failed else 0)


def test_bad_config_file(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    res = CliRunner().invoke(main, ["train-teacher", "--config", str(bad)])
    assert res.exit_code != 0 and "JSON object" in res.output


def test_service_errors_surface(tmp_path):
    bad = CliRunner().invoke(main, ["train-teacher", "--size", "S", "--batch-size", "0", "--out", str(tmp_path)])
    assert bad.exit_code != 0 and "422" in bad.output
    missing = CliRunner().invoke(main, ["refine", *FAST, "--teacher", str(tmp_path / "nope.json"),
                                        "--out", str(tmp_path)])
    assert missing.exit_code != 0 and "failed" in missing.output


def test_help_lists_commands():
    res = run(["--help"])
    for cmd in ("train-teacher", "distill-td", "refine", "sweep", "ablate", "verify-theory", "eval", "export"):
        assert cmd in res.output
