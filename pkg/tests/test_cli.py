import csv
import json
import shutil
import subprocess
import sys

import pytest

from userip import cli, pipeline

TINY = {"data": {"n_users": 40, "n_items": 40, "n_background": 40, "n_heldout": 10,
                 "seq_len": 12},
        "lm": {"d": 16, "epochs": 1, "context_len": 64},
        "infer": {"epochs": 2},
        "rec": {"max_epochs": 2},
        "sweep": {"k1": [4, 8]},
        "bayes": {"trials": 20, "n_obs": [1, 10, 50]}}

EXTRA_STAGES = ["ablate", "case-study", "sweep-codebook", "verify-bayes"]


def _config(tmp, **overrides):
    obj = json.loads(json.dumps(TINY))
    for section, values in overrides.items():
        obj.setdefault(section, {}).update(values)
    path = tmp / "config.json"
    path.write_text(json.dumps(obj))
    return path


def _run(cfg_path, out, *commands):
    for c in commands:
        code = cli.main([c, "--config", str(cfg_path), "--out", str(out)])
        if code:
            return code
    return 0


@pytest.fixture(scope="module")
def tiny_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = _config(base)
    outs = []
    for name in ("a", "b"):
        assert _run(cfg, base / name, "all", *EXTRA_STAGES) == 0
        outs.append(base / name)
    return cfg, outs


def test_every_stage_writes_manifest_and_snapshot(tiny_runs):
    _, (a, _) = tiny_runs
    for stage in pipeline.STAGES:
        man = json.loads((a / "manifests" / f"{stage}.json").read_text())
        assert man["stage"] == stage and man["outputs"]
    resolved = json.loads((a / "config.resolved.json").read_text())
    assert resolved["data"]["n_users"] == 40 and resolved["rec"]["dropout"] == 0.2


def test_eval_reports_both_variants(tiny_runs):
    _, (a, _) = tiny_runs
    rows = list(csv.DictReader(open(a / "metrics.csv")))
    assert {(r["variant"], r["fold"]) for r in rows} == {
        ("id", "valid"), ("id", "test"), ("userip", "valid"), ("userip", "test")}
    impr = list(csv.DictReader(open(a / "improvement.csv")))
    assert len(impr) == 1 and impr[0]["base_variant"] == "id"


def test_every_csv_carries_seed_and_config_hash(tiny_runs):
    _, (a, _) = tiny_runs
    cfg = pipeline.load_config(a / "config.resolved.json")
    for path in a.glob("*.csv"):
        rows = list(csv.DictReader(open(path)))
        assert rows, path
        assert {r["seed"] for r in rows} == {"0"}, path
        assert {r["config_hash"] for r in rows} == {cfg.hash()}, path


def test_same_seed_same_bytes(tiny_runs):
    _, (a, b) = tiny_runs
    for name in ("metrics.csv", "improvement.csv", "ablation.csv", "sweep_codebook.csv",
                 "case_study.csv", "concentration.csv", "bank.uipb", "theta.ckpt"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_ablation_has_two_variants_with_shared_checksum(tiny_runs):
    _, (a, _) = tiny_runs
    rows = list(csv.DictReader(open(a / "ablation.csv")))
    assert sorted(r["variant"] for r in rows) == ["userip", "userip_novq"]
    data = json.loads((a / "manifests" / "gen-data.json").read_text())["data_checksum"]
    assert {r["data_checksum"] for r in rows} == {data}


def test_case_study_export_is_normalized(tiny_runs):
    _, (a, _) = tiny_runs
    rows = list(csv.DictReader(open(a / "attention.csv")))
    by_user = {}
    for r in rows:
        by_user.setdefault(r["user"], []).append(float(r["weight"]))
    assert all(min(w) == 0.0 and max(w) == 1.0 for w in by_user.values())
    assert {r["stage"] for r in rows} == {"before", "after"}


def test_sweep_rows_follow_config(tiny_runs):
    _, (a, _) = tiny_runs
    rows = list(csv.DictReader(open(a / "sweep_codebook.csv")))
    assert [r["K1"] for r in rows] == ["4", "8"]


def test_deleting_downstream_keeps_upstream_valid(tiny_runs, tmp_path):
    cfg_path, (a, _) = tiny_runs
    run_dir = tmp_path / "copy"
    shutil.copytree(a, run_dir)
    for name in ("metrics.csv", "rec_id.ckpt", "bank.uipb"):
        (run_dir / name).unlink()
    run = pipeline.Run(pipeline.load_config(cfg_path), run_dir)
    for stage in ("gen-data", "train-lm", "infer"):
        run.verify(stage)
        assert run.is_done(stage)
    assert not run.is_done("build-bank")


def test_missing_upstream_exits_3_and_names_stage(tmp_path, capsys):
    cfg = _config(tmp_path)
    assert _run(cfg, tmp_path / "r", "infer") == cli.EXIT_UPSTREAM
    assert "'gen-data'" in capsys.readouterr().err


def test_tampered_upstream_exits_3(tiny_runs, tmp_path, capsys):
    cfg_path, (a, _) = tiny_runs
    run_dir = tmp_path / "copy"
    shutil.copytree(a, run_dir)
    blob = bytearray((run_dir / "bank.uipb").read_bytes())
    blob[-1] ^= 1
    (run_dir / "bank.uipb").write_bytes(bytes(blob))
    assert _run(cfg_path, run_dir, "train-rec") == cli.EXIT_UPSTREAM
    assert "build-bank" in capsys.readouterr().err


def test_divergence_exits_4(tmp_path):
    cfg = _config(tmp_path, infer={"epochs": 2, "divergence_factor": 0.5})
    out = tmp_path / "r"
    assert _run(cfg, out, "gen-data", "train-lm") == 0
    assert _run(cfg, out, "infer") == cli.EXIT_DIVERGED


@pytest.mark.parametrize("bad", [{"data": {"n_userz": 5}}, {"colour": 1},
                                 {"quant": {"sizes": [4]}}, {"seed": -1},
                                 {"rec": {"lr": "fast"}}])
def test_config_errors_exit_2(tmp_path, bad, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(bad))
    assert cli.main(["gen-data", "--config", str(path), "--out", str(tmp_path / "r")]) == 2
    assert "config error" in capsys.readouterr().err
    assert not (tmp_path / "r").exists()


def test_bad_flags_exit_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["gen-data", "--seed", str(2 ** 64)])
    assert exc.value.code == 2
    assert cli.main(["gen-data", "--threads", "0", "--out", str(tmp_path)]) == 2


def test_env_overrides_and_seed_flag(tmp_path):
    path = _config(tmp_path)
    env = {"UIP_SEED": "7", "UIP_DATA__N_USERS": "55", "UIP_LM__COMPUTE_DTYPE": "float64",
           "HOME": "/x"}
    cfg = pipeline.load_config(path, environ=env)
    assert cfg.seed == 7 and cfg.data.n_users == 55 and cfg.lm.compute_dtype == "float64"
    assert cfg.data.n_items == 40
    assert pipeline.load_config(path, seed=9, environ=env).seed == 9
    with pytest.raises(pipeline.ConfigError):
        pipeline.load_config(path, environ={"UIP_DATA__BOGUS": "1"})


def test_config_hash_ignores_cache_location():
    a = pipeline.RunConfig.from_dict({"lm": {"cache_dir": "/tmp/x"}})
    b = pipeline.RunConfig.from_dict({})
    c = pipeline.RunConfig.from_dict({"seed": 1})
    assert a.hash() == b.hash() != c.hash()
    assert c.run_id == f"{c.hash()[:8]}-s1"


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "userip.cli", "--help"], capture_output=True,
                         text=True, check=True).stdout
    for flag in ("--config", "--seed", "--out", "--threads"):
        assert flag in out
    for command in cli.COMMANDS:
        assert command in out
