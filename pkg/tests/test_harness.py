import csv
import json

import pytest

from cids.harness import DECISIONS, MANIFEST, SUMMARY_COLUMNS, SWEEP_COLUMNS, RunManifest, build_parser, main

SMALL_LEARN = ["--epochs", "1", "--batch-size", "32"]
SMALL_POLICY = ["--episodes", "3", "--warmup-steps", "20"]


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    env = root / "env"
    assert main(["gen-env", "--d", "4", "--dais", "2", "--aia-edges", "1", "--seed", "3", "--out", str(env)]) == 0
    assert main(["collect", "--config", str(env / "env.json"), "--episodes", "30", "--out", str(root / "data")]) == 0
    assert main(
        ["learn-masks", "--log", str(root / "data" / "log.txt"), "--config", str(env / "env.json"), *SMALL_LEARN,
         "--out", str(root / "masks")]
    ) == 0
    assert main(
        ["train", "--config", str(env / "env.json"), "--masks", str(root / "masks" / "masks.json"), "--mode", "FULL",
         *SMALL_POLICY, "--out", str(root / "train")]
    ) == 0
    assert main(
        ["evaluate", "--config", str(env / "env.json"), "--policy", str(root / "train" / "policy.ckpt"),
         "--episodes", "2", "--out", str(root / "eval")]
    ) == 0
    return root


def test_gen_env_reports_structure(tmp_path, capsys):
    assert main(["gen-env", "--d", "8", "--dais", "3", "--aia-edges", "2", "--seed", "7", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    config = json.loads((tmp_path / "env.json").read_text())
    assert sum(config["masks"]["m_a_to_s"]) == 3
    assert "DAIS dims:" in out and "AIA dims:" in out


def test_gen_env_byte_identical(tmp_path):
    for name in ("a", "b"):
        main(["gen-env", "--d", "8", "--dais", "3", "--aia-edges", "2", "--seed", "7", "--out", str(tmp_path / name)])
    assert (tmp_path / "a" / "env.json").read_bytes() == (tmp_path / "b" / "env.json").read_bytes()


def test_gen_env_infeasible_is_usage_error(tmp_path, capsys):
    assert main(["gen-env", "--d", "3", "--dais", "4", "--out", str(tmp_path)]) == 1
    assert "cannot place" in capsys.readouterr().err


def test_bad_flag_exits_1(capsys):
    with pytest.raises(SystemExit) as info:
        main(["train", "--mode", "NOPE"])
    assert info.value.code == 1


def test_missing_command_exits_1():
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 1


def test_learn_masks_without_data_names_stage(tmp_path, capsys):
    assert main(["learn-masks", "--out", str(tmp_path)]) == 2
    assert "cids collect" in capsys.readouterr().err
    assert main(["learn-masks", "--log", str(tmp_path / "missing.txt"), "--out", str(tmp_path)]) == 2


def test_train_without_masks_names_stage(pipeline, tmp_path, capsys):
    code = main(["train", "--config", str(pipeline / "env" / "env.json"), "--mode", "CIDS", "--out", str(tmp_path)])
    assert code == 2
    assert "learn-masks" in capsys.readouterr().err


def test_pipeline_artifacts(pipeline):
    assert (pipeline / "data" / "log.txt").read_text().startswith("# cids-log v1")
    history = _rows(pipeline / "masks" / "history.csv")
    assert list(history[0]) == ["step", "loss_dais", "loss_aia", "cmi_dais", "cmi_aia", "active_gates_a", "active_gates_s"]
    report = json.loads((pipeline / "masks" / "masks.json").read_text())
    assert {"soft_masks", "binary_masks", "scores", "metrics"} <= set(report)
    curve = _rows(pipeline / "train" / "curve.csv")
    assert len(curve) == 3 and curve[0]["selector_mode"] == "FULL"
    assert (pipeline / "train" / "policy.ckpt").read_text().startswith("cids-ckpt v1")
    ev = json.loads((pipeline / "eval" / "eval.json").read_text())
    assert ev["episodes"] == 2


def test_manifests_index_every_output(pipeline):
    for stage, names in {
        "env": ["env.json"],
        "data": ["log.txt"],
        "masks": ["history.csv", "masks.json"],
        "train": ["curve.csv", "policy.ckpt", "selector.json"],
        "eval": ["eval.json"],
    }.items():
        m = RunManifest.read(pipeline / stage / MANIFEST)
        assert sorted(m.outputs) == names
        assert m.decisions == DECISIONS
        assert len(m.config_hash) == 64


def test_learn_masks_prints_metrics(pipeline, tmp_path, capsys):
    main(["learn-masks", "--log", str(pipeline / "data" / "log.txt"), "--config", str(pipeline / "env" / "env.json"),
          *SMALL_LEARN, "--out", str(tmp_path)])
    out = capsys.readouterr().out
    assert "a_to_s: precision=" in out and "f1=" in out


def test_rerun_is_byte_identical(pipeline, tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    args = ["train", "--config", str(pipeline / "env" / "env.json"), "--mode", "FULL", *SMALL_POLICY, "--seed", "2"]
    for name in ("a", "b"):
        assert main([*args, "--out", str(tmp_path / name)]) == 0
    for name in ("curve.csv", "policy.ckpt", "selector.json", MANIFEST):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_empty_mask_falls_back(pipeline, tmp_path):
    masks = tmp_path / "masks.json"
    report = json.loads((pipeline / "masks" / "masks.json").read_text())
    report["binary_masks"]["m_a_to_s"] = [0] * 4
    masks.write_text(json.dumps(report))
    with pytest.warns(Warning, match="falling back"):
        code = main(["train", "--config", str(pipeline / "env" / "env.json"), "--masks", str(masks), *SMALL_POLICY,
                     "--out", str(tmp_path / "out")])
    assert code == 0
    selector = json.loads((tmp_path / "out" / "selector.json").read_text())
    assert selector["fallback"] is True and selector["mode"] == "FULL"


@pytest.mark.filterwarnings("ignore::cids.exceptions.DegenerateMaskWarning")
def test_ablate_summary_has_four_modes(pipeline, tmp_path):
    code = main(["ablate", "--config", str(pipeline / "env" / "env.json"), "--masks", str(pipeline / "masks" / "masks.json"),
                 "--seeds", "0,1", "--eval-episodes", "2", "--episodes", "2", "--warmup-steps", "20",
                 "--out", str(tmp_path)])
    assert code == 0
    summary = _rows(tmp_path / "ablation_summary.csv")
    assert list(summary[0]) == list(SUMMARY_COLUMNS)
    assert [r["mode"] for r in summary] == ["FULL", "DAIS", "AIA", "CIDS"]
    assert all(r["n_runs"] == "2" for r in summary)
    assert len(_rows(tmp_path / "ablation_runs.csv")) == 8


@pytest.mark.filterwarnings("ignore::cids.exceptions.DegenerateMaskWarning")
def test_sweep_row_count(pipeline, tmp_path):
    code = main(["sweep-lambda", "--config", str(pipeline / "env" / "env.json"), "--log", str(pipeline / "data" / "log.txt"),
                 "--grid", "0,9e-4", "--seeds", "0", "--checkpoints", "3", "--eval-episodes", "1", *SMALL_LEARN,
                 "--episodes", "3", "--warmup-steps", "20", "--out", str(tmp_path)])
    assert code == 0
    rows = _rows(tmp_path / "sweep.csv")
    assert list(rows[0]) == list(SWEEP_COLUMNS)
    assert len(rows) == 2 * 1 * 3


def test_sweep_rejects_bad_grid(pipeline, tmp_path):
    assert main(["sweep-lambda", "--config", str(pipeline / "env" / "env.json"), "--grid", "a,b", "--out", str(tmp_path)]) == 1


def test_report_empty_dir_is_error(tmp_path, capsys):
    assert main(["report", "--run-dir", str(tmp_path)]) == 2
    assert "no run manifests" in capsys.readouterr().err


def test_report_reprints_decisions(pipeline, tmp_path, capsys):
    code = main(["report", "--run-dir", str(pipeline), "--config", str(pipeline / "env" / "env.json"),
                 "--episodes", "5", "--out", str(tmp_path)])
    assert code == 0
    text = (tmp_path / "report.txt").read_text()
    for key, value in DECISIONS.items():
        assert f"- {key}: {value}" in text
    metrics = _rows(tmp_path / "offline_metrics.csv")
    assert len(metrics) == 1
    for name in ("precision", "recall", "accuracy"):
        assert 0.0 <= float(metrics[0][name]) <= 1.0


def test_help_lists_commands(capsys):
    with pytest.raises(SystemExit) as info:
        build_parser().parse_args(["--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    for cmd in ("gen-env", "collect", "learn-masks", "train", "evaluate", "ablate", "sweep-lambda", "report"):
        assert cmd in out
