import json
import warnings

import numpy as np
import pytest

from metagrad import cli, harness
from metagrad.config import ConfigError, parse_text
from metagrad.models import init, save_checkpoint
from metagrad.results import (
    SINGLE_TASK_WARNING,
    ResultRecord,
    build_id,
    read_csv,
    std_error,
    summarize,
    write_records,
)

MINIMAL = "[experiment]\nmethod = maml\n[task]\nkind = sinusoid\n"
TINY = [
    "meta.iterations=2", "meta.meta_batch_size=2", "eval.n_tasks=3", "eval.shots=5", "eval.steps=2",
    "eval.query_size=10",
]


def run_cli(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "out"))
    code = cli.main(argv)
    return code, capsys.readouterr()


def write_cfg(tmp_path, text):
    path = tmp_path / "exp.cfg"
    path.write_text(text)
    return str(path)


def test_defaults_fill_in():
    cfg = parse_text(MINIMAL)
    assert cfg.methods == ("maml",) and cfg.seed == 0
    assert cfg.task.shots_K == 10 and cfg.hidden == (40, 40)
    assert cfg.meta.inner_step_size == 0.01 and cfg.meta.meta_batch_size == 25
    assert cfg.eval_tasks == 600 and cfg.rl.K_trajectories == 20
    assert cfg.meta_for("fomaml").first_order and not cfg.meta_for("maml").first_order


def test_overrides_and_method_lists():
    cfg = parse_text(MINIMAL, {"experiment.method": "pretrain, oracle", "eval.shots": "5,10"})
    assert cfg.methods == ("pretrain", "oracle") and cfg.eval_shots == (5, 10)


@pytest.mark.parametrize("text,field", [
    ("[task]\nkind = sinusoid\n", "experiment.method"),
    ("[experiment]\nmethod = maml\n", "task.kind"),
    (MINIMAL + "[meta]\ninner_stepsize = 0.1\n", "meta.inner_stepsize"),
    (MINIMAL + "[bogus]\nx = 1\n", "bogus"),
    (MINIMAL + "[meta]\ninner_step_size = fast\n", "meta.inner_step_size"),
    (MINIMAL + "[meta]\ninner_steps = 0\n", "meta.inner_steps"),
    ("[experiment]\nmethod = reptile\n[task]\nkind = sinusoid\n", "experiment.method"),
])
def test_config_errors_name_the_field(text, field):
    with pytest.raises(ConfigError) as info:
        parse_text(text)
    assert info.value.field == field


def test_effective_config_round_trips():
    text = parse_text(MINIMAL, {"meta.inner_steps": "3"}).to_text()
    assert parse_text(text).to_text() == text
    assert "inner_steps = 3" in text


def test_std_error_oracle():
    values = np.arange(1, 101, dtype=float)
    rec = summarize(values, method="m", task="sinusoid", shots=5, step_count=0, metric="mse", seed=0,
                    build_id="x")
    assert rec.mean == 50.5
    # sqrt(sum (i - 50.5)^2 / 99) / 10 = sqrt(841.666...) / 10
    assert rec.std_error == pytest.approx(2.9011491975882016, rel=1e-12)
    assert rec.ci95 == pytest.approx(1.96 * rec.std_error)


def test_single_task_warns_and_reports_zero():
    with pytest.warns(RuntimeWarning):
        rec = summarize([0.3], method="m", task="sinusoid", shots=5, step_count=0, metric="mse", seed=0,
                        build_id="x")
    assert rec.std_error == 0.0 and rec.n_tasks == 1 and rec.warning == SINGLE_TASK_WARNING
    with pytest.raises(ValueError):
        std_error([])


def test_records_reject_non_finite():
    with pytest.raises(ValueError):
        ResultRecord("m", "sinusoid", 5, 0, "mse", float("nan"), 0.0, 0.0, 3, 0, "x")


def test_csv_uses_lf_and_round_trips(tmp_path):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        recs = [summarize([0.1, 0.2 + k], method="maml", task="sinusoid", shots=5, step_count=k, metric="mse",
                          seed=1, build_id=build_id()) for k in range(3)]
    path = tmp_path / "eval.csv"
    write_records(path, recs)
    raw = path.read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n")
    rows = read_csv(path)
    assert [float(r["mean"]) for r in rows] == [r.mean for r in recs]
    assert rows[0]["method"] == "maml" and rows[0]["n_tasks"] == "2"


def test_cli_missing_field_exits_2(tmp_path, monkeypatch, capsys):
    path = write_cfg(tmp_path, "[task]\nkind = sinusoid\n")
    code, out = run_cli(["train", "--config", path, "--workers", "1"], tmp_path, monkeypatch, capsys)
    assert code == 2
    err = json.loads(out.err.strip().splitlines()[-1])
    assert err["field"] == "experiment.method"
    assert json.loads((tmp_path / "out" / "error.json").read_text())["exit_code"] == 2


def test_cli_unknown_preset_and_key_exit_2(tmp_path, monkeypatch, capsys):
    code, _ = run_cli(["reproduce", "no-such-run"], tmp_path, monkeypatch, capsys)
    assert code == 2
    code, out = run_cli(["reproduce", "sinusoid-maml", "--set", "meta.nope=1"], tmp_path, monkeypatch, capsys)
    assert code == 2 and json.loads(out.err.strip())["field"] == "meta.nope"


def test_presets_are_valid():
    names = cli.preset_names()
    assert {"sinusoid-maml", "sinusoid-baselines", "nav2d-maml", "nav2d-context"} <= set(names)
    for name in names:
        parse_text(cli.preset_text(name))


def test_cli_train_writes_outputs(tmp_path, monkeypatch, capsys):
    path = write_cfg(tmp_path, MINIMAL)
    argv = ["train", "--config", path, "--workers", "1", "--set", "model.hidden=10"]
    for item in TINY:
        argv += ["--set", item]
    code, _ = run_cli(argv, tmp_path, monkeypatch, capsys)
    out = tmp_path / "out"
    assert code == 0
    rows = read_csv(out / "eval.csv")
    assert [int(r["step_count"]) for r in rows] == [0, 1, 2]
    assert all(r["n_tasks"] == "3" and r["metric"] == "mse" for r in rows)
    assert len(read_csv(out / "train_maml.csv")) == 2
    assert json.loads((out / "run.json").read_text())["build_id"] == build_id()
    assert (out / "effective.cfg").read_bytes().count(b"\r") == 0


def test_eval_rejects_mismatched_checkpoint(tmp_path, monkeypatch, capsys):
    spec = harness.method_spec(parse_text(MINIMAL, {"model.hidden": "8"}), "maml")
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, spec, init(spec, 0))
    path = write_cfg(tmp_path, MINIMAL)
    code, out = run_cli(["eval", "--checkpoint", str(ckpt), "--config", path, "--workers", "1"],
                        tmp_path, monkeypatch, capsys)
    assert code == 2 and json.loads(out.err.strip())["error"] == "checkpoint"


def test_eval_accepts_matching_checkpoint(tmp_path, monkeypatch, capsys):
    cfg = parse_text(MINIMAL, {"model.hidden": "8"})
    spec = harness.method_spec(cfg, "maml")
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, spec, init(spec, 0))
    path = write_cfg(tmp_path, MINIMAL + "[model]\nhidden = 8\n")
    argv = ["eval", "--checkpoint", str(ckpt), "--config", path, "--workers", "1"]
    for item in TINY:
        argv += ["--set", item]
    code, _ = run_cli(argv, tmp_path, monkeypatch, capsys)
    assert code == 0 and len(read_csv(tmp_path / "out" / "eval.csv")) == 3


def test_numerical_abort_exits_3(tmp_path, monkeypatch, capsys):
    path = write_cfg(tmp_path, MINIMAL)
    argv = ["train", "--config", path, "--workers", "1", "--set", "meta.inner_step_size=1e200",
            "--set", "meta.meta_optimizer=sgd", "--set", "meta.meta_step_size=1e200"]
    for item in TINY:
        argv += ["--set", item]
    code, out = run_cli(argv, tmp_path, monkeypatch, capsys)
    assert code == 3
    assert json.loads(out.err.strip())["error"] == "numerical"
