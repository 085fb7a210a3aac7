import json
import logging

import numpy as np
import pytest

from pekd import checkpoint, metrics, synthdata
from pekd.cli import build_parser, main
from pekd.config import Config, ConfigError

TINY = {
    "data": {"n_examples": 400, "seed": 2, "m": 4, "d_v": 8, "vocab": 64},
    "encoder": {"L": 1, "d_v": 8, "d_t": 8, "d": 4, "heads": 2, "m": 4, "n": 24, "vocab": 64},
    "pretrain": {"n_examples": 200, "epochs": 1},
    "train": {"teacher_epochs": 1, "student_epochs": 1, "batch_size": 16},
    "split": {"student_fraction": 0.05},
    "peft": {"lora": {"rank": 2}},
    "protocol": {"variants": ["lora"], "gates": ["off", "entropy"], "trials": 1},
}


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def records(text, kind=None):
    return [f for _, f in metrics.read_records(text.splitlines(), kind)]


def banner(text):
    line = next(l for l in text.splitlines() if l.startswith("# config "))
    return line[len("# config "):]


def test_config_round_trip_and_rejections():
    cfg = Config.from_dict(TINY)
    assert Config.loads(cfg.dumps()) == cfg
    assert Config.loads(cfg.dumps()).dumps() == cfg.dumps()
    assert Config.loads(Config().dumps()) == Config()
    with pytest.raises(ConfigError):
        Config.from_dict({"data": {"sigma": 1}})
    with pytest.raises(ConfigError):
        Config.from_dict({"optimizer": {}})
    with pytest.raises(ConfigError):
        Config.from_dict({"encoder": {"m": 5}})
    with pytest.raises(ConfigError):
        Config.loads("{not json")
    assert cfg.override("train", seed=5).train.seed == 5


def test_help_everywhere(capsys):
    assert main(["--help"]) == 0
    for cmd in ("gen-data", "pretrain", "train-teacher", "train-student", "eval", "protocol"):
        assert main([cmd, "--help"]) == 0
    for sub in ("cca", "errors", "gate-curve", "confidence"):
        assert main(["analyze", sub, "--help"]) == 0
    out = capsys.readouterr().out
    assert "--dump-activations" in out and "--kd" in out and "--ridge" in out


def test_usage_errors(tmp_path, cfg_path):
    assert main([]) == 1
    assert main(["gen-data"]) == 1
    assert main(["gen-data", "--out", str(tmp_path / "x"), "--shift", "0.5"]) == 1
    assert main(["train-student", "--data", "d", "--teacher", "t", "--peft", "bitfit", "--out", "o"]) == 1
    assert main(["gen-data", "--out", str(tmp_path / "x"), "--config", str(tmp_path / "missing.json")]) == 2
    (tmp_path / "bad.json").write_text('{"train": {"lr": 1}}')
    assert main(["gen-data", "--out", str(tmp_path / "x"), "--config", str(tmp_path / "bad.json")]) == 2


def test_gen_data(tmp_path, cfg_path, capsys):
    a, b = tmp_path / "a.pkds", tmp_path / "b.pkds"
    assert main(["gen-data", "--config", cfg_path, "--out", str(a)]) == 0
    first = capsys.readouterr().out
    assert main(["gen-data", "--config", cfg_path, "--out", str(a)]) == 2
    assert main(["gen-data", "--config", cfg_path, "--out", str(a), "--force"]) == 0
    assert records(capsys.readouterr().out, "data")[0]["sha256"] == records(first, "data")[0]["sha256"]
    # the banner alone reproduces the run
    (tmp_path / "banner.json").write_text(banner(first))
    assert main(["gen-data", "--config", str(tmp_path / "banner.json"), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    capsys.readouterr()
    assert main(["gen-data", "--config", cfg_path, "--out", str(tmp_path / "big.pkds"), "--n", "20000"]) == 0
    row = records(capsys.readouterr().out, "data")[0]
    assert (row["class_0"], row["class_1"]) == (10000, 10000)
    assert main(["gen-data", "--out", str(tmp_path / "s.pkds"), "--shift", "0.5", "--base", str(a), "--n", "100"]) == 0
    shifted = synthdata.load(tmp_path / "s.pkds")
    assert shifted.class_counts() == (50, 50) and shifted.spec.shift == 0.5


def test_pipeline_end_to_end(tmp_path, cfg_path, capsys, caplog):
    p = lambda name: str(tmp_path / name)  # noqa: E731
    assert main(["gen-data", "--config", cfg_path, "--out", p("d.pkds")]) == 0
    assert main(["pretrain", "--config", cfg_path, "--data", p("d.pkds"), "--out", p("base.pekd")]) == 0
    assert main(["train-teacher", "--config", cfg_path, "--data", p("d.pkds"), "--base", p("base.pekd"), "--out", p("t.pekd")]) == 0
    teacher_run = records(capsys.readouterr().out, "run")[-1]
    assert main(["train-teacher", "--config", cfg_path, "--data", p("d.pkds"), "--base", p("base.pekd"), "--out", p("t2.pekd")]) == 0
    assert records(capsys.readouterr().out, "run")[-1]["sha256"] == teacher_run["sha256"]
    with caplog.at_level(logging.WARNING):
        assert main(["train-student", "--config", cfg_path, "--data", p("d.pkds"), "--teacher", p("t.pekd"),
                     "--peft", "lora", "--kd", "off", "--gate", "entropy", "--out", p("off.pekd")]) == 0
    assert any("ignoring --gate" in r.getMessage() for r in caplog.records)
    assert records(capsys.readouterr().out, "run")[-1]["gate"] == "off"
    assert main(["train-student", "--config", cfg_path, "--data", p("d.pkds"), "--teacher", p("t.pekd"),
                 "--peft", "lora", "--out", p("kd.pekd")]) == 0
    assert checkpoint.load_model(p("kd.pekd")).attachment.variant == "lora"
    for tag, model in (("teacher", "t.pekd"), ("student", "kd.pekd")):
        assert main(["eval", "--config", cfg_path, "--model", p(model), "--data", p("d.pkds"), "--teacher", p("t.pekd"),
                     "--tag", tag, "--out", p(f"{tag}.tsv"), "--dump-activations", p(f"{tag}.act"),
                     "--export-embeddings", p(f"{tag}.emb")]) == 0
    examples = metrics.read_file(p("student.tsv"), "example")
    assert len(examples) == len(metrics.read_file(p("student.emb"), "embedding")) > 0
    assert main(["analyze", "cca", "--teacher", p("teacher.act"), "--student", p("student.act"), "--out", p("cca.tsv")]) == 0
    assert len(metrics.read_file(p("cca.tsv"), "cca")) == 2
    assert main(["analyze", "cca", "--teacher", p("teacher.act"), "--student", p("student.act"), "--out", p("cca.tsv")]) == 2
    assert main(["analyze", "errors", "--student", p("student.tsv"), "--teacher", p("teacher.tsv"), "--out", p("err.tsv")]) == 0
    assert [r["class"] for r in metrics.read_file(p("err.tsv"))] == [0, 1]
    capsys.readouterr()
    assert main(["analyze", "gate-curve", "--records", p("teacher.tsv")]) == 0
    assert len(records(capsys.readouterr().out, "gate")) == len(examples)
    assert main(["analyze", "confidence", "--records", p("student.tsv")]) == 0
    assert "linear" in capsys.readouterr().out
    assert main(["eval", "--model", p("kd.pekd"), "--data", p("d.pkds"), "--part", "nowhere"]) == 1
    assert main(["eval", "--model", p("d.pkds"), "--data", p("d.pkds")]) == 2


def test_protocol_command(tmp_path, cfg_path, capsys):
    out = tmp_path / "proto"
    assert main(["protocol", "--config", cfg_path, "--out", str(out), "--checkpoints"]) == 0
    agg = records(capsys.readouterr().out, "aggregate")
    assert [(a["variant"], a["gate"], a["runs"]) for a in agg] == [("lora", "off", 2), ("lora", "entropy", 2)]
    assert len(list((out / "runs").glob("*/student.pekd"))) == 4
    assert (out / "teacher.pekd").exists() and metrics.read_file(out / "timing.tsv", "diag")
    first = (out / "protocol.tsv").read_bytes()
    assert main(["protocol", "--config", cfg_path, "--out", str(out)]) == 2
    assert main(["protocol", "--config", cfg_path, "--out", str(out), "--force", "--workers", "2"]) == 0
    assert (out / "protocol.tsv").read_bytes() == first


def test_nan_input_exits_numerical(tmp_path, cfg_path):
    ds = synthdata.generate(Config.from_dict(TINY).data)
    ds.patches[:] = np.nan
    synthdata.save(ds, tmp_path / "nan.pkds")
    assert main(["train-teacher", "--config", cfg_path, "--data", str(tmp_path / "nan.pkds"),
                 "--out", str(tmp_path / "t.pekd")]) == 3


def test_parser_has_every_command():
    sub = next(a for a in build_parser()._actions if a.dest == "command")
    assert set(sub.choices) == {"gen-data", "pretrain", "train-teacher", "train-student", "eval", "protocol", "analyze"}
