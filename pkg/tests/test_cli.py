import json

import pytest

from udc import cli
from conftest import TINY


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr().out.strip().splitlines()[-1]
    return code, json.loads(out)


def common(tmp_path, *extra):
    args = ["--preset", "desk", "--run-dir", str(tmp_path / "r")]
    for item in TINY + list(extra):
        args += ["--set", item]
    return args


def test_stage_by_stage_then_eval(capsys, tmp_path):
    for cmd in ("gen-data", "pretrain", "train-drl", "finetune"):
        code, out = run(capsys, cmd, *common(tmp_path))
        assert code == 0 and out["ok"] and out["command"] == cmd
    code, out = run(capsys, "eval", *common(tmp_path))
    assert code == 0 and set(out["metrics"]) == {"stage1", "udc"}
    assert (tmp_path / "r" / "log.txt").exists()


def test_pipeline_no_finetune_and_dump(capsys, tmp_path):
    code, out = run(capsys, "pipeline", "--no-finetune", "--seed", "2", *common(tmp_path))
    assert code == 0 and "udc_if" in out["metrics"]
    code, out = run(capsys, "dump", "--which", "codebook", "--out", str(tmp_path / "cb.csv"), *common(tmp_path))
    assert code == 0 and out["path"].endswith("cb.csv")


def test_missing_checkpoint_exits_nonzero_with_error_kind(capsys, tmp_path):
    code, out = run(capsys, "finetune", *common(tmp_path))
    assert code == 2 and not out["ok"] and out["error"] and "stage" in out["message"]


def test_bad_config_reported(capsys, tmp_path):
    code, out = run(capsys, "pretrain", *common(tmp_path, "pcm.dimm=3"))
    assert code == 2 and "pcm.dimm" in out["message"]


def test_ablate_and_sweep(capsys, tmp_path):
    code, out = run(capsys, "ablate", "--variants", "UDC", "NT", *common(tmp_path))
    assert code == 0 and [r["variant"] for r in out["rows"]] == ["UDC", "NT"]
    code, out = run(capsys, "sweep", "--param", "K", "--values", "5", "10", *common(tmp_path))
    assert code == 0 and [r["K"] for r in out["rows"]] == [5, 10]


def test_output_root_env(monkeypatch, capsys, tmp_path):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    args = ["gen-data", "--preset", "desk"] + [a for item in TINY for a in ("--set", item)]
    code, _ = run(capsys, *args)
    assert code == 0 and (tmp_path / "root" / "udc-desk" / "data" / "dataset.jsonl").exists()


def test_argparse_rejects_unknown_choices(capsys):
    with pytest.raises(SystemExit):
        cli.main(["sweep", "--param", "depth", "--values", "1"])
