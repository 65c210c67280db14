import csv
import json

import numpy as np
import pytest

from udc.checkpoint import array_checksum, file_checksum, load_checkpoint
from udc.config import config_from_dict
from udc.errors import ConfigError, MissingCheckpointError
from udc.pipeline import VARIANTS, Run, child_seed, dump_embeddings, run_ablation, run_sweep, variant_config


def test_child_seed_is_stable_and_tag_dependent():
    assert child_seed(3, "pcm") == child_seed(3, "pcm")
    assert child_seed(3, "pcm") != child_seed(3, "drl") != child_seed(4, "drl")


def test_full_run_writes_reports_and_respects_freezes(tiny_cfg, tmp_path):
    run = Run(tiny_cfg(), tmp_path / "r")
    out = run.run()
    for name in ("metrics.json", "metrics.csv", "groups.json", "groups.csv", "config.yaml",
                 "stage1.ckpt", "stage2.ckpt", "stage3.ckpt", "drl_history.json", "finetune_history.json"):
        assert (run.dir / name).exists(), name
    assert set(out["metrics"]) == {"stage1", "udc"}
    drl = json.loads((run.dir / "drl_history.json").read_text())
    assert drl["freeze"]["before"] == drl["freeze"]["after"]
    ft = json.loads((run.dir / "finetune_history.json").read_text())
    assert ft["freeze"]["drl_before"] == ft["freeze"]["drl_after"]
    assert ft["freeze"]["E_D_before"] == ft["freeze"]["E_D_after"]
    # stage 3 keeps the stage-1 disease table untouched
    s1, _ = load_checkpoint(run.stage1_path)
    s3, _ = load_checkpoint(run.stage3_path)
    np.testing.assert_array_equal(s1["emb.diagnosis"], s3["emb.diagnosis"])


def test_resume_skips_finished_stages_and_config_change_retrains(tiny_cfg, tmp_path):
    run = Run(tiny_cfg(), tmp_path / "r")
    run.run()
    stamps = {p: (run.dir / p).stat().st_mtime_ns for p in ("stage1.ckpt", "stage2.ckpt", "stage3.ckpt")}
    Run(tiny_cfg(), tmp_path / "r").run()
    assert all((run.dir / p).stat().st_mtime_ns == t for p, t in stamps.items())
    Run(tiny_cfg("finetune.epochs=1"), tmp_path / "r").run()
    assert (run.dir / "stage1.ckpt").stat().st_mtime_ns == stamps["stage1.ckpt"]
    assert (run.dir / "stage2.ckpt").stat().st_mtime_ns == stamps["stage2.ckpt"]
    assert (run.dir / "stage3.ckpt").stat().st_mtime_ns != stamps["stage3.ckpt"]


def test_identical_runs_give_identical_metrics(tiny_cfg, tmp_path):
    for name in ("a", "b"):
        Run(tiny_cfg(task="med", seed=4), tmp_path / name).run()
    for f in ("metrics.json", "groups.json"):
        assert (tmp_path / "a" / f).read_text() == (tmp_path / "b" / f).read_text()


def test_missing_checkpoints_are_named(tiny_cfg, tmp_path):
    run = Run(tiny_cfg(), tmp_path / "r")
    with pytest.raises(MissingCheckpointError, match="stage1"):
        run.train_drl()
    run.pretrain()
    with pytest.raises(MissingCheckpointError, match="stage2"):
        run.finetune()
    with pytest.raises(MissingCheckpointError, match="stage3"):
        run.evaluate()


def test_no_finetune_reports_udc_if(tiny_cfg, tmp_path):
    run = Run(tiny_cfg("no_finetune=true"), tmp_path / "r")
    out = run.run()
    assert set(out["metrics"]) == {"stage1", "udc_if"}
    s1, _ = load_checkpoint(run.stage1_path)
    s3, _ = load_checkpoint(run.stage3_path)
    assert array_checksum(s1) == array_checksum({k: v for k, v in s3.items() if k != "substituted"})


def test_files_source_matches_synthetic(tiny_cfg, tmp_path):
    synth = Run(tiny_cfg(), tmp_path / "s")
    data_dir = synth.gen_data()
    files = Run(tiny_cfg("data.source=files", f"data.dataset_path={data_dir / 'dataset.jsonl'}",
                         f"data.text_dir={data_dir}"), tmp_path / "f")
    assert files.data.records == synth.data.records
    np.testing.assert_array_equal(files.data.text.E_D, synth.data.text.E_D)
    (data_dir / "vocab_procedure.json").unlink()
    stale = Run(files.cfg, tmp_path / "g")
    with pytest.raises(ConfigError):
        stale.data


def test_ablation_shares_stage1_and_instruments_switches(tiny_cfg, tmp_path):
    rows = run_ablation(tiny_cfg(), tmp_path / "abl")
    assert [r["variant"] for r in rows] == list(VARIANTS)
    assert all(r["status"] == "ok" for r in rows)
    by = {r["variant"]: r for r in rows}
    assert by["NT"]["L_con_max"] == 0.0 and by["UDC"]["L_con_max"] > 0.0
    assert by["NCO"]["calibrate_calls"] == 0 and by["UDC"]["calibrate_calls"] > 0
    assert len({r["stage1_sha256"] for r in rows}) == 1
    assert rows[0]["stage1_sha256"] == file_checksum(tmp_path / "abl" / "stage1.ckpt")
    table = list(csv.DictReader(open(tmp_path / "abl" / "ablation.csv")))
    assert len(table) == 6


def test_variant_config_sets_exactly_one_flag(tiny_cfg):
    cfg = tiny_cfg()
    for v in VARIANTS:
        flags = variant_config(cfg, v).drl.flags()
        assert sum(flags.values()) == (0 if v == "UDC" else 1)
    with pytest.raises(ConfigError):
        variant_config(cfg, "XYZ")


def test_sweeps(tiny_cfg, tmp_path):
    rows = run_sweep(tiny_cfg(), tmp_path / "k", "K", [5, 10, "x", 0, 20])
    assert [r["K"] for r in rows] == [5, 10, 20]
    assert all(a["acc"] <= b["acc"] + 1e-12 for a, b in zip(rows, rows[1:]))
    rows = run_sweep(tiny_cfg(), tmp_path / "a", "alpha", [0.1, -1.0, 0.5])
    assert [r["alpha"] for r in rows] == [0.1, 0.5]
    assert len({r["stage1_sha256"] for r in rows}) == 1
    with pytest.raises(ConfigError):
        run_sweep(tiny_cfg(), tmp_path / "x", "depth", [1])


@pytest.mark.parametrize("which", ["original", "substituted", "quantized", "codebook"])
def test_dumps(tiny_cfg, tmp_path, which):
    run = Run(tiny_cfg(), tmp_path / "r")
    run.run()
    path = dump_embeddings(run, which, tmp_path / f"{which}.csv")
    rows = list(csv.reader(open(path)))
    if which == "codebook":
        assert len(rows) == 1 + 2 * 8 and rows[0][:4] == ["level", "code", "usage_co", "usage_te"]
    else:
        assert len(rows) == 1 + run.sizes["diagnosis"]
        labels = {r[1] for r in rows[1:]}
        assert labels == {"common", "rare"}
    with pytest.raises(ConfigError):
        dump_embeddings(run, "bogus", tmp_path / "x.csv")


def test_substituted_rows_follow_rarity(tiny_cfg, tmp_path):
    run = Run(tiny_cfg(), tmp_path / "r")
    run.run()
    _, table = run.load_stage2()
    original = run.load_stage1().emb["diagnosis"].data
    assert table.shape == original.shape
    assert len(run.rarity.common) == round(0.2 * run.sizes["diagnosis"])
    rare, common = sorted(run.rarity.rare), sorted(run.rarity.common)
    assert not np.allclose(table[rare], original[rare])
    assert np.all(np.isfinite(table[common]))
    cfg = config_from_dict(run.cfg.to_dict())
    assert Run(cfg, run.dir).fingerprint(3) == run.fingerprint(3)
