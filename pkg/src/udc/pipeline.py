"""Three-stage orchestration with resumable checkpoints, ablations, sweeps and dumps."""

from __future__ import annotations

import copy
import csv
import json
import logging
import time
import zlib
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from udc import drl as D
from udc import ehr
from udc import pcm as P
from udc.checkpoint import array_checksum, file_checksum, load_checkpoint, save_checkpoint
from udc.config import RunConfig, dump_config
from udc.errors import ConfigError, MissingCheckpointError, UDCError
from udc.evaluation import (GroupReport, MetricsReport, codebook_diagnostics, evaluate,
                            group_analysis, write_json, write_reports)
from udc.textemb import TextEmbeddings, load_text_embeddings, save_text_embeddings, synthesize_text_embeddings

log = logging.getLogger(__name__)

VARIANTS = ("UDC", "NCO", "NT", "NM", "NS", "NCD")
SWEEPS = ("K", "codebook_size", "alpha", "eta")


def child_seed(seed: int, tag: str) -> int:
    """Independent, reproducible seed per component."""
    return int(np.random.SeedSequence([seed, zlib.crc32(tag.encode())]).generate_state(1)[0])


@dataclass
class Data:
    records: list
    vocabs: dict
    text: TextEmbeddings
    train: list
    val: list
    test: list


class Run:
    """One run directory. ``shared`` points stage-1 inputs at another run (ablations, sweeps)."""

    def __init__(self, cfg: RunConfig, run_dir, shared: "Run | None" = None):
        self.cfg = cfg
        self.dir = Path(run_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.shared = shared
        self._handler = None

    # -- paths ------------------------------------------------------------------
    @property
    def data_dir(self) -> Path:
        return self.shared.data_dir if self.shared else self.dir / "data"

    @property
    def stage1_path(self) -> Path:
        return self.shared.stage1_path if self.shared else self.dir / "stage1.ckpt"

    @property
    def stage2_path(self) -> Path:
        return self.dir / "stage2.ckpt"

    @property
    def stage3_path(self) -> Path:
        return self.dir / "stage3.ckpt"

    def fingerprint(self, stage: int) -> str:
        sections = {0: ("seed", "data"), 1: ("task", "seed", "data", "pcm", "pretrain"),
                    2: ("task", "seed", "data", "pcm", "pretrain", "drl", "eta", "rarity_mode"),
                    3: ("task", "seed", "data", "pcm", "pretrain", "drl", "eta", "rarity_mode",
                        "finetune", "no_finetune")}[stage]
        return self.cfg.section_hash(*sections)

    def write_provenance(self) -> None:
        dump_config(self.cfg, self.dir / "config.yaml")

    # -- data -------------------------------------------------------------------
    def gen_data(self, force: bool = False) -> Path:
        cfg = self.cfg
        out = self.data_dir
        marker = out / "fingerprint.txt"
        if not force and marker.exists() and marker.read_text().strip() == self.fingerprint(0):
            return out
        if cfg.data.source != "synthetic":
            raise ConfigError("gen-data needs data.source 'synthetic'")
        out.mkdir(parents=True, exist_ok=True)
        syn = replace(cfg.data.synthetic, seed=child_seed(cfg.seed, "data"))
        records, latents = ehr.generate_synthetic(syn)
        ehr.save_dataset(records, out / "dataset.jsonl")
        for vocab in ehr.synthetic_vocabs(syn).values():
            ehr.save_vocab(vocab, out / f"vocab_{vocab.kind}.json")
        text = synthesize_text_embeddings(latents, cfg.data.text_noise, child_seed(cfg.seed, "text"),
                                          cfg.data.text_dim)
        save_text_embeddings(text, out)
        marker.write_text(self.fingerprint(0) + "\n")
        log.info("wrote %d synthetic patients to %s", len(records), out)
        return out

    @cached_property
    def data(self) -> Data:
        cfg = self.cfg
        if cfg.data.source == "synthetic":
            self.gen_data()
            dataset_path, text_dir = self.data_dir / "dataset.jsonl", self.data_dir
        else:
            dataset_path, text_dir = Path(cfg.data.dataset_path), Path(cfg.data.text_dir)
        vocabs = ehr._find_sidecars(dataset_path)
        if not vocabs or set(vocabs) != set(ehr.KINDS):
            raise ConfigError(f"vocabulary sidecars for all entity classes must sit next to {dataset_path}")
        records = ehr.load_dataset(dataset_path, vocabs)
        text = load_text_embeddings(text_dir, vocabs)
        train, val, test = ehr.split_patients(records, tuple(cfg.data.split), child_seed(cfg.seed, "split"))
        return Data(records, vocabs, text, list(train), list(val), list(test))

    @cached_property
    def sizes(self) -> dict[str, int]:
        return ehr.vocab_sizes(self.data.vocabs)

    @cached_property
    def samples(self) -> dict[str, list]:
        d = self.data
        return {name: P.build_samples(recs, self.cfg.task)
                for name, recs in (("train", d.train), ("val", d.val), ("test", d.test))}

    @cached_property
    def rarity(self) -> ehr.RaritySplit:
        return ehr.split_rarity(self.data.train, self.cfg.eta, self.sizes["diagnosis"], self.cfg.rarity_mode)

    @cached_property
    def index(self) -> list:
        return ehr.cooccurrence_index(self.data.train, self.sizes["diagnosis"])

    def _train_cfg(self, stage, tag: str) -> P.TrainConfig:
        return P.TrainConfig(lr=stage.lr(self.cfg.task), weight_decay=stage.weight_decay,
                             batch_size=stage.batch_size, epochs=stage.epochs,
                             seed=child_seed(self.cfg.seed, tag))

    # -- stage 1 ----------------------------------------------------------------
    def new_pcm(self) -> P.PCM:
        return P.PCM(self.sizes, self.cfg.pcm, seed=child_seed(self.cfg.seed, "pcm"))

    def pretrain(self, resume: bool = True) -> P.PCM:
        path = self.stage1_path
        if resume and path.exists():
            arrays, meta = load_checkpoint(path)
            if meta.get("fingerprint") == self.fingerprint(1):
                model = self.new_pcm()
                model.load_state_dict(arrays)
                return model
            if self.shared:
                raise ConfigError(f"shared stage-1 checkpoint {path} was built with a different configuration")
        s = self.samples
        model = self.new_pcm()
        tcfg = self._train_cfg(self.cfg.pretrain, "pretrain")
        t0 = time.time()
        hist = P.pretrain(model, s["train"], s["val"], self.cfg.task, tcfg)
        write_json(self.dir / "stage1_history.json", {**hist.to_dict(), "seconds": time.time() - t0})
        save_checkpoint(path, model.state_dict(), {"stage": 1, "fingerprint": self.fingerprint(1)})
        log.info("stage 1 done: best epoch %d, val loss %.5f", hist.best_epoch, hist.val_loss[hist.best_epoch])
        return model

    def load_stage1(self) -> P.PCM:
        if not self.stage1_path.exists():
            raise MissingCheckpointError(f"required checkpoint missing: {self.stage1_path} (run pretrain first)")
        arrays, _ = load_checkpoint(self.stage1_path)
        model = self.new_pcm()
        model.load_state_dict(arrays)
        return model

    # -- stage 2 ----------------------------------------------------------------
    def new_drl(self, pcm: P.PCM) -> D.DRL:
        dcfg = replace(self.cfg.drl, seed=child_seed(self.cfg.seed, "drl"))
        co = {k: pcm.emb[k].data for k in ehr.KINDS}
        return D.DRL(co, self.data.text.tables, dcfg, P.TARGET_KIND[self.cfg.task])

    def train_drl(self, resume: bool = True) -> tuple[D.DRL, np.ndarray]:
        path = self.stage2_path
        if resume and path.exists():
            arrays, meta = load_checkpoint(path)
            if meta.get("fingerprint") == self.fingerprint(2):
                model = self.new_drl(self.load_stage1())
                model.load_arrays(arrays)
                return model, arrays["substituted"]
        pcm = self.load_stage1()
        model = self.new_drl(pcm)
        frozen = ["E_diagnosis", "text_diagnosis", "text_procedure", "text_medication"]
        before = self._freeze_arrays(pcm)
        t0 = time.time()
        hist = D.train_drl(model, self.data.train, sorted(self.rarity.common), self.cfg.task, self.index)
        after = self._freeze_arrays(pcm)
        conditions = D.mean_conditions(model, self.data.train, self.index, "co")
        table = D.substitute_table(model, self.rarity, conditions)
        diseases = range(self.sizes["diagnosis"])
        q_co, q_te = D.encode_all(model, diseases)
        diag = codebook_diagnostics(q_co.indices, q_te.indices, model.cfg.codes_per_level, q_co.z, q_te.z)
        write_json(self.dir / "drl_history.json", {
            **hist.to_dict(), "final_recon": hist.final_recon, "seconds": time.time() - t0,
            "calibrate_calls": model.calibrate_calls, "diagnostics": diag,
            "freeze": {"before": array_checksum(before, frozen), "after": array_checksum(after, frozen)}})
        arrays = model.to_arrays()
        arrays["substituted"] = table
        arrays["conditions"] = conditions
        save_checkpoint(path, arrays, {"stage": 2, "fingerprint": self.fingerprint(2),
                                       "stage1_sha256": file_checksum(self.stage1_path)})
        return model, table

    def _freeze_arrays(self, pcm: P.PCM) -> dict[str, np.ndarray]:
        out = {f"E_{k}": pcm.emb[k].data for k in ehr.KINDS}
        out.update({f"text_{k}": v for k, v in self.data.text.tables.items()})
        return out

    def load_stage2(self) -> tuple[D.DRL, np.ndarray]:
        if not self.stage2_path.exists():
            raise MissingCheckpointError(f"required checkpoint missing: {self.stage2_path} (run train-drl first)")
        arrays, _ = load_checkpoint(self.stage2_path)
        model = self.new_drl(self.load_stage1())
        model.load_arrays(arrays)
        return model, arrays["substituted"]

    # -- stage 3 ----------------------------------------------------------------
    def finetune(self, resume: bool = True) -> tuple[P.PCM, np.ndarray]:
        path = self.stage3_path
        if resume and path.exists():
            arrays, meta = load_checkpoint(path)
            if meta.get("fingerprint") == self.fingerprint(3):
                model = self.new_pcm()
                model.load_state_dict({k: v for k, v in arrays.items() if k != "substituted"})
                return model, arrays["substituted"]
        drl_model, table = self.load_stage2()
        model = self.load_stage1()
        drl_before = array_checksum(drl_model.to_arrays())
        ed_before = array_checksum({"E_D": model.emb["diagnosis"].data})
        t0 = time.time()
        if self.cfg.no_finetune:
            hist = {"skipped": True}
        else:
            s = self.samples
            tcfg = self._train_cfg(self.cfg.finetune, "finetune")
            hist = P.finetune(model, s["train"], s["val"], self.cfg.task, table, tcfg).to_dict()
        write_json(self.dir / "finetune_history.json", {
            **hist, "seconds": time.time() - t0,
            "freeze": {"drl_before": drl_before, "drl_after": array_checksum(drl_model.to_arrays()),
                       "E_D_before": ed_before,
                       "E_D_after": array_checksum({"E_D": model.emb["diagnosis"].data})}})
        arrays = model.state_dict()
        arrays["substituted"] = table
        save_checkpoint(path, arrays, {"stage": 3, "fingerprint": self.fingerprint(3)})
        return model, table

    def load_stage3(self) -> tuple[P.PCM, np.ndarray]:
        if not self.stage3_path.exists():
            raise MissingCheckpointError(f"required checkpoint missing: {self.stage3_path} (run finetune first)")
        arrays, _ = load_checkpoint(self.stage3_path)
        model = self.new_pcm()
        model.load_state_dict({k: v for k, v in arrays.items() if k != "substituted"})
        return model, arrays["substituted"]

    # -- evaluation ---------------------------------------------------------------
    def predictions(self, model: P.PCM, table=None) -> np.ndarray:
        return P.predict_proba(model, self.samples["test"], self.cfg.task, disease_table=table)

    def score(self, probs: np.ndarray, ks: Sequence[int] | None = None) -> tuple[MetricsReport, GroupReport]:
        test = self.samples["test"]
        truths = [s.target for s in test]
        rep = evaluate(probs, truths, self.cfg.task, ks or self.cfg.ks, self.cfg.threshold)
        visible = [{d for v in s.sequence for d in v.diagnoses} for s in test]
        grp = group_analysis(probs, truths, self.rarity.counts, self.cfg.task, self.cfg.k, visible,
                             self.cfg.threshold)
        return rep, grp

    def evaluate(self, ks: Sequence[int] | None = None) -> dict:
        base = self.load_stage1()
        tuned, table = self.load_stage3()
        name = "udc_if" if self.cfg.no_finetune else "udc"
        metrics, groups = {}, {}
        for label, model, tab in (("stage1", base, None), (name, tuned, table)):
            metrics[label], groups[label] = self.score(self.predictions(model, tab), ks)
        write_reports(self.dir, metrics, groups)
        return {"metrics": {k: v.to_dict() for k, v in metrics.items()},
                "groups": {k: v.to_dict() for k, v in groups.items()}}

    def run(self, resume: bool = True) -> dict:
        self.write_provenance()
        t0 = time.time()
        self.pretrain(resume)
        self.train_drl(resume)
        self.finetune(resume)
        out = self.evaluate()
        out["seconds"] = time.time() - t0
        return out


# -- ablation and sweeps -----------------------------------------------------------

def variant_config(cfg: RunConfig, variant: str) -> RunConfig:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    out = copy.deepcopy(cfg)
    for flag in D.ABLATIONS:
        setattr(out.drl, flag, flag == variant)
    return out


def _metric_row(run: Run, label: str) -> dict:
    metrics = json.loads((run.dir / "metrics.json").read_text())[label]
    groups = json.loads((run.dir / "groups.json").read_text())[label]
    row = {f"acc@{k}": v for k, v in metrics["acc_at_k"].items()}
    row.update({f"pres@{k}": v for k, v in metrics["pres_at_k"].items()})
    row.update({k: metrics[k] for k in ("auroc", "auprc", "jaccard", "f1")})
    g1 = groups["groups"]["G1"]
    row["G1_" + groups["metric"]] = g1[groups["metric"]]
    return row


def run_ablation(cfg: RunConfig, base_dir, variants: Sequence[str] = VARIANTS) -> list[dict]:
    """Six variants over one shared stage-1 checkpoint; failures become rows marked failed."""
    base_dir = Path(base_dir)
    base = Run(cfg, base_dir)
    base.write_provenance()
    base.pretrain()
    stage1_sha = file_checksum(base.stage1_path)
    rows = []
    for variant in variants:
        vcfg = variant_config(cfg, variant)
        run = Run(vcfg, base_dir / "ablation" / variant, shared=base)
        row = {"variant": variant, "status": "ok"}
        try:
            run.write_provenance()
            run.train_drl()
            run.finetune()
            run.evaluate()
            hist = json.loads((run.dir / "drl_history.json").read_text())
            row.update(_metric_row(run, "udc_if" if cfg.no_finetune else "udc"))
            row["L_con_max"] = max(abs(e["con"]) for e in hist["epochs"]) if hist["epochs"] else 0.0
            row["calibrate_calls"] = hist["calibrate_calls"]
            row["final_recon"] = hist["final_recon"]
            row["stage1_sha256"] = file_checksum(run.stage1_path)
        except UDCError as exc:
            row.update(status="failed", error=f"{exc.kind}: {exc}")
            log.error("variant %s failed: %s", variant, exc)
        rows.append(row)
    assert all(r.get("stage1_sha256", stage1_sha) == stage1_sha for r in rows)
    _write_rows(base_dir / "ablation.csv", rows)
    write_json(base_dir / "ablation.json", rows)
    return rows


def _write_rows(path: Path, rows: list[dict]) -> None:
    keys: list[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in keys})


def run_sweep(cfg: RunConfig, base_dir, parameter: str, values: Sequence) -> list[dict]:
    """One row per value. K re-evaluates a single trained model; the others retrain stages 2-3."""
    if parameter not in SWEEPS:
        raise ConfigError(f"sweep parameter must be one of {SWEEPS}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    base_dir = Path(base_dir)
    base = Run(cfg, base_dir)
    base.write_provenance()
    base.pretrain()
    rows = []
    label = "udc_if" if cfg.no_finetune else "udc"
    if parameter == "K":
        base.run()
        model, table = base.load_stage3()
        probs = base.predictions(model, table)
        for k in values:
            try:
                k = int(k)
                if k < 1:
                    raise ValueError
            except (TypeError, ValueError):
                log.warning("skipping invalid K %r", k)
                continue
            rep, _ = base.score(probs, [k])
            rows.append({"K": k, "acc": rep.acc_at_k[k], "pres": rep.pres_at_k[k]})
    else:
        for value in values:
            vcfg = copy.deepcopy(cfg)
            try:
                if parameter == "codebook_size":
                    vcfg.drl.codes_per_level = int(value)
                elif parameter == "alpha":
                    vcfg.drl.alpha = float(value)
                else:
                    vcfg.eta = float(value)
                vcfg.validate()
            except (ConfigError, TypeError, ValueError) as exc:
                log.warning("skipping invalid %s value %r: %s", parameter, value, exc)
                continue
            run = Run(vcfg, base_dir / "sweep" / f"{parameter}={value}", shared=base)
            run.write_provenance()
            run.train_drl()
            run.finetune()
            run.evaluate()
            rows.append({parameter: value, **_metric_row(run, label),
                         "stage1_sha256": file_checksum(run.stage1_path)})
    _write_rows(base_dir / f"sweep_{parameter}.csv", rows)
    return rows


# -- dumps ----------------------------------------------------------------------------

def dump_embeddings(run: Run, which: str, out_path) -> Path:
    """One CSV row per disease: id, rarity class, vector (or per-code rows for ``codebook``)."""
    out_path = Path(out_path)
    if which == "original":
        table = run.load_stage1().emb["diagnosis"].data
    elif which == "substituted":
        _, table = run.load_stage2()
    elif which == "quantized":
        model, _ = run.load_stage2()
        n_d = run.sizes["diagnosis"]
        q_co, q_te = D.encode_all(model, range(n_d))
        rare = np.array([run.rarity.is_rare(d) for d in range(n_d)])
        table = np.where(rare[:, None], q_te.z, q_co.z)
    elif which == "codebook":
        model, _ = run.load_stage2()
        q_co, q_te = D.encode_all(model, range(run.sizes["diagnosis"]))
        with open(out_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["level", "code", "usage_co", "usage_te"] + [f"v{i}" for i in range(model.cfg.dim)])
            for l in range(model.cfg.levels):
                u_co = np.bincount(q_co.indices[:, l], minlength=model.cfg.codes_per_level)
                u_te = np.bincount(q_te.indices[:, l], minlength=model.cfg.codes_per_level)
                for c, vec in enumerate(model.codebook.vectors[l]):
                    w.writerow([l + 1, c, int(u_co[c]), int(u_te[c])] + [repr(float(v)) for v in vec])
        return out_path
    else:
        raise ConfigError(f"unknown dump kind {which!r}")
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "rarity"] + [f"v{i}" for i in range(table.shape[1])])
        for d, row in enumerate(table):
            w.writerow([d, run.rarity.label(d)] + [repr(float(v)) for v in row])
    return out_path
