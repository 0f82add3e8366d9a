"""End-to-end runs shared by ``scripts/`` and the acceptance suite."""

from __future__ import annotations

import contextlib
import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .config import RunConfig
from .data import DatasetManifest, PKSampler
from .evaluation import EvalReport
from .pipeline import TrainResult, distill, evaluate, pretrain, train_bank


@dataclass
class PipelineRun:
    pretrain: TrainResult
    bank: TrainResult
    vbranch: TrainResult | None
    digests: dict[str, str] = field(default_factory=dict)
    reports: dict[str, EvalReport] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)

    @property
    def total_seconds(self) -> float:
        return sum(self.seconds.values())


def backbone_tensors(res: TrainResult) -> dict[str, np.ndarray]:
    return {n: p.data for n, p in res.branch.params.items()}


def _store(res: TrainResult, name: str, out_dir: Path | None) -> str:
    ckpt = res.checkpoint()
    if out_dir is None:
        return hashlib.sha256(ckpt_io.encode(ckpt)).hexdigest()
    return ckpt_io.save(out_dir / f"{name}.ckpt", ckpt)


def run_pipeline(cfg: RunConfig, manifest: DatasetManifest, out_dir=None,
                 with_distill: bool = True, with_eval: bool = True) -> PipelineRun:
    """pretrain -> bank -> V-Branch -> evaluation, timing each stage."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    seconds = {}

    def sink(name):
        if out is None:
            return contextlib.nullcontext()
        return open(out / f"{name}.log.jsonl", "w")

    t = time.perf_counter()
    with sink("pretrain") as fh:
        pre = pretrain(cfg, manifest.images(manifest.split("train")), log_sink=fh)
    seconds["pretrain"] = time.perf_counter() - t

    t = time.perf_counter()
    with sink("bank") as fh:
        bank = train_bank(cfg, manifest, init=backbone_tensors(pre), log_sink=fh)
    seconds["bank"] = time.perf_counter() - t

    vb = None
    if with_distill:
        t = time.perf_counter()
        with sink("vbranch") as fh:
            vb = distill(cfg, bank.branch, manifest, log_sink=fh)
        seconds["distill"] = time.perf_counter() - t

    run = PipelineRun(pre, bank, vb, seconds=seconds)
    for name, res in (("pretrain", pre), ("bank", bank), ("vbranch", vb)):
        if res is not None:
            run.digests[name] = _store(res, name, out)

    if with_eval:
        t = time.perf_counter()
        for name, res in (("bank", bank), ("vbranch", vb)):
            if res is None:
                continue
            rep = evaluate(cfg, res.branch, manifest, checkpoint_id=run.digests[name][:16])
            run.reports[name] = rep
            if out is not None:
                rep.write(out / f"{name}.jsonl")
        seconds["eval"] = time.perf_counter() - t
    return run


def first_epoch_loss(res: TrainResult) -> float:
    """Mean training loss over epoch 0 of a stage."""
    return float(np.mean([h["loss"] for h in res.history if h["epoch"] == 0]))


def mpda_probe(cfg: RunConfig, manifest: DatasetManifest, mpda: bool) -> float:
    """First-epoch stage-1 loss after pretraining with or without the multi-scene views."""
    cfg = cfg.replace(mpda=mpda)
    pre = pretrain(cfg, manifest.images(manifest.split("train")))
    per_epoch = len(PKSampler(manifest.split("train"), cfg.P, cfg.K))
    bank = train_bank(cfg, manifest, init=backbone_tensors(pre), max_steps=per_epoch)
    return first_epoch_loss(bank)
