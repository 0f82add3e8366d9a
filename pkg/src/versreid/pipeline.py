"""Training and evaluation loops for the three stages."""

from __future__ import annotations

import json
import logging
import math
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as T
from .config import RunConfig
from .data import SCENES, DatasetManifest, PKSampler, SceneSample, identity_labels, scene_labels
from .evaluation import EvalReport, joint_evaluate
from .losses import stage1_loss, stage2_loss
from .model import (
    Branch,
    ConfigError,
    ModelConfig,
    _tensor,
    forward_bank,
    forward_plain,
    forward_vbranch,
    init_bank,
    init_plain,
    init_vbranch_from_bank,
    neck,
    parameter_digest,
)
from .mpda import ALL_VIEWS, BASIC_VIEWS, contrastive_step, init_encoder, sample_view_pair
from .optim import NonFiniteGradientError, SgdMomentumState, cosine_lr, sgd_momentum_step, zero_grads

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    pass


class DataContractError(ValueError):
    pass


@dataclass
class TrainResult:
    branch: Branch
    step: int
    rng: np.random.Generator
    history: list[dict] = field(default_factory=list)

    def checkpoint(self) -> ckpt_io.Checkpoint:
        return to_checkpoint(self.branch, self.step, self.rng)

    def column(self, key: str) -> np.ndarray:
        return np.array([h[key] for h in self.history if key in h])


def to_checkpoint(branch: Branch, step: int = 0, rng: np.random.Generator | None = None):
    rng_bytes = ckpt_io.rng_to_bytes(rng) if rng is not None else b"\0" * 32
    return ckpt_io.Checkpoint({n: p.data for n, p in branch.params.items()}, step, rng_bytes)


def branch_from_tensors(tensors: dict[str, np.ndarray], base: ModelConfig) -> Branch:
    """Rebuild a branch, inferring shape-determined config fields from the tensors."""
    changes = {"dim": tensors["cls"].shape[-1],
               "depth": len({n.split(".")[0] for n in tensors if n.startswith("block")})}
    if "classifier.weight" in tensors:
        changes["num_classes"] = tensors["classifier.weight"].shape[1]
    if "prompts.scene" in tensors:
        kind = "bank"
        changes["num_scenes"], changes["prompts_per_scene"] = tensors["prompts.scene"].shape[:2]
    elif "prompts.versatile" in tensors:
        kind = "vbranch"
        changes["versatile_prompts"] = tensors["prompts.versatile"].shape[0]
    else:
        kind = "backbone"
    cfg = replace(base, **changes)
    if tensors["pos"].shape[0] != 1 + cfg.num_tokens:
        raise ConfigError(
            f"checkpoint has {tensors['pos'].shape[0]} positional rows but the config implies "
            f"{1 + cfg.num_tokens}"
        )
    params = {n: _tensor(np.array(v, dtype=np.float32), n) for n, v in tensors.items()}
    return Branch(cfg, params, kind)


def load_branch(path, base: ModelConfig) -> tuple[Branch, ckpt_io.Checkpoint]:
    ck = ckpt_io.load(path)
    return branch_from_tensors(ck.tensors, base), ck


def _id_map(samples: Sequence[SceneSample]) -> dict[int, int]:
    return {ident: i for i, ident in enumerate(sorted({s.identity for s in samples}))}


def _emit(history: list, sink, record: dict) -> None:
    history.append(record)
    if sink is not None:
        sink.write(json.dumps(record) + "\n")


def _check_finite(loss: T.Tensor, step: int) -> None:
    if not math.isfinite(float(loss.data)):
        raise NumericalError(f"non-finite loss at step {step}")


def _sgd_step(params, opt: SgdMomentumState, step: int) -> None:
    try:
        sgd_momentum_step(params, None, opt)
    except NonFiniteGradientError as e:
        raise NumericalError(f"step {step}: {e}") from e


def _schedule(cfg: RunConfig, sampler: PKSampler, epochs: int) -> tuple[int, int, int]:
    per_epoch = len(sampler)
    return per_epoch, epochs * per_epoch, cfg.optim.warmup_epochs * per_epoch


def train_augment(images: np.ndarray, rng: np.random.Generator, pad: int = 2,
                  flip_prob: float = 0.5) -> np.ndarray:
    """Supervised-stage augmentation: random horizontal flip, then pad-and-crop shift."""
    b, h, w, _ = images.shape
    flips = rng.random(b) < flip_prob
    shifts = rng.integers(0, 2 * pad + 1, size=(b, 2))
    padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="edge")
    out = np.empty_like(images)
    for i in range(b):
        dy, dx = shifts[i]
        crop = padded[i, dy:dy + h, dx:dx + w]
        out[i] = crop[:, ::-1] if flips[i] else crop
    return out


def _batch_images(cfg: RunConfig, manifest: DatasetManifest, batch, rng) -> np.ndarray:
    images = manifest.images(batch)
    return train_augment(images, rng) if cfg.train_aug else images


# -- stage 1 -------------------------------------------------------------------

def train_bank(cfg: RunConfig, manifest: DatasetManifest, init: dict[str, np.ndarray] | None = None,
               log_sink=None, checkpoint_path=None, max_steps: int | None = None) -> TrainResult:
    """Prompt-based multi-scene joint training of the ReID bank (``L_tri + L_cls``)."""
    train = manifest.split("train")
    scenes = {s.scene for s in train}
    if max(scenes) >= cfg.model.num_scenes:
        raise ConfigError(
            f"manifest has scene label {max(scenes)} but the model has {cfg.model.num_scenes} scenes"
        )
    ids = _id_map(train)
    model_cfg = replace(cfg.model, num_classes=len(ids))
    bank = init_bank(model_cfg, np.random.default_rng([cfg.seed, 1]))
    if init is not None:
        _load_backbone(bank, init)
    rng = np.random.default_rng([cfg.seed, 2])
    route = np.arange(model_cfg.num_scenes)
    if cfg.shuffle_train_scenes:
        route = np.random.default_rng([cfg.seed, 5]).permutation(model_cfg.num_scenes)
    sampler = PKSampler(train, cfg.P, cfg.K)
    per_epoch, total, warmup = _schedule(cfg, sampler, cfg.optim.epochs)
    if max_steps is not None:
        total = min(total, max_steps)
    opt = SgdMomentumState(cfg.optim.lr, cfg.optim.momentum, cfg.optim.weight_decay)
    history: list[dict] = []
    bank.training = True
    for step in range(total):
        opt.lr = cosine_lr(step, per_epoch * cfg.optim.epochs, cfg.optim.lr, warmup)
        batch = sampler.sample(rng)
        images = _batch_images(cfg, manifest, batch, rng)
        labels = np.array([ids[s.identity] for s in batch])
        zero_grads(bank.params)
        with T.GradTape() as tape:
            f, p = forward_bank(images, route[scene_labels(batch)], bank)
            loss = stage1_loss(f, p, labels, cfg.loss)
        _check_finite(loss, step)
        tape.backward(loss)
        _sgd_step(bank.trainable(), opt, step)
        _emit(history, log_sink, {"stage": "bank", "step": step, "epoch": step // per_epoch,
                                  "loss": float(loss.data), "lr": opt.lr})
        if checkpoint_path and cfg.checkpoint_every and (step + 1) % (
                per_epoch * cfg.checkpoint_every) == 0:
            ckpt_io.save(checkpoint_path, to_checkpoint(bank, step + 1, rng))
    bank.training = False
    return TrainResult(bank, total, rng, history)


def _load_backbone(branch: Branch, tensors: dict[str, np.ndarray]) -> None:
    names = branch.backbone_names()
    missing = [n for n in names if n not in tensors]
    if missing:
        raise ConfigError(f"initial checkpoint lacks backbone tensors: {missing[:3]}")
    for n in names:
        if tensors[n].shape != branch.params[n].shape:
            raise ConfigError(f"shape mismatch for {n}: {tensors[n].shape} vs "
                              f"{branch.params[n].shape}")
        branch.params[n].data = np.array(tensors[n], dtype=np.float32)


# -- stage 2 -------------------------------------------------------------------

def distill(cfg: RunConfig, bank: Branch, manifest: DatasetManifest, use_teacher: bool = True,
            log_sink=None, checkpoint_path=None, max_steps: int | None = None) -> TrainResult:
    """Scene-specific prompt distillation into the V-Branch (``L_tri + L_cls + alpha L_kd``).

    The bank sees each sample's scene label; the V-Branch never does.  With
    ``use_teacher=False`` the distillation term is dropped (teacher-free run).
    """
    if bank.kind != "bank":
        raise ConfigError("distillation needs a ReID bank checkpoint")
    train = manifest.split("train")
    ids = _id_map(train)
    if bank.config.num_classes != len(ids):
        raise ConfigError(f"bank has {bank.config.num_classes} classes, manifest has {len(ids)}")
    before = parameter_digest(bank)
    vb = init_vbranch_from_bank(bank, np.random.default_rng([cfg.seed, 3]))
    rng = np.random.default_rng([cfg.seed, 2])
    sampler = PKSampler(train, cfg.P, cfg.K)
    per_epoch, total, warmup = _schedule(cfg, sampler, cfg.optim.distill_epochs)
    if max_steps is not None:
        total = min(total, max_steps)
    opt = SgdMomentumState(cfg.optim.lr, cfg.optim.momentum, cfg.optim.weight_decay)
    history: list[dict] = []
    bank.training, vb.training = False, True
    for step in range(total):
        opt.lr = cosine_lr(step, per_epoch * cfg.optim.distill_epochs, cfg.optim.lr, warmup)
        batch = sampler.sample(rng)
        images = _batch_images(cfg, manifest, batch, rng)
        labels = np.array([ids[s.identity] for s in batch])
        tf = tp = None
        if use_teacher:
            with T.no_grad():
                tf, tp = forward_bank(images, scene_labels(batch), bank)
        zero_grads(vb.params)
        with T.GradTape() as tape:
            f, p = forward_vbranch(images, vb)
            loss, kd = stage2_loss(f, p, labels, cfg.loss, tf, tp)
        _check_finite(loss, step)
        tape.backward(loss)
        _sgd_step(vb.trainable(), opt, step)
        rec = {"stage": "distill", "step": step, "epoch": step // per_epoch,
               "loss": float(loss.data), "lr": opt.lr}
        if kd is not None:
            rec["kd"] = float(kd.data)
        _emit(history, log_sink, rec)
        if checkpoint_path and cfg.checkpoint_every and (step + 1) % (
                per_epoch * cfg.checkpoint_every) == 0:
            ckpt_io.save(checkpoint_path, to_checkpoint(vb, step + 1, rng))
    if parameter_digest(bank) != before:
        raise RuntimeError("ReID bank parameters changed during distillation")
    vb.training = False
    return TrainResult(vb, total, rng, history)


# -- MPDA pretraining ------------------------------------------------------------

def pretrain(cfg: RunConfig, images: np.ndarray, log_sink=None,
             counter: Counter | None = None, max_steps: int | None = None) -> TrainResult:
    """Momentum-contrastive pretraining of the backbone on unlabelled images."""
    images = np.asarray(images)
    if len(images) < 2:
        raise DataContractError("pretraining corpus needs at least 2 images")
    pc = cfg.pretrain
    kinds = ALL_VIEWS if pc.mpda else BASIC_VIEWS
    enc = init_encoder(cfg.model, np.random.default_rng([cfg.seed, 6]))
    menc = enc.clone()
    rng = np.random.default_rng([cfg.seed, 7])
    bs = min(pc.batch_size, len(images))
    per_epoch = max(1, len(images) // bs)
    total = pc.epochs * per_epoch
    if max_steps is not None:
        total = min(total, max_steps)
    opt = SgdMomentumState(pc.lr, cfg.optim.momentum, cfg.optim.weight_decay)
    history: list[dict] = []
    order = rng.permutation(len(images))
    for step in range(total):
        if step % per_epoch == 0 and step:
            order = rng.permutation(len(images))
        j = step % per_epoch
        idx = order[j * bs:(j + 1) * bs]
        batch = images[idx]
        pairs = []
        for i in range(len(batch)):
            donors = [batch[k] for k in range(len(batch)) if k != i]
            pairs.append(sample_view_pair(batch[i], donors, rng, cfg.aug, kinds, counter))
        va = np.stack([a for a, _ in pairs]).astype(np.float32)
        vbv = np.stack([b for _, b in pairs]).astype(np.float32)
        opt.lr = cosine_lr(step, total, pc.lr, min(per_epoch, total // 10))
        try:
            loss = contrastive_step(enc, menc, va, vbv, opt, pc.temperature, pc.ema)
        except NonFiniteGradientError as e:
            raise NumericalError(f"pretrain step {step}: {e}") from e
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite contrastive loss at step {step}")
        _emit(history, log_sink, {"stage": "pretrain", "step": step, "epoch": step // per_epoch,
                                  "loss": loss, "lr": opt.lr})
    return TrainResult(enc, total, rng, history)


# -- evaluation ------------------------------------------------------------------

ENSEMBLES = ("hard", "soft", "concat")


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("VERSREID_THREADS", "1")))
    except ValueError:
        return 1


def _chunked(fn: Callable[[Sequence[SceneSample]], np.ndarray], samples: Sequence[SceneSample],
             size: int) -> np.ndarray:
    chunks = [samples[i:i + size] for i in range(0, len(samples), size)]
    workers = _worker_count()
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(fn, chunks))
    else:
        parts = [fn(c) for c in chunks]
    return np.concatenate(parts, axis=0) if parts else np.zeros((0, 0))


def oracle_scene_classifier(samples: Sequence[SceneSample], num_scenes: int, noise: float,
                            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Predicted scenes and probabilities from true labels flipped with prob ``noise``.

    The predicted scene receives ``1 - noise + noise/S`` probability mass and every
    other scene ``noise/S``; at ``noise=0`` this is the one-hot true label.
    """
    if not 0.0 <= noise <= 1.0:
        raise ValueError("classifier noise must be a probability")
    true = scene_labels(samples)
    flip = rng.random(len(true)) < noise
    offset = rng.integers(1, num_scenes, size=len(true)) if num_scenes > 1 else np.zeros(len(true), int)
    pred = np.where(flip, (true + offset) % num_scenes, true)
    probs = np.full((len(true), num_scenes), noise / num_scenes)
    probs[np.arange(len(true)), pred] += 1.0 - noise
    return pred, probs


def feature_extractor(branch: Branch, manifest: DatasetManifest, ensemble: str | None = None,
                      scene_override: dict[int, tuple[int, np.ndarray]] | None = None,
                      batch: int = 256,
                      feature: str = "neck") -> Callable[[Sequence[SceneSample]], np.ndarray]:
    """Returns ``samples -> features`` for the branch and inference mode.

    The V-Branch extractor never reads ``sample.scene``.  The bank reads it unless
    an ensemble supplies predicted scenes through ``scene_override`` (keyed by
    ``id(sample)``).
    """
    if ensemble is not None and ensemble not in ENSEMBLES:
        raise ValueError(f"unknown ensemble {ensemble!r}")
    if ensemble is not None and branch.kind != "bank":
        raise ConfigError("prompt ensembles apply to the ReID bank only")

    def bank_scenes(samples):
        if scene_override is not None:
            return np.array([scene_override[id(s)][0] for s in samples], dtype=np.intp)
        labels = [s.scene for s in samples]
        if any(l is None or l < 0 for l in labels):
            raise DataContractError("ReID bank evaluation requires scene labels")
        return np.array(labels, dtype=np.intp)

    use_neck = feature == "neck" and "neck.gain" in branch.params

    def out(f: T.Tensor) -> np.ndarray:
        return (neck(f, branch) if use_neck else f).data

    def run(samples):
        images = manifest.images(samples)
        with T.no_grad():
            if branch.kind == "vbranch":
                return out(forward_vbranch(images, branch, with_probs=False)[0])
            if branch.kind == "backbone":
                return out(forward_plain(images, branch, with_probs=False)[0])
            if ensemble in (None, "hard"):
                return out(forward_bank(images, bank_scenes(samples), branch, with_probs=False)[0])
            S = branch.config.num_scenes
            per = [out(forward_bank(images, np.full(len(samples), k), branch, with_probs=False)[0])
                   for k in range(S)]
            if ensemble == "concat":
                return np.concatenate(per, axis=1)
            w = np.stack([scene_override[id(s)][1] for s in samples]).astype(np.float32)
            return np.einsum("bs,sbd->bd", w, np.stack(per))

    return lambda samples: _chunked(run, list(samples), batch)


def evaluate(cfg: RunConfig, branch: Branch, manifest: DatasetManifest,
             ensemble: str | None = None, classifier_noise: float = 0.0,
             checkpoint_id: str = "") -> EvalReport:
    query, gallery = manifest.split("query"), manifest.split("gallery")
    override = None
    if ensemble in ("hard", "soft"):
        pred, probs = oracle_scene_classifier(query + gallery, branch.config.num_scenes,
                                              classifier_noise,
                                              np.random.default_rng([cfg.seed, 4]))
        override = {id(s): (pred[i], probs[i]) for i, s in enumerate(query + gallery)}
    extract = feature_extractor(branch, manifest, ensemble, override, cfg.eval_batch,
                                cfg.eval_feature)
    kind = branch.kind + (f"+{ensemble}" if ensemble else "")
    meta = {"branch": kind, "checkpoint": checkpoint_id, "seed": cfg.seed}
    return joint_evaluate(extract, query, gallery, SCENES, meta)
