"""Training objectives: identity CE, batch-hard triplet, relational distillation.

``stage1_loss`` is ``L_tri + L_cls``; ``stage2_loss`` adds ``alpha * L_kd``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
DISTILL_KINDS = ("rkd", "l1", "l2", "kl")


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.3
    alpha: float = 1.0
    distill: str = "rkd"
    kl_temperature: float = 1.0

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError(f"triplet margin must be >= 0, got {self.margin}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.distill not in DISTILL_KINDS:
            raise ValueError(f"unknown distillation kind {self.distill!r}")
        if self.kl_temperature <= 0:
            raise ValueError("kl temperature must be positive")


def _clamped_log(p: Tensor) -> Tensor:
    if np.any(p.data <= PROB_FLOOR):
        log.warning("probability at or below %g clamped before log", PROB_FLOOR)
    return T.log(T.maximum(p, PROB_FLOOR))


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean ``-log p[y]`` over the batch; a 1-D ``probs`` is a single sample."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    if probs.ndim == 1:
        probs = T.reshape(probs, (1, -1))
    picked = probs[np.arange(len(labels)), labels]
    return T.scale(T.sum(_clamped_log(picked)), -1.0 / len(labels))


def _check_pk(ids: np.ndarray) -> None:
    values, counts = np.unique(ids, return_counts=True)
    if len(values) < 2:
        raise T.ContractError("batch-hard triplet needs at least two identities in the batch")
    single = values[counts < 2]
    if len(single):
        raise T.ContractError(f"identity {single.tolist()[0]!r} has a single sample in the batch")


def batch_hard_triplet(features: Tensor, ids, margin: float = 0.3) -> Tensor:
    """Mean over anchors of ``max(0, d(a, hardest pos) - d(a, hardest neg) + margin)``."""
    ids = np.asarray(ids)
    _check_pk(ids)
    sq = T.sqdist(features, features)
    dist = T.sqrt(T.maximum(sq, 1e-12))
    same = ids[:, None] == ids[None, :]
    pos_mask = same & ~np.eye(len(ids), dtype=bool)
    d = dist.data
    # hardest examples are chosen on the forward values; gradients flow through the picks
    hardest_pos = np.where(pos_mask, d, -np.inf).argmax(axis=1)
    hardest_neg = np.where(same, np.inf, d).argmin(axis=1)
    rows = np.arange(len(ids))
    dp = dist[rows, hardest_pos]
    dn = dist[rows, hardest_neg]
    return T.mean(T.relu(dp - dn + margin))


def rkd_loss(student: Tensor, teacher: Tensor) -> Tensor:
    """Mean over unordered pairs of ``(d'_ij - d_ij)^2`` on squared distances."""
    b = student.shape[0]
    if b < 2:
        raise ValueError("relational distillation needs a batch of at least 2")
    if teacher.shape[0] != b:
        raise T.ShapeError(f"student batch {b} != teacher batch {teacher.shape[0]}")
    iu, ju = np.triu_indices(b, k=1)
    ds = T.sqdist(student, student)[iu, ju]
    dt = T.sqdist(teacher, teacher)[iu, ju]
    diff = ds - dt
    return T.mean(diff * diff)


def _softened(p: Tensor, tau: float) -> Tensor:
    if tau == 1.0:
        return p
    return T.softmax_rows(T.scale(_clamped_log(p), 1.0 / tau))


def distill_variant(kind: str, student_feats: Tensor, teacher_feats: Tensor,
                    student_probs: Tensor | None = None, teacher_probs: Tensor | None = None,
                    temperature: float = 1.0) -> Tensor:
    if kind == "rkd":
        return rkd_loss(student_feats, teacher_feats)
    if kind == "l1":
        return T.mean(T.sum(T.abs(student_feats - teacher_feats), axis=-1))
    if kind == "l2":
        diff = student_feats - teacher_feats
        return T.mean(T.sqrt(T.maximum(T.sum(diff * diff, axis=-1), 1e-12)))
    if kind == "kl":
        if student_probs is None or teacher_probs is None:
            raise ValueError("kl distillation needs student and teacher probabilities")
        s = _softened(student_probs, temperature)
        t = _softened(teacher_probs, temperature)
        per = T.sum(t * (_clamped_log(t) - _clamped_log(s)), axis=-1)
        return T.mean(per)
    raise ValueError(f"unknown distillation kind {kind!r}")


def stage1_loss(features: Tensor, probs: Tensor, ids, cfg: LossConfig) -> Tensor:
    return batch_hard_triplet(features, ids, cfg.margin) + cross_entropy(probs, ids)


def stage2_loss(features: Tensor, probs: Tensor, ids, cfg: LossConfig,
                teacher_feats: Tensor | None = None,
                teacher_probs: Tensor | None = None) -> tuple[Tensor, Tensor | None]:
    """``L_tri + L_cls + alpha * L_kd``.  Returns ``(total, L_kd)``.

    Teacher inputs must come from a frozen bank (plain tensors, no tape history).
    Without a teacher the distillation term is omitted entirely.
    """
    base = stage1_loss(features, probs, ids, cfg)
    if teacher_feats is None:
        return base, None
    kd = distill_variant(cfg.distill, features, teacher_feats, probs, teacher_probs,
                         cfg.kl_temperature)
    return base + T.scale(kd, cfg.alpha), kd
