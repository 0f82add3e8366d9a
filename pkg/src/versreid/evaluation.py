"""Retrieval evaluation: distances, CMC / mAP with same-camera exclusion, reports."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)


def l2_normalize(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), eps)


def pairwise_distance_matrix(queries: np.ndarray, gallery: np.ndarray,
                             normalize: bool = True) -> np.ndarray:
    """Euclidean distances ``(Q, G)``; rows are L2-normalised first by default."""
    q, g = np.asarray(queries, np.float64), np.asarray(gallery, np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError(f"feature dims differ: queries {q.shape}, gallery {g.shape}")
    if normalize:
        q, g = l2_normalize(q), l2_normalize(g)
    sq = (q * q).sum(1)[:, None] + (g * g).sum(1)[None, :] - 2.0 * q @ g.T
    return np.sqrt(np.maximum(sq, 0.0))


@dataclass
class RetrievalResult:
    cmc: np.ndarray
    mAP: float
    num_valid: int
    num_skipped: int

    def rank(self, k: int) -> float:
        if len(self.cmc) == 0:
            return 0.0
        return float(self.cmc[min(k, len(self.cmc)) - 1])


def evaluate_cmc_map(distances: np.ndarray, q_ids, q_cams, g_ids, g_cams,
                     max_rank: int | None = None) -> RetrievalResult:
    """CMC curve and mAP.

    Gallery entries sharing both identity and camera with the query are dropped;
    the rest are ranked by ascending distance with ties broken by gallery index.
    Queries left without any relevant entry are skipped and counted.
    """
    distances = np.asarray(distances)
    q_ids, q_cams = np.asarray(q_ids), np.asarray(q_cams)
    g_ids, g_cams = np.asarray(g_ids), np.asarray(g_cams)
    n_q, n_g = distances.shape
    max_rank = n_g if max_rank is None else min(max_rank, n_g)
    order = np.argsort(distances, axis=1, kind="stable")
    matches = g_ids[order] == q_ids[:, None]
    keep = ~((g_ids[order] == q_ids[:, None]) & (g_cams[order] == q_cams[:, None]))
    cmc_sum = np.zeros(max_rank)
    aps = []
    skipped = 0
    for i in range(n_q):
        hits = matches[i][keep[i]]
        if not hits.any():
            skipped += 1
            continue
        first = int(np.argmax(hits))
        if first < max_rank:
            cmc_sum[first:] += 1
        positions = np.flatnonzero(hits) + 1
        aps.append(float(np.mean(np.arange(1, len(positions) + 1) / positions)))
    if skipped:
        log.warning("%d of %d queries have no valid gallery match and were skipped", skipped, n_q)
    valid = n_q - skipped
    cmc = cmc_sum / valid if valid else cmc_sum
    return RetrievalResult(cmc, float(np.mean(aps)) if aps else 0.0, valid, skipped)


@dataclass
class ReportRow:
    dataset: str
    rank1: float
    rank5: float
    map: float
    num_query: int
    num_gallery: int
    branch: str = ""
    checkpoint: str = ""
    seed: int = 0


@dataclass
class EvalReport:
    rows: list[ReportRow] = field(default_factory=list)

    def row(self, dataset: str) -> ReportRow:
        for r in self.rows:
            if r.dataset == dataset:
                return r
        raise KeyError(dataset)

    @property
    def joint(self) -> ReportRow:
        return self.row("joint")

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=False) + "\n" for r in self.rows)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def read(cls, path) -> "EvalReport":
        with open(path) as fh:
            return cls([ReportRow(**json.loads(line)) for line in fh if line.strip()])


def _row(name: str, res: RetrievalResult, n_q: int, n_g: int, meta: dict) -> ReportRow:
    return ReportRow(name, res.rank(1), res.rank(5), res.mAP, n_q, n_g, **meta)


def joint_evaluate(extract: Callable[[Sequence], np.ndarray], query: Sequence, gallery: Sequence,
                   scene_names: Sequence[str], meta: dict | None = None) -> EvalReport:
    """Per-scene rows plus one joint row over the unioned query and gallery sets.

    ``extract`` maps a list of samples to a ``(n, D)`` feature array.  Scene
    labels on the samples are used here only to group rows for reporting.
    """
    meta = meta or {}
    qf, gf = extract(query), extract(gallery)
    q_ids = np.array([s.identity for s in query])
    q_cams = np.array([s.camera for s in query])
    q_scn = np.array([s.scene for s in query])
    g_ids = np.array([s.identity for s in gallery])
    g_cams = np.array([s.camera for s in gallery])
    g_scn = np.array([s.scene for s in gallery])
    dist = pairwise_distance_matrix(qf, gf)
    report = EvalReport()
    for s, name in enumerate(scene_names):
        qi, gi = np.flatnonzero(q_scn == s), np.flatnonzero(g_scn == s)
        if len(qi) == 0:
            continue
        sub = dist[np.ix_(qi, gi)]
        res = evaluate_cmc_map(sub, q_ids[qi], q_cams[qi], g_ids[gi], g_cams[gi])
        report.rows.append(_row(name, res, len(qi), len(gi), meta))
    res = evaluate_cmc_map(dist, q_ids, q_cams, g_ids, g_cams)
    report.rows.append(_row("joint", res, len(query), len(gallery), meta))
    return report
