"""Bidirectional retrieval metrics under the five-captions-per-image protocol.

Image-to-text counts a hit when any ground-truth caption of the query image
ranks in the top K among all captions; text-to-image when the parent image
ranks in the top K among all images. Exact similarity ties rank the lower
index first, which keeps golden reports deterministic.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ManifestMismatch, ShapeMismatch
from .embedding_store import PairManifest

KS = (1, 5, 10)


@dataclass(frozen=True)
class RetrievalReport:
    i2t_r1: float
    i2t_r5: float
    i2t_r10: float
    t2i_r1: float
    t2i_r5: float
    t2i_r10: float
    rsum: float

    @classmethod
    def from_recalls(cls, i2t: tuple[float, float, float], t2i: tuple[float, float, float]):
        vals = (*i2t, *t2i)
        return cls(*vals, rsum=float(sum(vals)))

    def as_dict(self) -> dict:
        return {
            "i2t": {"r1": self.i2t_r1, "r5": self.i2t_r5, "r10": self.i2t_r10},
            "t2i": {"r1": self.t2i_r1, "r5": self.t2i_r5, "r10": self.t2i_r10},
            "rsum": self.rsum,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=1)

    def table(self) -> str:
        """Aligned text table, columns ordered R@1/5/10 per direction then rSum."""
        head = (
            f"{'':14s}{'Image-to-Text':^23s} {'Text-to-Image':^23s} {'rSum':>7s}\n"
            f"{'':14s}{'R@1':>7s}{'R@5':>7s}{'R@10':>8s} {'R@1':>7s}{'R@5':>7s}{'R@10':>8s}"
        )
        row = (
            f"{'retrieval':14s}{self.i2t_r1:7.1f}{self.i2t_r5:7.1f}{self.i2t_r10:8.1f} "
            f"{self.t2i_r1:7.1f}{self.t2i_r5:7.1f}{self.t2i_r10:8.1f} {self.rsum:7.1f}"
        )
        return head + "\n" + row


def similarity_matrix(images: np.ndarray, texts: np.ndarray) -> np.ndarray:
    """Cosine similarities between unit image rows and unit text rows."""
    images = np.asarray(images, dtype=np.float64)
    texts = np.asarray(texts, dtype=np.float64)
    if images.ndim != 2 or texts.ndim != 2 or images.shape[1] != texts.shape[1]:
        raise ShapeMismatch(f"images {images.shape} vs texts {texts.shape}")
    return images @ texts.T


def _rank_with_ties(scores: np.ndarray, target: int) -> int:
    """Rank of `target` under descending score, lower index first on ties."""
    t = scores[target]
    return int((scores > t).sum() + (scores[:target] == t).sum())


def recall_at_k(
    sim: np.ndarray, manifest: PairManifest, ks=KS, method: str = "fast"
) -> RetrievalReport:
    """Compute R@K both directions plus rSum from an image x caption matrix.

    `method="oracle"` ranks by exhaustively sorting every query's scores and
    exists as an independent cross-check of the counting path.
    """
    sim = np.asarray(sim, dtype=np.float64)
    n_i, n_t = sim.shape
    if n_i != len(manifest.images) or n_t != len(manifest.captions):
        raise ManifestMismatch(
            f"similarity is {sim.shape} but manifest has "
            f"{len(manifest.images)} images / {len(manifest.captions)} captions"
        )
    if method not in ("fast", "oracle"):
        raise ValueError(f"unknown method {method!r}")
    image_col = {iid: i for i, iid in enumerate(manifest.images)}
    gt_cols: list[list[int]] = [[] for _ in manifest.images]
    parent_row = np.empty(n_t, dtype=np.int64)
    for c, (cid, iid) in enumerate(manifest.captions):
        gt_cols[image_col[iid]].append(c)
        parent_row[c] = image_col[iid]

    i2t_hits = np.zeros(len(ks))
    for i in range(n_i):
        row = sim[i]
        if method == "fast":
            best = min(_rank_with_ties(row, c) for c in gt_cols[i])
        else:
            order = np.argsort(-row, kind="stable")
            pos = np.empty(n_t, dtype=np.int64)
            pos[order] = np.arange(n_t)
            best = min(pos[c] for c in gt_cols[i])
        i2t_hits += [best < k for k in ks]

    t2i_hits = np.zeros(len(ks))
    for c in range(n_t):
        col = sim[:, c]
        if method == "fast":
            rank = _rank_with_ties(col, parent_row[c])
        else:
            order = np.argsort(-col, kind="stable")
            rank = int(np.flatnonzero(order == parent_row[c])[0])
        t2i_hits += [rank < k for k in ks]

    i2t = tuple(100.0 * h / n_i for h in i2t_hits)
    t2i = tuple(100.0 * h / n_t for h in t2i_hits)
    return RetrievalReport.from_recalls(i2t, t2i)
