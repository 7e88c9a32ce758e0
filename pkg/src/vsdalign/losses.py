"""Training objectives: instance-level hard-negative triplet alignment (ISA)
and prototype-level swapped cross-entropy (PSA), with analytic gradients.

ISA expects row-aligned positive pairs of unit rows and sums over the batch.
PSA averages over the batch, supervising each modality's prototype prediction
with the other modality's transport plan; targets are constants.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    NonPositiveTemperature,
    RowNotNormalized,
    ShapeMismatch,
    VsdAlignError,
)
from .numerics import log_softmax_rows, softmax_rows

LOGIT_MODES = ("raw_scores", "literal_double_softmax")


@dataclass
class IsaConfig:
    margin: float = 0.2
    similarity: str = "cosine"

    def validate(self) -> None:
        if not np.isfinite(self.margin) or self.margin < 0:
            raise VsdAlignError(f"margin must be finite and >= 0, got {self.margin}")
        if self.similarity != "cosine":
            raise VsdAlignError(f"unsupported similarity {self.similarity!r}")


@dataclass
class PsaConfig:
    temperature: float = 0.1
    logit_mode: str = "raw_scores"

    def validate(self) -> None:
        if not (self.temperature > 0):
            raise NonPositiveTemperature(f"temperature={self.temperature}")
        if self.logit_mode not in LOGIT_MODES:
            raise VsdAlignError(f"unknown logit_mode {self.logit_mode!r}")


def isa_loss(
    v_hat: np.ndarray, t_hat: np.ndarray, cfg: IsaConfig
) -> tuple[float, np.ndarray, np.ndarray]:
    """Hard-negative triplet loss over aligned pairs (v_hat_i, t_hat_i).

    Rows must be unit-normalized; similarity is the plain dot product, which
    equals cosine on unit rows. For each pair the single hardest in-batch
    negative per direction enters a hinge with the configured margin; the
    loss is summed over the batch. Gradients flow only through active hinges
    and the selected negatives. A singleton batch has no negatives and yields
    loss 0.
    """
    cfg.validate()
    v_hat = np.asarray(v_hat, dtype=np.float64)
    t_hat = np.asarray(t_hat, dtype=np.float64)
    if v_hat.shape != t_hat.shape or v_hat.ndim != 2:
        raise ShapeMismatch(f"v_hat {v_hat.shape} vs t_hat {t_hat.shape}")
    m = v_hat.shape[0]
    grad_v = np.zeros_like(v_hat)
    grad_t = np.zeros_like(t_hat)
    if m < 2:
        return 0.0, grad_v, grad_t

    sims = v_hat @ t_hat.T
    pos = np.diag(sims).copy()
    off = sims.copy()
    np.fill_diagonal(off, -np.inf)
    hard_t = off.argmax(axis=1)  # hardest caption for each image; ties -> lowest index
    hard_v = off.argmax(axis=0)  # hardest image for each caption
    rows = np.arange(m)

    viol_t = cfg.margin - pos + off[rows, hard_t]
    viol_v = cfg.margin - pos + off[hard_v, rows]
    act_t = viol_t > 0
    act_v = viol_v > 0
    loss = float(viol_t[act_t].sum() + viol_v[act_v].sum())

    for i in rows[act_t]:
        j = hard_t[i]
        grad_v[i] += t_hat[j] - t_hat[i]
        grad_t[j] += v_hat[i]
        grad_t[i] -= v_hat[i]
    for i in rows[act_v]:
        j = hard_v[i]
        grad_t[i] += v_hat[j] - v_hat[i]
        grad_v[j] += t_hat[i]
        grad_v[i] -= t_hat[i]
    return loss, grad_v, grad_t


def _psa_direction(
    scores: np.ndarray, targets: np.ndarray, cfg: PsaConfig
) -> tuple[float, np.ndarray]:
    m, _ = scores.shape
    tau = cfg.temperature
    if cfg.logit_mode == "raw_scores":
        logits = scores / tau
        loss = float(-(targets * log_softmax_rows(logits)).sum() / m)
        grad = (softmax_rows(logits) - targets) / (m * tau)
        return loss, grad
    # literal mode: the logits are themselves softmax outputs divided by tau
    u = softmax_rows(scores)
    logits = u / tau
    loss = float(-(targets * log_softmax_rows(logits)).sum() / m)
    grad_u = (softmax_rows(logits) - targets) / (m * tau)
    # chain through u = softmax(scores)
    grad = u * (grad_u - (grad_u * u).sum(axis=1, keepdims=True))
    return loss, grad


def psa_loss(
    scores_img: np.ndarray,
    scores_txt: np.ndarray,
    targets_img: np.ndarray,
    targets_txt: np.ndarray,
    cfg: PsaConfig,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Swapped prototype cross-entropy.

    `targets_img` is the text-side transport plan supervising the image
    scores, and vice versa. Targets are treated as constants: no gradient
    flows into them. Returns (loss, grad_scores_img, grad_scores_txt) where
    the gradients are w.r.t. the raw score matrices in either logit mode.
    """
    cfg.validate()
    mats = [np.asarray(a, dtype=np.float64) for a in
            (scores_img, scores_txt, targets_img, targets_txt)]
    scores_img, scores_txt, targets_img, targets_txt = mats
    shape = scores_img.shape
    if any(a.shape != shape for a in mats) or scores_img.ndim != 2:
        raise ShapeMismatch(f"PSA inputs must share one m x k shape, got {[a.shape for a in mats]}")
    for name, t in (("targets_img", targets_img), ("targets_txt", targets_txt)):
        rowsums = t.sum(axis=1)
        if np.abs(rowsums - 1.0).max() > 1e-6:
            raise RowNotNormalized(
                f"{name} row sums deviate from 1 by {np.abs(rowsums - 1.0).max():.2e}"
            )
    loss_img, grad_img = _psa_direction(scores_img, targets_img, cfg)
    loss_txt, grad_txt = _psa_direction(scores_txt, targets_txt, cfg)
    return loss_img + loss_txt, grad_img, grad_txt


def total_loss(isa: float, psa: float) -> float:
    """Joint objective: plain unit-weight sum of the two losses."""
    if not (np.isfinite(isa) and np.isfinite(psa)):
        raise VsdAlignError(f"non-finite loss terms isa={isa}, psa={psa}")
    return isa + psa
