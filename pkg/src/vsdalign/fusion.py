"""Scalar-gated adaptive fusion with analytically derived gradients.

Each sample gets one gate g = sigmoid(w . [primary; auxiliary] + b) mixing the
primary embedding with an auxiliary one: fused = aux + g * (primary - aux).
That form makes fused == primary bit-exact whenever auxiliary == primary.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch, StaleCache
from .numerics import stable_sigmoid


@dataclass
class FusionParams:
    """Gate weights and biases for the image and text fusion paths."""

    w_img: np.ndarray  # (2d,)
    b_img: float
    w_txt: np.ndarray  # (2d,)
    b_txt: float

    @classmethod
    def init(cls, d: int, rng: np.random.Generator) -> "FusionParams":
        # fan-in uniform init; zero bias starts every gate near 0.5
        bound = 1.0 / np.sqrt(2 * d)
        return cls(
            w_img=rng.uniform(-bound, bound, size=2 * d),
            b_img=0.0,
            w_txt=rng.uniform(-bound, bound, size=2 * d),
            b_txt=0.0,
        )

    @property
    def d(self) -> int:
        return self.w_img.size // 2

    def validate(self) -> None:
        if self.w_img.shape != self.w_txt.shape or self.w_img.ndim != 1:
            raise ShapeMismatch("gate weight vectors must be 1-D and equally sized")
        vals = np.concatenate([self.w_img, [self.b_img], self.w_txt, [self.b_txt]])
        if not np.isfinite(vals).all():
            raise ShapeMismatch("non-finite fusion parameter")


@dataclass
class _FuseCache:
    stacked: np.ndarray  # m x 2d, [primary ; auxiliary]
    diff: np.ndarray  # m x d, primary - auxiliary
    w: np.ndarray
    gates: np.ndarray


@dataclass
class FusedBatch:
    fused: np.ndarray  # m x d
    gates: np.ndarray  # (m,), strictly inside (0, 1)
    cache: _FuseCache | None = None


def gated_fuse(
    primary: np.ndarray,
    auxiliary: np.ndarray,
    w: np.ndarray,
    bias: float,
    keep_cache: bool = True,
) -> FusedBatch:
    """Forward pass of the per-sample scalar gate.

    gate_i = sigmoid(w . [primary_i ; auxiliary_i] + bias)
    fused_i = gate_i * primary_i + (1 - gate_i) * auxiliary_i
    """
    primary = np.asarray(primary, dtype=np.float64)
    auxiliary = np.asarray(auxiliary, dtype=np.float64)
    if primary.shape != auxiliary.shape or primary.ndim != 2:
        raise ShapeMismatch(
            f"primary {primary.shape} vs auxiliary {auxiliary.shape}"
        )
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    d = primary.shape[1]
    if w.size != 2 * d:
        raise ShapeMismatch(f"gate weights have size {w.size}, expected {2 * d}")
    stacked = np.concatenate([primary, auxiliary], axis=1)
    gates = stable_sigmoid(stacked @ w + bias)
    diff = primary - auxiliary
    fused = auxiliary + gates[:, None] * diff
    cache = _FuseCache(stacked, diff, w, gates) if keep_cache else None
    return FusedBatch(fused=fused, gates=gates, cache=cache)


def gated_fuse_backward(
    grad_out: np.ndarray, batch: FusedBatch
) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Exact gradients of sum(grad_out * fused) w.r.t. inputs and gate params.

    Returns (grad_primary, grad_auxiliary, grad_w, grad_bias).
    """
    if batch.cache is None:
        raise StaleCache("forward batch was built with keep_cache=False")
    cache = batch.cache
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != batch.fused.shape:
        raise ShapeMismatch(
            f"grad_out {grad_out.shape} vs fused {batch.fused.shape}"
        )
    g = cache.gates
    d = cache.diff.shape[1]
    # s_i = g(1-g) * <grad_out_i, primary_i - auxiliary_i>, the sigmoid chain term
    s = (grad_out * cache.diff).sum(axis=1) * g * (1.0 - g)
    grad_primary = g[:, None] * grad_out + np.outer(s, cache.w[:d])
    grad_aux = (1.0 - g)[:, None] * grad_out + np.outer(s, cache.w[d:])
    grad_w = cache.stacked.T @ s
    grad_b = float(s.sum())
    return grad_primary, grad_aux, grad_w, grad_b


def unit_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row renormalization used on fused outputs before cosine similarity.

    Returns (unit, norms); norms are kept for the backward pass.
    """
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if (norms == 0.0).any():
        from .errors import ZeroRow

        raise ZeroRow(int(np.flatnonzero(norms[:, 0] == 0.0)[0]))
    return x / norms, norms


def unit_rows_backward(
    grad_unit: np.ndarray, unit: np.ndarray, norms: np.ndarray
) -> np.ndarray:
    """Gradient of y = x / ||x|| rows: (grad - <grad, y> y) / ||x||."""
    inner = (grad_unit * unit).sum(axis=1, keepdims=True)
    return (grad_unit - inner * unit) / norms
