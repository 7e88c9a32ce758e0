"""Prototype bank via K-means over description embeddings, plus Sinkhorn
soft assignments used as PSA targets.

K-means internally reorders points into a value-sorted canonical order, so
initial centers are chosen by value rather than input position and permuting
the input leaves centroids and inertia bit-identical. Lloyd iterations repair
empty clusters by re-seeding from the point farthest from its centroid.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegeneratePoints,
    KExceedsN,
    NonPositiveEpsilon,
    NumericOverflow,
    ShapeMismatch,
    VsdAlignError,
)
from .numerics import l2_normalize_rows, softmax_rows


@dataclass(frozen=True)
class PrototypeBank:
    """k x d centroid matrix with clustering provenance."""

    centroids: np.ndarray
    inertia: float
    seed: int
    iterations: int = 0
    inertia_history: tuple[float, ...] = ()
    normalized: bool = False

    def __post_init__(self):
        c = np.ascontiguousarray(self.centroids, dtype=np.float64)
        if c.ndim != 2:
            raise ShapeMismatch(f"centroids must be 2-D, got {c.shape}")
        if not np.isfinite(c).all():
            raise VsdAlignError("non-finite centroid")
        # duplicate centroids would make assignments ill-defined
        if np.unique(c, axis=0).shape[0] != c.shape[0]:
            raise DegeneratePoints("two centroids are bit-identical")
        c.setflags(write=False)
        object.__setattr__(self, "centroids", c)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def d(self) -> int:
        return self.centroids.shape[1]

    def finalize(self) -> "PrototypeBank":
        """Unit-normalize centroids for cosine scoring against unit embeddings."""
        return PrototypeBank(
            centroids=l2_normalize_rows(self.centroids),
            inertia=self.inertia,
            seed=self.seed,
            iterations=self.iterations,
            inertia_history=self.inertia_history,
            normalized=True,
        )


def _sq_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # per-center reduction keeps summation order fixed regardless of BLAS threading
    out = np.empty((points.shape[0], centers.shape[0]))
    for j in range(centers.shape[0]):
        delta = points - centers[j]
        out[:, j] = np.einsum("ij,ij->i", delta, delta)
    return out


def _kmeanspp_init(pts: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = pts.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((pts - pts[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # remaining mass is on duplicates; take the lowest unchosen index
            taken = set(chosen)
            idx = next(i for i in range(n) if i not in taken)
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), r, side="right"))
            idx = min(idx, n - 1)
        chosen.append(idx)
        d2 = np.minimum(d2, ((pts - pts[idx]) ** 2).sum(axis=1))
    return pts[chosen].copy()


def kmeans(
    points: np.ndarray, k: int, seed: int = 0, max_iters: int = 100
) -> PrototypeBank:
    """Lloyd's iterations from k-means++ initialization.

    Deterministic given (points, k, seed, max_iters); assignment ties go to
    the lowest centroid index. Stops when assignments stop changing or after
    max_iters rounds. The recorded inertia history is non-increasing.
    """
    pts = np.ascontiguousarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ShapeMismatch(f"points must be 2-D, got {pts.shape}")
    if not np.isfinite(pts).all():
        raise VsdAlignError("non-finite input point")
    n = pts.shape[0]
    if k < 1:
        raise VsdAlignError(f"k must be >= 1, got {k}")
    if k > n:
        raise KExceedsN(f"k={k} with n={n} points")
    if k > 1 and bool((pts == pts[0]).all()):
        raise DegeneratePoints("all points identical; cannot form k > 1 clusters")

    order = np.lexsort(pts.T[::-1])  # canonical value order: col 0 major
    pts = pts[order]
    rng = np.random.Generator(np.random.PCG64(seed))
    centers = _kmeanspp_init(pts, k, rng)

    assign = np.full(n, -1)
    history: list[float] = []
    iterations = 0
    for _ in range(max_iters):
        d2 = _sq_distances(pts, centers)
        new_assign = d2.argmin(axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        iterations += 1
        # repair empty clusters before recentering; donors must keep >= 1 point
        for j in range(k):
            if (assign == j).any():
                continue
            counts = np.bincount(assign, minlength=k)
            cost = d2[np.arange(n), assign].copy()
            cost[counts[assign] <= 1] = -1.0
            far = int(cost.argmax())
            centers[j] = pts[far]
            assign[far] = j
            d2 = _sq_distances(pts, centers)
        for j in range(k):
            centers[j] = pts[assign == j].mean(axis=0)
        delta = pts - centers[assign]
        history.append(float(np.einsum("ij,ij->", delta, delta)))
    inertia = history[-1] if history else 0.0
    return PrototypeBank(
        centroids=centers,
        inertia=inertia,
        seed=seed,
        iterations=iterations,
        inertia_history=tuple(history),
    )


@dataclass(frozen=True)
class ProjectedScores:
    """Eq-style prototype scores: raw E.P^T plus its row softmax."""

    raw: np.ndarray
    probs: np.ndarray


def project_scores(embeddings: np.ndarray, bank: PrototypeBank) -> ProjectedScores:
    """Score unit embeddings against the bank; rows of `probs` are softmaxed."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[1] != bank.d:
        raise ShapeMismatch(f"embeddings {emb.shape} vs bank d={bank.d}")
    raw = emb @ bank.centroids.T
    return ProjectedScores(raw=raw, probs=softmax_rows(raw))


@dataclass(frozen=True)
class AssignmentPlan:
    """Row-stochastic m x k transport plan with equipartition column mass."""

    plan: np.ndarray
    epsilon: float
    iterations: int
    residuals: tuple[float, ...] = ()

    @property
    def marginal_error(self) -> float:
        return self.residuals[-1] if self.residuals else float("nan")


def sinkhorn(scores: np.ndarray, epsilon: float, iters: int) -> AssignmentPlan:
    """Entropic transport plan from a score matrix.

    Starts from K = exp(scores/epsilon) (row-max subtracted for stability),
    alternates column rescaling to marginal 1/k with row rescaling to 1/m for
    `iters` rounds, finishes with a row rescale, then multiplies by m so each
    row is a distribution. Column sums converge to m/k. The recorded residual
    per round is the max column-sum deviation from m/k.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2:
        raise ShapeMismatch(f"scores must be 2-D, got {s.shape}")
    if not np.isfinite(s).all():
        raise NumericOverflow("non-finite score input")
    if not (epsilon > 0):
        raise NonPositiveEpsilon(f"epsilon={epsilon}")
    if iters < 1:
        raise VsdAlignError(f"iters must be >= 1, got {iters}")
    m, k = s.shape
    kernel = np.exp((s - s.max(axis=1, keepdims=True)) / epsilon)
    if not np.isfinite(kernel).all() or (kernel.sum(axis=0) == 0.0).any():
        raise NumericOverflow("Sinkhorn kernel degenerated despite max subtraction")
    residuals = []
    for _ in range(iters):
        kernel *= (1.0 / k) / kernel.sum(axis=0, keepdims=True)
        kernel *= (1.0 / m) / kernel.sum(axis=1, keepdims=True)
        residuals.append(float(np.abs(m * kernel.sum(axis=0) - m / k).max()))
    kernel *= (1.0 / m) / kernel.sum(axis=1, keepdims=True)
    plan = kernel * m
    return AssignmentPlan(
        plan=plan, epsilon=epsilon, iterations=iters, residuals=tuple(residuals)
    )
