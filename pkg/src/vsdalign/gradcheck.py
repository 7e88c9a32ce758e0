"""Central finite-difference verification of every analytic gradient.

Each trial draws a small random instance (d <= 8, m <= 6, k <= 5), compares
the hand-derived gradients against central differences at h=1e-6 in float64,
and reports the max relative error. Hinge losses are only probed at points
where the hardest-negative choice and hinge activity are locally stable, so
the finite-difference quotient measures the same smooth branch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fusion import gated_fuse, gated_fuse_backward, unit_rows
from .losses import IsaConfig, PsaConfig, isa_loss, psa_loss
from .numerics import l2_normalize_rows, softmax_rows
from .prototypes import sinkhorn
from .trainer import TrainConfig, batch_loss_and_grads, vector_to_params

H = 1e-6
TOLERANCE = 1e-4
# components where both gradients are below the floor are compared absolutely
REL_FLOOR = 1e-3


def central_diff(f, x: np.ndarray, h: float = H) -> np.ndarray:
    """Central finite differences of scalar f over every coordinate of x."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        out[idx] = (f(xp) - f(xm)) / (2 * h)
    return out


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)
    return float((np.abs(a - n) / denom).max()) if a.size else 0.0


def check_fusion(rng: np.random.Generator) -> float:
    m = int(rng.integers(2, 7))
    d = int(rng.integers(2, 9))
    primary = rng.standard_normal((m, d))
    aux = rng.standard_normal((m, d))
    w = rng.standard_normal(2 * d)
    b = float(rng.standard_normal())
    upstream = rng.standard_normal((m, d))

    def loss(p=primary, a=aux, wv=w, bv=b):
        return float((upstream * gated_fuse(p, a, wv, bv).fused).sum())

    batch = gated_fuse(primary, aux, w, b)
    gp, ga, gw, gb = gated_fuse_backward(upstream, batch)
    errs = [
        max_rel_err(gp, central_diff(lambda x: loss(p=x), primary)),
        max_rel_err(ga, central_diff(lambda x: loss(a=x), aux)),
        max_rel_err(gw, central_diff(lambda x: loss(wv=x), w)),
        max_rel_err(
            np.array([gb]), central_diff(lambda x: loss(bv=float(x[0])), np.array([b]))
        ),
    ]
    return max(errs)


def _isa_stable(v: np.ndarray, t: np.ndarray, margin: float, gap: float = 1e-3) -> bool:
    m = v.shape[0]
    sims = v @ t.T
    pos = np.diag(sims).copy()
    off = sims.copy()
    np.fill_diagonal(off, -np.inf)
    for axis in (1, 0):
        ordered = np.sort(off, axis=axis)
        top = ordered[-1] if axis == 0 else ordered[:, -1]
        if m > 2:
            second = ordered[-2] if axis == 0 else ordered[:, -2]
            if (top - second).min() < gap:
                return False
        viol = margin - pos + top
        if np.abs(viol).min() < gap:
            return False
    return True


def check_isa(rng: np.random.Generator, max_draws: int = 80) -> float:
    cfg = IsaConfig(margin=0.2)
    for _ in range(max_draws):
        m = int(rng.integers(2, 7))
        d = int(rng.integers(2, 9))
        v = l2_normalize_rows(rng.standard_normal((m, d)))
        t = l2_normalize_rows(rng.standard_normal((m, d)))
        if _isa_stable(v, t, cfg.margin):
            break
    else:
        raise RuntimeError("no argmax-stable ISA instance found")
    _, gv, gt = isa_loss(v, t, cfg)
    errs = [
        max_rel_err(gv, central_diff(lambda x: isa_loss(x, t, cfg)[0], v)),
        max_rel_err(gt, central_diff(lambda x: isa_loss(v, x, cfg)[0], t)),
    ]
    return max(errs)


def check_psa(rng: np.random.Generator, logit_mode: str) -> float:
    m = int(rng.integers(2, 7))
    k = int(rng.integers(2, 6))
    cfg = PsaConfig(temperature=0.1, logit_mode=logit_mode)
    scores_img = rng.standard_normal((m, k))
    scores_txt = rng.standard_normal((m, k))
    targets_img = softmax_rows(rng.standard_normal((m, k)))
    targets_txt = softmax_rows(rng.standard_normal((m, k)))

    def loss(si=scores_img, st=scores_txt):
        return psa_loss(si, st, targets_img, targets_txt, cfg)[0]

    _, gi, gt = psa_loss(scores_img, scores_txt, targets_img, targets_txt, cfg)
    errs = [
        max_rel_err(gi, central_diff(lambda x: loss(si=x), scores_img)),
        max_rel_err(gt, central_diff(lambda x: loss(st=x), scores_txt)),
    ]
    return max(errs)


def check_pipeline(rng: np.random.Generator, max_draws: int = 80) -> float:
    """End-to-end check: d(total batch loss)/d(gate params) through fusion,
    renormalization, ISA, and PSA with the Sinkhorn targets frozen."""
    cfg = TrainConfig(batch_size=4, margin=0.2, temperature=0.1)
    for _ in range(max_draws):
        m = int(rng.integers(2, 7))
        d = int(rng.integers(3, 9))
        k = int(rng.integers(2, 6))
        v = l2_normalize_rows(rng.standard_normal((m, d)))
        dv = l2_normalize_rows(rng.standard_normal((m, d)))
        t = l2_normalize_rows(rng.standard_normal((m, d)))
        ta = l2_normalize_rows(rng.standard_normal((m, d)))
        centroids = l2_normalize_rows(rng.standard_normal((k, d)))
        theta = rng.standard_normal(4 * d + 2) * 0.3
        # freeze the transport targets at the base point
        params = vector_to_params(theta, d)
        vh = unit_rows(gated_fuse(v, dv, params.w_img, params.b_img).fused)[0]
        th = unit_rows(gated_fuse(t, ta, params.w_txt, params.b_txt).fused)[0]
        if not _isa_stable(vh, th, cfg.margin):
            continue
        d_img = sinkhorn(vh @ centroids.T, cfg.sinkhorn_epsilon, cfg.sinkhorn_iters).plan
        d_txt = sinkhorn(th @ centroids.T, cfg.sinkhorn_epsilon, cfg.sinkhorn_iters).plan
        frozen = (d_txt, d_img)

        analytic = batch_loss_and_grads(
            v, dv, t, ta, theta, centroids, cfg, frozen_targets=frozen
        ).grad_theta
        numeric = central_diff(
            lambda x: batch_loss_and_grads(
                v, dv, t, ta, x, centroids, cfg, frozen_targets=frozen
            ).total,
            theta,
        )
        return max_rel_err(analytic, numeric)
    raise RuntimeError("no argmax-stable pipeline instance found")


@dataclass
class GradcheckReport:
    trials: int
    seed: int
    worst: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.worst.values())

    @property
    def ok(self) -> bool:
        return self.max_error <= TOLERANCE

    def lines(self) -> list[str]:
        out = [
            f"{name:22s} max rel err {err:.3e}  {'ok' if err <= TOLERANCE else 'FAIL'}"
            for name, err in sorted(self.worst.items())
        ]
        out.append(
            f"{'overall':22s} max rel err {self.max_error:.3e}  "
            f"({'pass' if self.ok else 'fail'} at {TOLERANCE:.0e}, {self.trials} trials)"
        )
        return out


def run_gradcheck(seed: int = 7, trials: int = 100) -> GradcheckReport:
    rng = np.random.Generator(np.random.PCG64(seed))
    report = GradcheckReport(trials=trials, seed=seed)
    families = {
        "gated_fusion": check_fusion,
        "isa_triplet": check_isa,
        "psa_raw_scores": lambda r: check_psa(r, "raw_scores"),
        "psa_double_softmax": lambda r: check_psa(r, "literal_double_softmax"),
        "full_pipeline": check_pipeline,
    }
    for name, fn in families.items():
        worst = 0.0
        for _ in range(trials):
            worst = max(worst, fn(rng))
        report.worst[name] = worst
    return report
