"""Deterministic mini-batch training of the fusion gates under the joint
instance + prototype objective, with epoch-wise prototype refresh,
checkpointing, and retrieval validation.

Only the gate parameters receive updates; embeddings and prototypes are fixed
inputs. Fixed (dataset, config, seed) reproduces checkpoints and loss traces
bit for bit, and resuming from a checkpoint continues the exact trace.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .embedding_store import (
    EmbeddingSet,
    PairManifest,
    atomic_write_bytes,
)
from .errors import (
    BatchTooSmall,
    ConfigHashMismatch,
    DimensionMismatch,
    FormatError,
    ManifestMismatch,
    TruncatedFile,
    VsdAlignError,
)
from .fusion import (
    FusionParams,
    gated_fuse,
    gated_fuse_backward,
    unit_rows,
    unit_rows_backward,
)
from .losses import IsaConfig, PsaConfig, isa_loss, psa_loss, total_loss
from .numerics import l2_normalize_rows, softmax_rows
from .prototypes import PrototypeBank, kmeans, sinkhorn
from .retrieval_eval import RetrievalReport, recall_at_k, similarity_matrix

CKPT_MAGIC = b"VSDC"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 25
    learning_rate: float = 1e-3
    margin: float = 0.2
    temperature: float = 0.1
    k: int = 16
    seed: int = 0
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    logit_mode: str = "raw_scores"
    psa_on_raw: bool = False
    renorm: bool = True
    sinkhorn_epsilon: float = 0.05
    sinkhorn_iters: int = 3
    kmeans_max_iters: int = 100

    def validate(self) -> None:
        if self.batch_size < 2:
            raise BatchTooSmall("hard-negative mining needs batch_size >= 2")
        if self.epochs < 1:
            raise VsdAlignError("epochs must be >= 1")
        # learning_rate == 0 is allowed as an explicit no-op optimizer
        if self.learning_rate < 0:
            raise VsdAlignError("learning_rate must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise VsdAlignError(f"unknown optimizer {self.optimizer!r}")
        IsaConfig(margin=self.margin).validate()
        PsaConfig(temperature=self.temperature, logit_mode=self.logit_mode).validate()

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """Hash of everything that shapes the trajectory; total epoch count is
        a run length, not a trajectory parameter, so it is excluded."""
        payload = self.to_dict()
        payload.pop("epochs")
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns fresh arrays."""
    if params.shape != grads.shape:
        raise DimensionMismatch(f"params {params.shape} vs grads {grads.shape}")
    b1, b2 = betas
    t = state.step + 1
    m = b1 * state.m + (1.0 - b1) * grads
    v = b2 * state.v + (1.0 - b2) * grads**2
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m=m, v=v, step=t)


def sgd_step(params: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
    return params - lr * grads


def params_to_vector(p: FusionParams) -> np.ndarray:
    return np.concatenate([p.w_img, [p.b_img], p.w_txt, [p.b_txt]])


def vector_to_params(theta: np.ndarray, d: int) -> FusionParams:
    return FusionParams(
        w_img=theta[: 2 * d].copy(),
        b_img=float(theta[2 * d]),
        w_txt=theta[2 * d + 1 : 4 * d + 1].copy(),
        b_txt=float(theta[4 * d + 1]),
    )


@dataclass
class AlignmentData:
    """Embedding sets plus the pairing manifest, indexed for batch gathering.

    `text_aux` carries retrieval-encoder caption embeddings when available;
    without it the text gate fuses each caption with itself, which leaves the
    caption unchanged.
    """

    images: EmbeddingSet
    texts: EmbeddingSet
    vsd: EmbeddingSet
    manifest: PairManifest
    text_aux: EmbeddingSet | None = None

    def __post_init__(self):
        dims = {self.images.d, self.texts.d, self.vsd.d}
        if self.text_aux is not None:
            dims.add(self.text_aux.d)
        if len(dims) != 1:
            raise DimensionMismatch(f"embedding sets disagree on dimension: {sorted(dims)}")
        self.manifest.validate(require_vsd=True)
        img_rows = self.images.row_index()
        txt_rows = self.texts.row_index()
        vsd_rows = self.vsd.row_index()
        try:
            self.image_row = np.array([img_rows[i] for i in self.manifest.images])
            self.image_vsd_row = np.array(
                [vsd_rows[self.manifest.vsd_map[i]] for i in self.manifest.images]
            )
        except KeyError as exc:
            raise ManifestMismatch(f"manifest id missing from embedding sets: {exc}") from exc
        pos_of_image = {iid: j for j, iid in enumerate(self.manifest.images)}
        aux_rows = self.text_aux.row_index() if self.text_aux is not None else None
        cap_row, cap_img, cap_aux = [], [], []
        for cid, iid in self.manifest.captions:
            if cid not in txt_rows:
                raise ManifestMismatch(f"caption id {cid!r} missing from text set")
            cap_row.append(txt_rows[cid])
            cap_img.append(pos_of_image[iid])
            if aux_rows is not None:
                if cid not in aux_rows:
                    raise ManifestMismatch(f"caption id {cid!r} missing from text_aux set")
                cap_aux.append(aux_rows[cid])
        self.caption_row = np.array(cap_row)
        self.caption_image_pos = np.array(cap_img)
        self.caption_aux_row = np.array(cap_aux) if cap_aux else None

    @property
    def d(self) -> int:
        return self.images.d

    @property
    def n_pairs(self) -> int:
        return len(self.manifest.captions)

    def normalized_arrays(self):
        """Unit-row copies in manifest order: (v, dvsd, t, taux) per caption."""
        img = l2_normalize_rows(self.images.data)[self.image_row]
        dvsd = l2_normalize_rows(self.vsd.data)[self.image_vsd_row]
        txt = l2_normalize_rows(self.texts.data)[self.caption_row]
        if self.text_aux is not None:
            aux = l2_normalize_rows(self.text_aux.data)[self.caption_aux_row]
        else:
            aux = txt
        return img, dvsd, txt, aux


@dataclass
class Checkpoint:
    params: FusionParams
    opt_m: np.ndarray
    opt_v: np.ndarray
    opt_step: int
    bank: PrototypeBank
    epoch: int
    rng_state: dict
    config: dict
    config_hash: str

    def save(self, path: str | Path) -> None:
        arrays = [
            ("w_img", self.params.w_img),
            ("b_img", np.array([self.params.b_img])),
            ("w_txt", self.params.w_txt),
            ("b_txt", np.array([self.params.b_txt])),
            ("opt_m", self.opt_m),
            ("opt_v", self.opt_v),
            ("centroids", self.bank.centroids),
        ]
        header = {
            "config": self.config,
            "config_hash": self.config_hash,
            "epoch": self.epoch,
            "opt_step": self.opt_step,
            "rng_state": self.rng_state,
            "bank": {
                "seed": self.bank.seed,
                "inertia": self.bank.inertia,
                "iterations": self.bank.iterations,
                "inertia_history": list(self.bank.inertia_history),
                "normalized": self.bank.normalized,
            },
            "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        }
        hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        blob = bytearray()
        blob += CKPT_MAGIC
        blob += struct.pack("<II", CKPT_VERSION, len(hjson))
        blob += hjson
        for _, a in arrays:
            blob += np.ascontiguousarray(a, dtype="<f8").tobytes()
        atomic_write_bytes(path, bytes(blob))

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if len(raw) < 12 or raw[:4] != CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack_from("<II", raw, 4)
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(raw[12 : 12 + hlen].decode())
        offset = 12 + hlen
        values = {}
        for spec in header["arrays"]:
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            end = offset + 8 * count
            if end > len(raw):
                raise TruncatedFile(path, len(raw), end)
            values[spec["name"]] = (
                np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
                .astype(np.float64)
                .reshape(spec["shape"])
            )
            offset = end
        if offset != len(raw):
            raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
        params = FusionParams(
            w_img=values["w_img"],
            b_img=float(values["b_img"][0]),
            w_txt=values["w_txt"],
            b_txt=float(values["b_txt"][0]),
        )
        binfo = header["bank"]
        bank = PrototypeBank(
            centroids=values["centroids"],
            inertia=binfo["inertia"],
            seed=binfo["seed"],
            iterations=binfo["iterations"],
            inertia_history=tuple(binfo["inertia_history"]),
            normalized=binfo["normalized"],
        )
        return cls(
            params=params,
            opt_m=values["opt_m"],
            opt_v=values["opt_v"],
            opt_step=header["opt_step"],
            bank=bank,
            epoch=header["epoch"],
            rng_state=header["rng_state"],
            config=header["config"],
            config_hash=header["config_hash"],
        )


@dataclass
class BatchGrads:
    isa: float
    psa: float
    total: float
    grad_theta: np.ndarray


def batch_loss_and_grads(
    v: np.ndarray,
    dvsd: np.ndarray,
    t: np.ndarray,
    taux: np.ndarray,
    theta: np.ndarray,
    centroids: np.ndarray,
    cfg: TrainConfig,
    frozen_targets: tuple[np.ndarray, np.ndarray] | None = None,
) -> BatchGrads:
    """Joint loss for one batch and its gradient w.r.t. the gate parameters.

    Sinkhorn targets are recomputed from the current scores and treated as
    constants unless `frozen_targets` pins them (the finite-difference suite
    needs fixed targets to probe a differentiable function).
    """
    d = v.shape[1]
    params = vector_to_params(theta, d)
    fb_v = gated_fuse(v, dvsd, params.w_img, params.b_img)
    fb_t = gated_fuse(t, taux, params.w_txt, params.b_txt)
    if cfg.renorm:
        v_hat, norms_v = unit_rows(fb_v.fused)
        t_hat, norms_t = unit_rows(fb_t.fused)
    else:
        v_hat, t_hat = fb_v.fused, fb_t.fused

    isa, grad_v, grad_t = isa_loss(v_hat, t_hat, IsaConfig(margin=cfg.margin))

    psa_cfg = PsaConfig(temperature=cfg.temperature, logit_mode=cfg.logit_mode)
    if cfg.psa_on_raw:
        scores_img = v @ centroids.T
        scores_txt = t @ centroids.T
    else:
        scores_img = v_hat @ centroids.T
        scores_txt = t_hat @ centroids.T
    if frozen_targets is None:
        if cfg.logit_mode == "literal_double_softmax":
            sink_img, sink_txt = softmax_rows(scores_img), softmax_rows(scores_txt)
        else:
            sink_img, sink_txt = scores_img, scores_txt
        d_img = sinkhorn(sink_img, cfg.sinkhorn_epsilon, cfg.sinkhorn_iters).plan
        d_txt = sinkhorn(sink_txt, cfg.sinkhorn_epsilon, cfg.sinkhorn_iters).plan
    else:
        d_txt, d_img = frozen_targets
    # swapped prediction: the text plan supervises image scores and vice versa
    psa, grad_s_img, grad_s_txt = psa_loss(scores_img, scores_txt, d_txt, d_img, psa_cfg)
    total = total_loss(isa, psa)

    if not cfg.psa_on_raw:
        grad_v = grad_v + grad_s_img @ centroids
        grad_t = grad_t + grad_s_txt @ centroids
    if cfg.renorm:
        grad_v = unit_rows_backward(grad_v, v_hat, norms_v)
        grad_t = unit_rows_backward(grad_t, t_hat, norms_t)
    _, _, gw_img, gb_img = gated_fuse_backward(grad_v, fb_v)
    _, _, gw_txt, gb_txt = gated_fuse_backward(grad_t, fb_t)
    grad_theta = np.concatenate([gw_img, [gb_img], gw_txt, [gb_txt]])
    return BatchGrads(isa=isa, psa=psa, total=total, grad_theta=grad_theta)


@dataclass
class TrainResult:
    initial: Checkpoint
    final: Checkpoint
    history: list[dict] = field(default_factory=list)


def _snapshot(
    theta: np.ndarray,
    adam: AdamState,
    bank: PrototypeBank,
    epoch: int,
    rng: np.random.Generator,
    cfg: TrainConfig,
    d: int,
) -> Checkpoint:
    return Checkpoint(
        params=vector_to_params(theta.copy(), d),
        opt_m=adam.m.copy(),
        opt_v=adam.v.copy(),
        opt_step=adam.step,
        bank=bank,
        epoch=epoch,
        rng_state=rng.bit_generator.state,
        config=cfg.to_dict(),
        config_hash=cfg.hash(),
    )


def train(
    data: AlignmentData, cfg: TrainConfig, resume: Checkpoint | None = None
) -> TrainResult:
    """Run the training loop; returns initial/final checkpoints and the
    per-batch loss history.

    Per epoch: rebuild the prototype bank from the description embeddings,
    shuffle pairs with the persistent RNG stream, then per batch fuse both
    paths, evaluate the joint loss, and step the optimizer on the gate
    parameters only. The last incomplete batch is dropped.
    """
    cfg.validate()
    n_pairs = data.n_pairs
    if n_pairs < cfg.batch_size:
        raise BatchTooSmall(
            f"{n_pairs} pairs cannot fill one batch of {cfg.batch_size}"
        )
    if cfg.k > data.vsd.n:
        raise DimensionMismatch(
            f"k={cfg.k} prototypes but only {data.vsd.n} description embeddings"
        )
    d = data.d
    img, dvsd, txt, taux = data.normalized_arrays()
    vsd_points = l2_normalize_rows(data.vsd.data)

    if resume is not None:
        if resume.config_hash != cfg.hash():
            raise ConfigHashMismatch(
                "checkpoint was produced under a different configuration"
            )
        if resume.params.d != d:
            raise DimensionMismatch(
                f"checkpoint dimension {resume.params.d} vs dataset {d}"
            )
        if resume.epoch > cfg.epochs:
            raise VsdAlignError(
                f"checkpoint is at epoch {resume.epoch}, beyond the requested "
                f"total of {cfg.epochs}"
            )
        theta = params_to_vector(resume.params)
        adam = AdamState(m=resume.opt_m.copy(), v=resume.opt_v.copy(), step=resume.opt_step)
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = resume.rng_state
        start_epoch = resume.epoch
        initial = resume
    else:
        rng = np.random.Generator(np.random.PCG64(cfg.seed))
        theta = params_to_vector(FusionParams.init(d, rng))
        adam = AdamState(m=np.zeros_like(theta), v=np.zeros_like(theta))
        start_epoch = 0
        bank0 = kmeans(
            vsd_points, cfg.k, seed=cfg.seed, max_iters=cfg.kmeans_max_iters
        ).finalize()
        initial = _snapshot(theta, adam, bank0, 0, rng, cfg, d)

    history: list[dict] = []
    bank = initial.bank
    for epoch in range(start_epoch, cfg.epochs):
        bank = kmeans(
            vsd_points, cfg.k, seed=cfg.seed, max_iters=cfg.kmeans_max_iters
        ).finalize()
        perm = rng.permutation(n_pairs)
        for b in range(n_pairs // cfg.batch_size):
            sel = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            pos = data.caption_image_pos[sel]
            out = batch_loss_and_grads(
                img[pos], dvsd[pos], txt[sel], taux[sel],
                theta, bank.centroids, cfg,
            )
            if cfg.optimizer == "adam":
                theta, adam = adam_step(
                    theta, out.grad_theta, adam, cfg.learning_rate,
                    betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps,
                )
            else:
                theta = sgd_step(theta, out.grad_theta, cfg.learning_rate)
                adam = AdamState(m=adam.m, v=adam.v, step=adam.step + 1)
            history.append(
                {"epoch": epoch, "batch": b, "isa": out.isa, "psa": out.psa,
                 "total": out.total}
            )
    final = _snapshot(theta, adam, bank, cfg.epochs, rng, cfg, d)
    return TrainResult(initial=initial, final=final, history=history)


def validate(checkpoint: Checkpoint, data: AlignmentData) -> RetrievalReport:
    """Fuse every embedding with the checkpoint's frozen gates and score
    bidirectional retrieval."""
    if checkpoint.params.d != data.d:
        raise DimensionMismatch(
            f"checkpoint dimension {checkpoint.params.d} vs dataset {data.d}"
        )
    cfg_renorm = bool(checkpoint.config.get("renorm", True))
    img_all = l2_normalize_rows(data.images.data)[data.image_row]
    vsd_all = l2_normalize_rows(data.vsd.data)[data.image_vsd_row]
    txt, aux = data.normalized_arrays()[2:]
    p = checkpoint.params
    fused_img = gated_fuse(img_all, vsd_all, p.w_img, p.b_img, keep_cache=False).fused
    fused_txt = gated_fuse(txt, aux, p.w_txt, p.b_txt, keep_cache=False).fused
    if cfg_renorm:
        fused_img = unit_rows(fused_img)[0]
        fused_txt = unit_rows(fused_txt)[0]
    sim = similarity_matrix(fused_img, fused_txt)
    return recall_at_k(sim, data.manifest)
