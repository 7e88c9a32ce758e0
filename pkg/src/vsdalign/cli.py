"""Command-line entry point.

Subcommands: synth, train, eval, cluster, gradcheck, inspect. Every
subcommand is deterministic given its flags and --seed; artifacts are written
atomically. Exit codes: 0 success, 1 domain error, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _cap_threads() -> None:
    # must run before numpy is imported for the caps to bind the BLAS pools
    cap = os.environ.get("VSDALIGN_THREADS")
    if cap:
        for var in (
            "OMP_NUM_THREADS",
            "OPENBLAS_NUM_THREADS",
            "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS",
        ):
            os.environ.setdefault(var, cap)


DATA_FILES = {"image": "images.emb1", "text": "texts.emb1", "vsd": "vsd.emb1"}
MANIFEST_FILE = "manifest.json"


def _load_dataset(data_dir: str, text_aux: str | None = None):
    from .embedding_store import PairManifest, load_embeddings
    from .trainer import AlignmentData

    root = Path(data_dir)
    images = load_embeddings(root / DATA_FILES["image"])
    texts = load_embeddings(root / DATA_FILES["text"])
    vsd = load_embeddings(root / DATA_FILES["vsd"])
    manifest = PairManifest.load(root / MANIFEST_FILE)
    aux = load_embeddings(text_aux) if text_aux else None
    return AlignmentData(images=images, texts=texts, vsd=vsd, manifest=manifest,
                         text_aux=aux)


def cmd_synth(args) -> int:
    """Generate a seeded synthetic dataset: captions are noisy copies of their
    image and the description embedding mixes the image with fresh noise."""
    import numpy as np

    from .embedding_store import EmbeddingSet, PairManifest, save_embeddings
    from .numerics import l2_normalize_rows

    if not (0.0 <= args.vsd_fidelity <= 1.0):
        print("usage error: --vsd-fidelity must lie in [0, 1]", file=sys.stderr)
        return 2
    if args.d < 2:
        print("usage error: --d must be >= 2", file=sys.stderr)
        return 2
    n, cpi, d = args.n_images, args.captions_per_image, args.d
    rng = np.random.Generator(np.random.PCG64(args.seed))
    images = l2_normalize_rows(rng.standard_normal((n, d)))
    text_noise = rng.standard_normal((n * cpi, d))
    vsd_noise = rng.standard_normal((n, d))
    texts = l2_normalize_rows(
        np.repeat(images, cpi, axis=0) + args.noise_sigma * text_noise
    )
    vsd = l2_normalize_rows(
        args.vsd_fidelity * images
        + (1.0 - args.vsd_fidelity) * args.noise_sigma * vsd_noise
    )

    img_ids = tuple(f"img{i:05d}" for i in range(n))
    cap_ids = tuple(f"cap{j:06d}" for j in range(n * cpi))
    vsd_ids = tuple(f"vsd{i:05d}" for i in range(n))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_embeddings(EmbeddingSet(images, "image", img_ids), out / DATA_FILES["image"])
    save_embeddings(EmbeddingSet(texts, "text", cap_ids), out / DATA_FILES["text"])
    save_embeddings(EmbeddingSet(vsd, "vsd", vsd_ids), out / DATA_FILES["vsd"])
    manifest = PairManifest(
        images=img_ids,
        captions=tuple(
            (cap_ids[i * cpi + c], img_ids[i]) for i in range(n) for c in range(cpi)
        ),
        vsd_map={img_ids[i]: vsd_ids[i] for i in range(n)},
    )
    manifest.save(out / MANIFEST_FILE)
    print(f"wrote {n} images / {n * cpi} captions / {n} descriptions (d={d}) to {out}")
    return 0


def _train_config(args):
    from .trainer import TrainConfig

    cfg = TrainConfig(
        batch_size=args.batch_size,
        epochs=args.epochs,
        learning_rate=args.lr,
        margin=args.margin,
        temperature=args.temperature,
        k=args.k,
        seed=args.seed,
        optimizer=args.optimizer,
        adam_beta1=args.beta1,
        adam_beta2=args.beta2,
        adam_eps=args.adam_eps,
        logit_mode=args.logit_mode,
        psa_on_raw=args.psa_on_raw,
        renorm=not args.no_renorm,
        sinkhorn_epsilon=args.sinkhorn_eps,
        sinkhorn_iters=args.sinkhorn_iters,
    )
    # published-configuration presets; everything else stays at flag values
    if args.paper_flickr:
        cfg.batch_size, cfg.k, cfg.temperature, cfg.epochs = 128, 896, 0.1, 25
    if args.paper_coco:
        cfg.batch_size, cfg.k, cfg.temperature, cfg.epochs = 256, 2560, 0.1, 25
    return cfg


def cmd_train(args) -> int:
    from .embedding_store import atomic_write_bytes
    from .trainer import Checkpoint, train

    data = _load_dataset(args.data, args.text_aux)
    cfg = _train_config(args)
    resume = Checkpoint.load(args.resume) if args.resume else None
    result = train(data, cfg, resume=resume)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if resume is None:
        result.initial.save(out / "init.ckpt")
    result.final.save(out / "final.ckpt")
    log_lines = "".join(
        json.dumps(rec, sort_keys=True) + "\n" for rec in result.history
    )
    atomic_write_bytes(out / "log.jsonl", log_lines.encode())
    last = result.history[-1] if result.history else {}
    print(
        f"trained epochs {result.initial.epoch}..{result.final.epoch - 1}: "
        f"{len(result.history)} batches, last total loss "
        f"{last.get('total', float('nan')):.6f}; artifacts in {out}"
    )
    return 0


def cmd_eval(args) -> int:
    from .trainer import Checkpoint, validate

    data = _load_dataset(args.data, args.text_aux)
    ckpt = Checkpoint.load(args.checkpoint)
    report = validate(ckpt, data)
    print(report.to_json() if args.json else report.table())
    return 0


def cmd_cluster(args) -> int:
    from .embedding_store import EmbeddingSet, atomic_write_bytes, load_embeddings, save_embeddings
    from .numerics import l2_normalize_rows
    from .prototypes import kmeans

    source = load_embeddings(args.embeddings)
    bank = kmeans(
        l2_normalize_rows(source.data), args.k, seed=args.seed, max_iters=args.max_iters
    ).finalize()
    out = Path(args.out)
    proto_ids = tuple(f"proto{i:04d}" for i in range(bank.k))
    save_embeddings(
        EmbeddingSet(bank.centroids, source.modality, proto_ids),
        out.with_suffix(".emb1"),
    )
    meta = {
        "k": bank.k,
        "seed": bank.seed,
        "inertia": bank.inertia,
        "iterations": bank.iterations,
    }
    atomic_write_bytes(out.with_suffix(".meta.json"), json.dumps(meta, indent=1).encode())
    print(f"wrote {bank.k} prototypes (inertia {bank.inertia:.6f}, "
          f"{bank.iterations} iterations) to {out.with_suffix('.emb1')}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    report = run_gradcheck(seed=args.seed, trials=args.trials)
    for line in report.lines():
        print(line)
    return 0 if report.ok else 1


def _inspect_one(path: Path) -> list[str]:
    from .embedding_store import PairManifest, ids_path, load_embeddings

    if path.is_dir():
        data = _load_dataset(str(path))
        return [
            f"{path}: dataset ok — {data.images.n} images, {data.texts.n} captions, "
            f"{data.vsd.n} descriptions, d={data.d}"
        ]
    if path.suffix == ".json":
        manifest = PairManifest.load(path)
        manifest.validate(require_vsd=bool(manifest.vsd_map))
        return [
            f"{path}: manifest ok — {len(manifest.images)} images, "
            f"{len(manifest.captions)} captions, vsd_map {len(manifest.vsd_map)}"
        ]
    es = load_embeddings(path)
    import numpy as np

    norms = np.linalg.norm(es.data, axis=1)
    sidecar = "with ids" if ids_path(path).exists() else "ids auto-generated"
    return [
        f"{path}: EMB1 ok — modality={es.modality} n={es.n} d={es.d} "
        f"row-norm[{norms.min():.4f}, {norms.max():.4f}] ({sidecar})"
    ]


def cmd_inspect(args) -> int:
    for p in args.paths:
        for line in _inspect_one(Path(p)):
            print(line)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vsdalign",
        description="Cross-modal alignment on precomputed embeddings",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a seeded synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-images", type=int, default=64)
    p.add_argument("--captions-per-image", type=int, default=5)
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--vsd-fidelity", type=float, default=0.9,
                   help="weight of the matched image inside the synthetic description")
    p.add_argument("--noise-sigma", type=float, default=0.1,
                   help="per-component Gaussian noise scale")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train the fusion gates")
    p.add_argument("--data", required=True, help="directory from `synth` or an ingest run")
    p.add_argument("--out", required=True)
    p.add_argument("--text-aux", default=None,
                   help="optional EMB1 with retrieval-encoder caption embeddings")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--margin", type=float, default=0.2)
    p.add_argument("--temperature", type=float, default=0.1)
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--adam-eps", type=float, default=1e-8)
    p.add_argument("--logit-mode", choices=("raw_scores", "literal_double_softmax"),
                   default="raw_scores")
    p.add_argument("--psa-on-raw", action="store_true",
                   help="compute the prototype loss on raw instead of fused embeddings")
    p.add_argument("--no-renorm", action="store_true",
                   help="skip renormalizing fused outputs before similarity")
    p.add_argument("--sinkhorn-eps", type=float, default=0.05)
    p.add_argument("--sinkhorn-iters", type=int, default=3)
    p.add_argument("--paper-flickr", action="store_true",
                   help="preset: batch 128, k 896, temperature 0.1, 25 epochs")
    p.add_argument("--paper-coco", action="store_true",
                   help="preset: batch 256, k 2560, temperature 0.1, 25 epochs")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="bidirectional retrieval report for a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text-aux", default=None)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("cluster", help="build a prototype bank from an EMB1 file")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(fn=cmd_cluster)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--trials", type=int, default=100)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("inspect", help="validate and summarize EMB1 files, manifests, or dataset dirs")
    p.add_argument("paths", nargs="+")
    p.set_defaults(fn=cmd_inspect)
    return parser


def main(argv=None) -> int:
    _cap_threads()
    parser = _build_parser()
    args = parser.parse_args(argv)
    from .errors import VsdAlignError

    try:
        return args.fn(args)
    except VsdAlignError as exc:
        diag = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(diag), file=sys.stderr)
        return 1
    except OSError as exc:
        print(json.dumps({"error": "IoError", "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
