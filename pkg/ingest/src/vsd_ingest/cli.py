"""Command-line front end: `vsd-ingest run`.

Backend/encoder endpoints and keys come from flags, a JSON config file, or
environment variables (VSD_INGEST_ENDPOINT, VSD_INGEST_API_KEY,
VSD_INGEST_MODEL, VSD_INGEST_ENCODER_ENDPOINT), in that precedence order.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _setting(args_value, config: dict, key: str, env: str, default=""):
    if args_value:
        return args_value
    if config.get(key):
        return config[key]
    return os.environ.get(env, default)


def cmd_run(args) -> int:
    from .backends import HttpMllmBackend, MockMllmBackend
    from .encoders import HttpTokenEncoder, MockTokenEncoder
    from .pipeline import load_dataset_description, run_pipeline

    config = {}
    if args.config:
        config = json.loads(Path(args.config).read_text())
    entries = load_dataset_description(args.dataset)

    if args.backend == "mock":
        backend = MockMllmBackend()
    else:
        endpoint = _setting(args.endpoint, config, "endpoint", "VSD_INGEST_ENDPOINT")
        if not endpoint:
            print("usage error: http backend needs --endpoint, config, or "
                  "VSD_INGEST_ENDPOINT", file=sys.stderr)
            return 2
        backend = HttpMllmBackend(
            endpoint=endpoint,
            model=_setting(args.model, config, "model", "VSD_INGEST_MODEL"),
            api_key=_setting(None, config, "api_key", "VSD_INGEST_API_KEY"),
        )
    if args.encoder == "mock":
        encoder = MockTokenEncoder(dim=args.dim)
    else:
        endpoint = _setting(args.encoder_endpoint, config, "encoder_endpoint",
                            "VSD_INGEST_ENCODER_ENDPOINT")
        if not endpoint:
            print("usage error: http encoder needs --encoder-endpoint, config, "
                  "or VSD_INGEST_ENCODER_ENDPOINT", file=sys.stderr)
            return 2
        encoder = HttpTokenEncoder(endpoint=endpoint, dim=args.dim)

    records = run_pipeline(
        entries, backend, encoder, args.out, max_workers=args.max_workers
    )
    in_target = sum(1 for r in records if 15 <= r.word_count <= 30)
    print(
        f"{len(records)} descriptions ({in_target} inside the 15-30 word target), "
        f"exported EMB1 + manifest to {args.out}"
    )
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="vsd-ingest",
        description="Generate, encode, and export visual semantic descriptions",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run the full generate/encode/export pipeline")
    p.add_argument("--dataset", required=True,
                   help="JSON listing: {\"images\": [{id, path, captions?}]}")
    p.add_argument("--out", required=True)
    p.add_argument("--backend", choices=("mock", "http"), default="mock")
    p.add_argument("--encoder", choices=("mock", "http"), default="mock")
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--max-workers", type=int, default=4)
    p.add_argument("--endpoint", default=None)
    p.add_argument("--encoder-endpoint", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--config", default=None, help="JSON config file")
    p.set_defaults(fn=cmd_run)
    args = parser.parse_args(argv)

    from .errors import IngestError

    try:
        return args.fn(args)
    except IngestError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    except OSError as exc:
        print(json.dumps({"error": "IoError", "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
