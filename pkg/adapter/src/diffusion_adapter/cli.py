"""Adapter command line: one JSON summary line on stdout, exit 0 on ok."""

from __future__ import annotations

import argparse
import json
import sys

from .backends import BackendError, BackendSpec
from .manifest import AdapterManifestError
from .runner import run_adapter


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="diffusion-adapter", description=__doc__)
    parser.add_argument("--manifest", required=True, help="manifest.jsonl path")
    parser.add_argument("--backend", choices=["mock", "http"], default="mock")
    parser.add_argument("--url", default="", help="http backend endpoint")
    parser.add_argument("--steps", type=int, default=15)
    parser.add_argument("--timeout", type=float, default=30.0)
    parser.add_argument("--retries", type=int, default=3)
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--checkpoint-every", type=int, default=25)
    args = parser.parse_args(argv)

    spec = BackendSpec(kind=args.backend, url=args.url,
                       inference_steps=args.steps, timeout=args.timeout,
                       max_retries=args.retries)
    try:
        summary = run_adapter(args.manifest, spec, jobs=args.jobs,
                              checkpoint_every=args.checkpoint_every)
    except (BackendError, AdapterManifestError, FileNotFoundError, ValueError) as e:
        print(json.dumps({"ok": False, "error": str(e)}))
        return 1
    print(json.dumps(summary.to_dict()))
    return 0


if __name__ == "__main__":
    sys.exit(main())
