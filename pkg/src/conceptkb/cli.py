"""Command-line entry point.

The CLI is a thin client of the HTTP service: every subcommand builds one
request, sends it (to ``--server`` when given, otherwise to an in-process
instance of the app), and prints the JSON response. Exit codes: 0 success,
1 usage error, 2 data error, 3 backend failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import httpx

USAGE_EXIT = 1
DATA_EXIT = 2
BACKEND_EXIT = 3

_KIND_TO_EXIT = {"usage": USAGE_EXIT, "data": DATA_EXIT, "backend": BACKEND_EXIT, "internal": BACKEND_EXIT}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


def _backend_payload(args) -> dict:
    payload = {"kind": args.backend, "seed": args.seed}
    if args.backend == "sidecar":
        if args.sidecar_cmd:
            payload["cmd"] = args.sidecar_cmd.split()
        elif args.sidecar_addr:
            payload["addr"] = args.sidecar_addr
        if args.patch_grid:
            m, _, n = args.patch_grid.partition("x")
            payload["patch_grid"] = [int(m), int(n)]
    return payload


def _add_backend_flags(parser):
    parser.add_argument("--backend", choices=["toy", "sidecar"], default="toy", help="grounding backend (default: toy)")
    parser.add_argument("--seed", type=int, default=0, help="seed for the toy backend (default: 0)")
    parser.add_argument("--sidecar-addr", help="host:port of a TCP sidecar")
    parser.add_argument("--sidecar-cmd", help="command line spawning a stdio sidecar")
    parser.add_argument("--patch-grid", help="sidecar patch grid as MxN, e.g. 2x2")


def build_parser() -> _Parser:
    parser = _Parser(prog="conceptkb", description="Concept-centric multimodal KB toolkit")
    parser.add_argument("--server", help="base URL of a running service; default runs in-process")
    parser.add_argument("--config", help="JSON file whose keys override the parsed flags")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mine", help="mine candidate concepts from a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--lexicon-fine", required=True)
    p.add_argument("--lexicon-compound", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-freq", type=int, default=15, help="minimum frequency (default: 15)")
    p.add_argument("--max-len", type=int, default=5, help="maximum surface length (default: 5)")
    p.add_argument("--latin-nz-top-k", type=int, default=50, help="latin nz cut (default: 50)")
    p.add_argument("--threshold-ns", type=int, default=3000, help="ns frequency threshold (default: 3000)")
    p.add_argument("--threshold-nt", type=int, default=400, help="nt frequency threshold (default: 400)")
    p.add_argument("--threshold-nw", type=int, default=300, help="nw frequency threshold (default: 300)")
    p.add_argument("--jobs", type=int, default=1, help="accumulation shards (default: 1)")

    p = sub.add_parser("ground", help="ground concepts into weighted images and senses")
    p.add_argument("--corpus", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--encyclopedia", required=True)
    p.add_argument("--lexicon-fine", required=True)
    p.add_argument("--lexicon-compound", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["HADAMARD", "MATMUL"], default="HADAMARD",
                   help="relevance propagation mode (default: HADAMARD)")
    p.add_argument("--gain", type=float, default=0.5, help="blend gain (default: 0.5)")
    p.add_argument("--tau-desc", type=float, default=0.2, help="sense match threshold (default: 0.2)")
    p.add_argument("--jobs", type=int, default=1, help="worker parallelism (default: 1)")
    _add_backend_flags(p)

    p = sub.add_parser("complete", help="generate descriptions for ungrounded concepts")
    p.add_argument("--corpus", required=True)
    p.add_argument("--encyclopedia", required=True)
    p.add_argument("--fragments", required=True)
    p.add_argument("--generator-fixture", required=True)
    p.add_argument("--judge-fixture", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau-h", type=float, default=0.2, help="hallucination threshold (default: 0.2)")
    p.add_argument("--gain", type=float, default=0.5)
    _add_backend_flags(p)

    p = sub.add_parser("build", help="assemble the final KB directory")
    p.add_argument("--fragments", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--completions")

    p = sub.add_parser("stats", help="print KB statistics")
    p.add_argument("--kb", required=True)

    p = sub.add_parser("index", help="build the image retrieval index")
    p.add_argument("--kb", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-images-per-concept", type=int, default=10)
    p.add_argument("--gain", type=float, default=0.5)
    _add_backend_flags(p)

    p = sub.add_parser("query", help="retrieve the concept label for an image")
    p.add_argument("--index", required=True)
    p.add_argument("--image", required=True)
    _add_backend_flags(p)

    p = sub.add_parser("eval-vqa", help="answer-refinement evaluation")
    p.add_argument("--samples", required=True)
    p.add_argument("--kb", required=True)
    p.add_argument("--llm-fixture", required=True)
    p.add_argument("--include-tag-concepts", action="store_true")

    p = sub.add_parser("eval-vcr", help="visual concept recognition evaluation")
    p.add_argument("--samples", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--judgments")
    _add_backend_flags(p)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    return parser


def _apply_config(args: argparse.Namespace) -> None:
    if not args.config:
        return
    with open(args.config, encoding="utf-8") as fh:
        overrides = json.load(fh)
    if not isinstance(overrides, dict):
        raise ValueError("--config must contain a JSON object")
    for key, value in overrides.items():
        setattr(args, key.replace("-", "_"), value)


def _request(args) -> tuple[str, str, dict | None]:
    """Map the parsed namespace to (method, path, payload)."""
    cmd = args.command
    if cmd == "mine":
        return "POST", "/pipeline/mine", {
            "corpus": args.corpus,
            "lexicon_fine": args.lexicon_fine,
            "lexicon_compound": args.lexicon_compound,
            "out": args.out,
            "config": {
                "min_freq": args.min_freq,
                "max_len": args.max_len,
                "latin_nz_top_k": args.latin_nz_top_k,
                "compound_thresholds": {"ns": args.threshold_ns, "nt": args.threshold_nt, "nw": args.threshold_nw},
            },
            "jobs": args.jobs,
        }
    if cmd == "ground":
        return "POST", "/pipeline/ground", {
            "corpus": args.corpus,
            "candidates": args.candidates,
            "encyclopedia": args.encyclopedia,
            "lexicon_fine": args.lexicon_fine,
            "lexicon_compound": args.lexicon_compound,
            "out": args.out,
            "backend": _backend_payload(args),
            "mode": args.mode,
            "gain": args.gain,
            "tau_desc": args.tau_desc,
            "jobs": args.jobs,
        }
    if cmd == "complete":
        return "POST", "/pipeline/complete", {
            "corpus": args.corpus,
            "encyclopedia": args.encyclopedia,
            "fragments": args.fragments,
            "generator_fixture": args.generator_fixture,
            "judge_fixture": args.judge_fixture,
            "out": args.out,
            "backend": _backend_payload(args),
            "tau_h": args.tau_h,
            "gain": args.gain,
        }
    if cmd == "build":
        return "POST", "/pipeline/build", {
            "fragments": args.fragments,
            "out": args.out,
            "completions": args.completions,
        }
    if cmd == "stats":
        return "GET", f"/kb/stats?kb={args.kb}", None
    if cmd == "index":
        return "POST", "/index/build", {
            "kb": args.kb,
            "out": args.out,
            "backend": _backend_payload(args),
            "max_images_per_concept": args.max_images_per_concept,
            "gain": args.gain,
        }
    if cmd == "query":
        return "POST", "/index/query", {
            "index": args.index,
            "image": args.image,
            "backend": _backend_payload(args),
        }
    if cmd == "eval-vqa":
        return "POST", "/eval/vqa", {
            "samples": args.samples,
            "kb": args.kb,
            "llm_fixture": args.llm_fixture,
            "include_tag_concepts": args.include_tag_concepts,
        }
    if cmd == "eval-vcr":
        return "POST", "/eval/vcr", {
            "samples": args.samples,
            "index": args.index,
            "backend": _backend_payload(args),
            "judgments": args.judgments,
        }
    raise AssertionError(f"unhandled command {cmd}")


def _make_client(server: str | None):
    if server:
        return httpx.Client(base_url=server, timeout=600.0)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        from fastapi.testclient import TestClient

    from .service import create_app

    return TestClient(create_app(), raise_server_exceptions=False)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help exits 0, usage errors exit 1
        return int(exc.code or 0)
    try:
        _apply_config(args)
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: bad --config file: {exc}", file=sys.stderr)
        return DATA_EXIT

    if args.command == "serve":
        import uvicorn

        from .service import create_app

        uvicorn.run(create_app(), host=args.host, port=args.port)
        return 0

    method, path, payload = _request(args)
    try:
        with _make_client(args.server) as client:
            response = client.request(method, path, json=payload) if payload is not None else client.request(method, path)
    except httpx.HTTPError as exc:
        print(f"error: cannot reach service: {exc}", file=sys.stderr)
        return BACKEND_EXIT

    try:
        body = response.json()
    except json.JSONDecodeError:
        print(f"error: non-JSON response (HTTP {response.status_code})", file=sys.stderr)
        return BACKEND_EXIT

    if response.status_code >= 400:
        detail = body.get("error") if isinstance(body, dict) else None
        if isinstance(detail, dict) and "kind" in detail:
            print(f"error: {detail.get('message', '')}", file=sys.stderr)
            return _KIND_TO_EXIT.get(detail["kind"], DATA_EXIT)
        print(f"error: HTTP {response.status_code}: {json.dumps(body)[:300]}", file=sys.stderr)
        return DATA_EXIT if response.status_code < 500 else BACKEND_EXIT

    print(json.dumps(body, ensure_ascii=False, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
