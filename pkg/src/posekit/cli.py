"""Command-line client for the posekit pipeline.

Subcommands mirror the HTTP endpoints (synth | retrieve | pose2v | pose-mv |
eval) and build the same pydantic request models; by default the handler runs
in-process, with --server posting to a running service instead. Exit codes:
0 success, 1 pipeline failure (e.g. no RANSAC consensus), 2 usage/validation.
"""

import argparse
import json
import sys

import pydantic

from .errors import (
    DegenerateEmbeddingError,
    ManifestError,
    PosekitError,
    TensorFormatError,
)
from .service import handlers, models

_ENDPOINTS = {
    models.SynthRequest: ("synth", handlers.handle_synth),
    models.RetrieveRequest: ("retrieve", handlers.handle_retrieve),
    models.TwoViewRequest: ("pose2v", handlers.handle_pose2v),
    models.MultiViewRequest: ("pose-mv", handlers.handle_pose_mv),
    models.EvalRequest: ("eval", handlers.handle_eval),
}


def _dispatch(req, server: str | None) -> dict:
    endpoint, handler = _ENDPOINTS[type(req)]
    if server is None:
        return handler(req).model_dump()
    import httpx

    resp = httpx.post(f"{server.rstrip('/')}/api/v1/{endpoint}", json=req.model_dump(), timeout=600.0)
    if resp.status_code == 400:
        raise ManifestError(resp.json().get("message", resp.text))
    if resp.status_code != 200:
        raise PosekitError(resp.json().get("message", resp.text))
    return resp.json()


def _emit(doc: dict, out_path: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if out_path is None:
        sys.stdout.write(text)
    else:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _parse_pair(pair: str) -> tuple[int, int]:
    try:
        a, b = pair.split(":")
        return int(a), int(b)
    except ValueError:
        raise ValueError(f"pair must look like A:B, got {pair!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posekit", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--server", default=None, help="base URL of a running posekit service")
    common.add_argument("--out", default=None, help="write the JSON report here instead of stdout")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_parser(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    p = add_parser("synth", help="generate a synthetic scene bundle")
    p.add_argument("out_dir")
    p.add_argument("--n-points", type=int, default=200)
    p.add_argument("--noise-px", type=float, default=0.0)
    p.add_argument("--outlier-ratio", type=float, default=0.0)
    p.add_argument("--n-views", type=int, default=2)
    p.add_argument("--rotation-range", type=float, default=30.0)
    p.add_argument("--depth-min", type=float, default=4.0)
    p.add_argument("--depth-max", type=float, default=8.0)
    p.add_argument("--fx", type=float, default=600.0)
    p.add_argument("--fy", type=float, default=600.0)
    p.add_argument("--cx", type=float, default=320.0)
    p.add_argument("--cy", type=float, default=240.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-proposals", type=int, default=4)

    p = add_parser("retrieve", help="hierarchical prompt-to-proposal retrieval")
    p.add_argument("manifest")
    p.add_argument("prompt_id")
    p.add_argument("--top-k", type=int, default=3)
    p.add_argument("--sigma", type=float, default=0.9)

    p = add_parser("pose2v", help="two-view relative pose for a view pair")
    p.add_argument("manifest")
    p.add_argument("pair", help="view pair as A:B, e.g. 0:1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=1e-3)
    p.add_argument("--max-iterations", type=int, default=2048)
    p.add_argument("--svg", default=None, help="write an epipolar-line overlay SVG here")
    p.add_argument("--scale-prompt", default=None, help="prompt id whose bbox fixes the scale")

    p = add_parser("pose-mv", help="incremental multi-view registration")
    p.add_argument("manifest")
    p.add_argument("--views", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=1e-3)

    p = add_parser("eval", help="pose metrics over two-view report files")
    p.add_argument("reports", nargs="+")

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return parser


def _build_request(args):
    if args.command == "synth":
        return models.SynthRequest(
            out_dir=args.out_dir,
            n_points=args.n_points,
            noise_px=args.noise_px,
            outlier_ratio=args.outlier_ratio,
            n_views=args.n_views,
            rotation_range_deg=args.rotation_range,
            depth_min=args.depth_min,
            depth_max=args.depth_max,
            fx=args.fx,
            fy=args.fy,
            cx=args.cx,
            cy=args.cy,
            seed=args.seed,
            n_proposals=args.n_proposals,
        )
    if args.command == "retrieve":
        return models.RetrieveRequest(
            manifest_path=args.manifest, prompt_id=args.prompt_id, top_k=args.top_k, sigma=args.sigma
        )
    if args.command == "pose2v":
        view_a, view_b = _parse_pair(args.pair)
        return models.TwoViewRequest(
            manifest_path=args.manifest,
            view_a=view_a,
            view_b=view_b,
            seed=args.seed,
            threshold=args.threshold,
            max_iterations=args.max_iterations,
            svg_path=args.svg,
            scale_prompt_id=args.scale_prompt,
        )
    if args.command == "pose-mv":
        return models.MultiViewRequest(
            manifest_path=args.manifest, views=args.views, seed=args.seed, threshold=args.threshold
        )
    if args.command == "eval":
        return models.EvalRequest(report_paths=args.reports)
    raise AssertionError(args.command)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "serve":
        import uvicorn

        from .service import app

        uvicorn.run(app, host=args.host, port=args.port)
        return 0
    try:
        req = _build_request(args)
    except (pydantic.ValidationError, ValueError) as exc:
        print(f"posekit: {exc}", file=sys.stderr)
        return 2
    try:
        doc = _dispatch(req, args.server)
    except (ManifestError, TensorFormatError, DegenerateEmbeddingError, ValueError) as exc:
        print(f"posekit: {exc}", file=sys.stderr)
        return 2
    except PosekitError as exc:
        print(f"posekit: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    _emit(doc, args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
