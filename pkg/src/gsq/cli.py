"""Command-line driver: fit, render, eval, stats, gradcheck.

Exit codes: 0 success, 1 usage error, 2 unreadable/corrupt input,
3 fitting divergence, 4 feature-dim / channel-mapping mismatch.
Summaries are single-line JSON on stdout; infinite PSNR is emitted as the
string sentinel "inf".  GSQ_THREADS caps rasterizer parallelism.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile

import numpy as np
from PIL import Image

from . import formats, gradcheck, metrics
from .codebook import Codebook, usage_histogram
from .errors import DivergenceError, FileFormatError, GsqError
from .fitter import FitConfig, fit_image
from .rasterizer import render_arrays


class _CliError(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; the contract here is 1
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _json_line(payload: dict) -> str:
    safe = {
        k: ("inf" if isinstance(v, float) and math.isinf(v) else v)
        for k, v in payload.items()
    }
    return json.dumps(safe)


def load_png(path: str) -> np.ndarray:
    """8-bit RGB PNG to H x W x 3 floats in [0, 1] (16-bit gray: peak 65535)."""
    try:
        with Image.open(path) as img:
            if img.mode in ("I", "I;16", "I;16B"):
                data = np.asarray(img, dtype=np.float64) / 65535.0
                return np.repeat(data[:, :, np.newaxis], 3, axis=2)
            rgb = img.convert("RGB")
            return np.asarray(rgb, dtype=np.float64) / 255.0
    except (OSError, ValueError, Image.DecompressionBombError) as exc:
        raise _CliError(2, f"cannot read image {path}: {exc}") from exc


def save_png(path: str, data: np.ndarray) -> None:
    """Clamp to [0, 1], scale to 8 bits with round-half-even, write atomically."""
    u8 = np.rint(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)
    img = Image.fromarray(u8, mode="RGB" if u8.shape[2] == 3 else None)
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".png-tmp-", suffix=".png")
    os.close(fd)
    try:
        img.save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def cmd_fit(args) -> int:
    target = load_png(args.image)
    if args.feature_dim != 3:
        raise _CliError(4, "PNG fitting requires --feature-dim 3 (RGB)")
    cfg = FitConfig(
        num_gaussians=args.num_gaussians,
        feature_dim=args.feature_dim,
        codebook_size=args.codebook_size,
        height=target.shape[0],
        width=target.shape[1],
        steps=args.steps,
        base_lr=args.lr,
        warmup_steps=args.warmup_steps,
        quantize_enabled=not args.no_quantize,
        cutoff=args.cutoff,
        seed=args.seed,
    )
    try:
        scene, book, report = fit_image(target, cfg)
    except DivergenceError as exc:
        raise _CliError(3, f"fit diverged: {exc}") from exc

    indices = None
    if cfg.quantize_enabled and len(scene):
        from .codebook import quantize_set

        snapshot = Codebook(book.entries)  # rendering-time lookup, not usage
        indices = quantize_set(snapshot, scene.as_arrays()[3]).indices
    formats.write_gsq(args.out, scene, cutoff=cfg.cutoff, indices=indices)
    if args.codebook_out:
        formats.write_gcb(args.codebook_out, book.entries)
        formats.write_usage(args.codebook_out + ".usage.json", book.usage_counts)
    print(
        _json_line(
            {
                "psnr": report.final_psnr,
                "ssim": report.final_ssim,
                "utilization": report.utilization,
                "seconds": round(report.seconds, 3),
            }
        )
    )
    return 0


def _parse_channel_map(spec: str, dim: int):
    try:
        picks = [int(p) for p in spec.split(",")]
    except ValueError:
        raise _CliError(4, f"bad --map-channels {spec!r}; expected e.g. 0,1,2")
    if len(picks) != 3 or any(not 0 <= p < dim for p in picks):
        raise _CliError(4, f"--map-channels needs 3 indices in [0, {dim})")
    return picks


def cmd_render(args) -> int:
    try:
        scene_file = formats.read_gsq(args.model)
    except (OSError, FileFormatError) as exc:
        raise _CliError(2, f"cannot read {args.model}: {exc}") from exc
    entries = None
    if scene_file.indices is not None:
        if not args.book:
            raise _CliError(2, f"{args.model} has a codebook-index block; pass book.gcb")
        try:
            entries = formats.read_gcb(args.book)
        except (OSError, FileFormatError) as exc:
            raise _CliError(2, f"cannot read {args.book}: {exc}") from exc

    h = args.height or scene_file.height
    w = args.width or scene_file.width
    gset = scene_file.to_set(height=h, width=w, entries=entries)
    mu, theta, log_s, zeta = gset.as_arrays()
    out, _ = render_arrays(
        mu, theta, log_s, zeta.reshape(len(gset), gset.feature_dim),
        h, w, cutoff=scene_file.cutoff,
    )
    if args.dump_float:
        np.save(args.dump_float, out.astype(np.float32))
    if gset.feature_dim == 3:
        rgb = out
    elif args.map_channels:
        rgb = out[:, :, _parse_channel_map(args.map_channels, gset.feature_dim)]
    else:
        raise _CliError(4, f"scene has D={gset.feature_dim}; pass --map-channels i,j,k")
    save_png(args.out, rgb)
    return 0


def cmd_eval(args) -> int:
    a = load_png(args.a)
    b = load_png(args.b)
    try:
        report = metrics.evaluate(a, b)
    except GsqError as exc:
        raise _CliError(2, str(exc)) from exc
    print(_json_line({"mse": report.mse, "psnr": report.psnr, "ssim": report.ssim}))
    return 0


def cmd_stats(args) -> int:
    usage_path = args.usage or args.book + ".usage.json"
    try:
        entries = formats.read_gcb(args.book)
        counts = formats.read_usage(usage_path)
    except (OSError, KeyError, ValueError, FileFormatError) as exc:
        raise _CliError(2, f"cannot read stats inputs: {exc}") from exc
    if counts.shape[0] != entries.shape[0]:
        raise _CliError(2, "usage log length does not match the codebook")
    book = Codebook(entries, usage_counts=counts)
    try:
        stats = usage_histogram(book)
    except GsqError as exc:
        raise _CliError(2, str(exc)) from exc
    print(
        _json_line(
            {
                "codebook_size": book.size,
                "total_queries": int(counts.sum()),
                "utilization": stats.utilization,
                "top20_cumulative": stats.top20_cumulative,
            }
        )
    )
    # text histogram: sorted frequencies bucketed to at most 20 rows
    buckets = min(20, book.size)
    edges = np.linspace(0, book.size, buckets + 1).astype(int)
    peak = stats.frequencies[0] if stats.frequencies[0] > 0 else 1.0
    for i in range(buckets):
        lo, hi = edges[i], edges[i + 1]
        if lo == hi:
            continue
        mass = float(stats.frequencies[lo:hi].mean())
        bar = "#" * int(round(40 * mass / peak))
        print(f"codes {lo:5d}-{hi - 1:5d} | {bar} {mass:.5f}")
    return 0


def cmd_gradcheck(args) -> int:
    result = gradcheck.run_suite(args.seed, args.scenes)
    print(
        _json_line(
            {
                "max_rel_err": result.max_rel_err,
                "checked": result.checked,
                "skipped": result.skipped,
            }
        )
    )
    return 0 if result.max_rel_err <= 1e-3 else 1


def build_parser() -> _Parser:
    parser = _Parser(prog="gsq", description="Featured 2D Gaussian splat codec")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a scene to a PNG image")
    p.add_argument("--image", required=True)
    p.add_argument("--num-gaussians", type=int, required=True)
    p.add_argument("--feature-dim", type=int, default=3)
    p.add_argument("--codebook-size", type=int, default=1024)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--codebook-out")
    p.add_argument("--no-quantize", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--warmup-steps", type=int, default=None)
    p.add_argument("--cutoff", type=float, default=3.0)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("render", help="render a .gsq scene to PNG")
    p.add_argument("model")
    p.add_argument("book", nargs="?")
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--map-channels", help="3 comma-separated feature indices for D != 3")
    p.add_argument("--dump-float", help="also write the raw float render as .npy")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM between two PNGs")
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="codebook usage report")
    p.add_argument("book")
    p.add_argument("--usage", help="usage log path (default: <book>.usage.json)")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _CliError as exc:
        print(f"gsq: error: {exc}", file=sys.stderr)
        return exc.code
    except GsqError as exc:
        print(f"gsq: error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
