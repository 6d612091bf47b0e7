"""Command-line interface.

Every subcommand prints one JSON document on stdout; logs go to stderr.
Exit codes: 0 ok, 2 bad arguments or unreadable input format, 3 budget
infeasible, 4 file I/O error, 5 corrupt or unsupported container.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import math
import re
import sys

import numpy as np

EXIT_PARSE = 2
EXIT_INFEASIBLE = 3
EXIT_IO = 4
EXIT_CONTAINER = 5

_UNITS = {"": 1, "B": 1, "K": 1 << 10, "M": 1 << 20, "G": 1 << 30}


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def parse_budget(text):
    """'8MB' -> 8 * 2**20 bytes; bare numbers are bytes."""
    m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+)\s*(?:([KMG])B?|B)?\s*", text.upper())
    if not m:
        raise argparse.ArgumentTypeError(f"cannot parse budget {text!r}")
    value = float(m.group(1)) * _UNITS[m.group(2) or ""]
    if value < 1:
        raise argparse.ArgumentTypeError("budget must be at least one byte")
    return int(round(value))


def parse_tau_grid(text):
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"cannot parse tau grid {text!r}") from exc
    if not vals or any(not 0 < v <= 1 for v in vals):
        raise argparse.ArgumentTypeError("tau values must lie in (0, 1]")
    return vals


def _tau(text):
    v = float(text)
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError("tau must lie in (0, 1]")
    return v


def _bits(text):
    v = int(text)
    if not 0 <= v <= 16:
        raise argparse.ArgumentTypeError("bits must lie in [0, 16]")
    return v


def _codec_flags(p):
    p.add_argument("--depth", type=int, default=12, help="octree depth (1..21)")
    p.add_argument("--blocks", type=int, default=40, help="quantization groups per channel")
    p.add_argument("--codebook", type=int, default=4096, help="SH codebook size k")
    p.add_argument("--beta", type=float, default=0.1, help="volume exponent of the view-independent score")
    p.add_argument("--norm", choices=("l1", "l2", "linf"), default="l2")
    p.add_argument("--threads", type=int, default=None, help="worker cap (default: all cores)")
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    ap = argparse.ArgumentParser(prog="splatcodec", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="encode a PLY with a fixed configuration")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--cameras")
    p.add_argument("--tau", type=_tau, default=1.0)
    p.add_argument("--bits", type=_bits, default=8, help="uniform bit width when no Q file is given")
    p.add_argument("--q-file", help="JSON C x B bit-width matrix (e.g. a search report)")
    p.add_argument("--retain", default="none", help="SH rows kept verbatim: none, all or a count")
    _codec_flags(p)

    p = sub.add_parser("decode", help="decode a container to PLY")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--reference", help="original PLY for reconstruction statistics")

    p = sub.add_parser("search", help="size-targeted search")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--cameras")
    p.add_argument("--budget", type=parse_budget, required=True, help="e.g. 8MB (MB = 2^20 bytes)")
    p.add_argument("--tau-grid", type=parse_tau_grid, default=None)
    p.add_argument("--tolerance", type=float, default=0.05)
    p.add_argument("--rounds", type=int, default=8)
    p.add_argument("--select", choices=("auto", "omega", "render"), default="auto")
    p.add_argument("--report", help="also write the report JSON here")
    _codec_flags(p)

    p = sub.add_parser("info", help="describe a container")
    p.add_argument("input")

    p = sub.add_parser("render-eval", help="PSNR of a container against the original model")
    p.add_argument("model")
    p.add_argument("container")
    p.add_argument("cameras")
    p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("synth", help="write a synthetic scene and cameras")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--cameras-out", required=True)
    p.add_argument("--n", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--degree", type=int, default=3, choices=(0, 1, 2, 3))
    p.add_argument("--views", type=int, default=8)
    return ap


def _set_threads(n):
    if n is None:
        return None
    if n < 1:
        raise CliError("--threads must be >= 1", EXIT_PARSE)
    import numba
    from threadpoolctl import threadpool_limits

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return threadpool_limits(n)


def _read_bytes(path):
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}", EXIT_IO) from exc


def _write_bytes(path, data):
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc.strerror}", EXIT_IO) from exc


def _load_model(path):
    from .gs_model import PlyError, load_ply

    buf = _read_bytes(path)
    try:
        return load_ply(buf)
    except (PlyError, ValueError) as exc:
        raise CliError(f"{path}: {exc}", EXIT_PARSE) from exc


def _load_cameras(path):
    if path is None:
        return None
    from .splat import Camera

    try:
        doc = json.loads(_read_bytes(path))
        if not isinstance(doc, list) or not doc:
            raise ValueError("camera file must hold a non-empty JSON array")
        return [Camera.from_dict(d) for d in doc]
    except ValueError as exc:
        raise CliError(f"{path}: {exc}", EXIT_PARSE) from exc


def _decode(buf):
    from .codec import decode
    from .container import ContainerError

    try:
        return decode(buf)
    except ContainerError as exc:
        raise CliError(f"container error: {exc}", EXIT_CONTAINER) from exc


def _codec_config(args):
    from .codec import CodecConfig

    try:
        return CodecConfig(
            depth=args.depth, blocks=args.blocks, codebook=args.codebook, norm=args.norm,
            beta=args.beta, seed=args.seed, threads=args.threads,
        )
    except ValueError as exc:
        raise CliError(str(exc), EXIT_PARSE) from exc


def _sections(buf):
    from .container import section_sizes

    return section_sizes(buf)


def cmd_encode(args):
    from .codec import C, compress

    cloud = _load_model(args.input)
    cams = _load_cameras(args.cameras)
    cfg = _codec_config(args)
    q = None
    if args.q_file:
        try:
            doc = json.loads(_read_bytes(args.q_file))
            q = np.asarray(doc["q"] if isinstance(doc, dict) else doc, dtype=np.int64)
        except (ValueError, KeyError, TypeError) as exc:
            raise CliError(f"{args.q_file}: {exc}", EXIT_PARSE) from exc
        if q.ndim != 2 or q.shape[0] != C or q.min(initial=0) < 0 or q.max(initial=0) > 16:
            raise CliError(f"{args.q_file}: Q must be a {C} x B matrix of widths in [0, 16]", EXIT_PARSE)
        pad = max(0, cfg.blocks - q.shape[1])
        q = np.pad(q, ((0, 0), (0, pad)))
    retain = args.retain
    if retain not in ("none", "all"):
        try:
            retain = int(retain)
        except ValueError as exc:
            raise CliError("--retain takes none, all or an integer", EXIT_PARSE) from exc
    try:
        buf = compress(cloud, cams, args.tau, args.bits, q=q, retain=retain, config=cfg)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_PARSE) from exc
    _write_bytes(args.output, buf)
    return {"output": args.output, "bytes": len(buf), "sections": _sections(buf)}


def _channel_errors(ref, dec, depth):
    """Per-attribute max abs error after matching each decoded Gaussian to its source voxel."""
    from .geometry import voxelize

    out = {"gaussians_in": len(ref), "gaussians_out": len(dec)}
    if len(ref) == len(dec):
        grid, assign = voxelize(ref.positions, depth)
        if len(grid) == len(ref):
            order = np.argsort(assign, kind="stable")
            r = ref.subset(order)
            for name in ("log_scales", "opacity_logits", "sh_dc", "sh_rest"):
                a = getattr(r, name).astype(np.float64)
                b = getattr(dec, name).astype(np.float64)
                out[name + "_max_abs_error"] = float(np.abs(a - b).max(initial=0.0))
            out["position_max_abs_error"] = float(np.abs(r.positions - dec.positions).max())
    return out


def cmd_decode(args):
    from .codec import info
    from .container import ContainerError
    from .gs_model import save_ply

    buf = _read_bytes(args.input)
    cloud = _decode(buf)
    _write_bytes(args.output, save_ply(cloud))
    doc = {"output": args.output, "gaussians": len(cloud), "sh_degree": cloud.sh_degree}
    if args.reference:
        ref = _load_model(args.reference)
        try:
            depth = info(buf)["depth"]
        except ContainerError as exc:
            raise CliError(str(exc), EXIT_CONTAINER) from exc
        doc["reference"] = _channel_errors(ref, cloud, depth)
    return doc


def cmd_search(args):
    from .search import SearchConfig, SearchFailed, search

    cloud = _load_model(args.input)
    cams = _load_cameras(args.cameras)
    try:
        kw = {}
        if args.tau_grid:
            kw["tau_grid"] = args.tau_grid
        cfg = SearchConfig(
            budget_bytes=args.budget, tolerance=args.tolerance, max_rounds=args.rounds,
            codec=_codec_config(args), select_by=args.select, **kw,
        )
    except ValueError as exc:
        raise CliError(str(exc), EXIT_PARSE) from exc
    try:
        result = search(cloud, cams, cfg)
    except SearchFailed as exc:
        raise CliError(str(exc), EXIT_INFEASIBLE) from exc
    _write_bytes(args.output, result.container)
    report = dict(result.report)
    report["output"] = args.output
    report["sections"] = _sections(result.container)
    if args.report:
        _write_bytes(args.report, (json.dumps(report, indent=1, sort_keys=True) + "\n").encode())
    return report


def cmd_info(args):
    from .codec import info
    from .container import ContainerError

    try:
        return info(_read_bytes(args.input))
    except ContainerError as exc:
        raise CliError(f"container error: {exc}", EXIT_CONTAINER) from exc


def _inf_sentinel(v):
    # identical renders have no finite PSNR; JSON has no infinity literal
    return "inf" if math.isinf(v) else v


def cmd_render_eval(args):
    from .splat import psnr, render

    ref = _load_model(args.model)
    dec = _decode(_read_bytes(args.container))
    cams = _load_cameras(args.cameras)
    views = []
    for cam in cams:
        views.append(psnr(render(ref, cam)[0], render(dec, cam)[0]))
    finite = [v for v in views if math.isfinite(v)]
    mean = float(np.mean(views)) if len(finite) == len(views) else math.inf
    return {"psnr": [_inf_sentinel(v) for v in views], "mean_psnr": _inf_sentinel(mean)}


def cmd_synth(args):
    from .gs_model import save_ply
    from .synth import ring_cameras, synth_scene

    if args.n < 1:
        raise CliError("--n must be >= 1", EXIT_PARSE)
    cloud = synth_scene(args.n, args.seed, args.degree)
    cams = ring_cameras(cloud, args.views)
    ply = save_ply(cloud)
    _write_bytes(args.output, ply)
    cam_doc = json.dumps([c.to_dict() for c in cams], indent=1) + "\n"
    _write_bytes(args.cameras_out, cam_doc.encode())
    import hashlib

    return {
        "output": args.output,
        "cameras": args.cameras_out,
        "gaussians": len(cloud),
        "sha256": hashlib.sha256(ply).hexdigest(),
    }


COMMANDS = {
    "encode": cmd_encode,
    "decode": cmd_decode,
    "search": cmd_search,
    "info": cmd_info,
    "render-eval": cmd_render_eval,
    "synth": cmd_synth,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        with contextlib.ExitStack() as stack:
            limiter = _set_threads(getattr(args, "threads", None))
            if limiter is not None:
                stack.enter_context(limiter)
            doc = COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    json.dump(doc, sys.stdout, indent=1, sort_keys=True)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
