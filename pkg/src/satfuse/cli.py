"""``satfuse`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 data error (missing or
malformed inputs, shape mismatches), 3 numeric error (divergence, degenerate fits).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from satfuse import errors

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        env = os.environ.get("SATFUSE_THREADS", "")
        try:
            n = int(env) if env else 1
        except ValueError:
            raise UsageError(f"SATFUSE_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError("thread count must be >= 1")
    return n


def _overrides(pairs) -> dict:
    out = {}
    for p in pairs or ():
        if "=" not in p:
            raise UsageError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _emit(obj) -> None:
    print(json.dumps(obj, indent=1))


# ------------------------------------------------------------------ commands


def cmd_solve_align(args) -> int:
    from satfuse.geo import read_landmarks, solve_landmark_transform

    world, pixel = read_landmarks(args.landmarks)
    tf = solve_landmark_transform(world, pixel, mode=args.mode)
    d = tf.to_dict()
    d["rms_residual_m"] = tf.rms_residual_m
    d["transform_id"] = tf.ident()
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps({"transform": d}, indent=1))
    _emit(d)
    return EXIT_OK


def cmd_gen_tiles(args) -> int:
    from satfuse.config import parse_pair
    from satfuse.geo import extract_tiles, load_district_raster, read_poses, write_tile_dataset

    try:
        res = tuple(int(v) for v in parse_pair(args.res))
    except ValueError as exc:
        raise UsageError(f"--res must be HxW: {exc}") from None
    raster, tf = load_district_raster(args.raster)
    ids, poses = read_poses(args.poses)
    tiles = extract_tiles(raster, tf, poses, res, threads=args.n_threads)
    write_tile_dataset(args.out, tiles, ids, tf)
    _emit({"tiles": len(tiles), "out": str(args.out), "transform_id": tf.ident()})
    return EXIT_OK


def cmd_gen_synth(args) -> int:
    from satfuse.config import read_kv
    from satfuse.synth import SceneSpec, generate_split

    mapping = read_kv(args.spec) if args.spec else {}
    mapping.update(_overrides(args.set))
    spec = SceneSpec.from_mapping(mapping)
    if args.n <= 0:
        raise UsageError("--n must be positive")
    m = generate_split(spec, args.n, args.out, start=args.start)
    _emit({"samples": m["n"], "out": str(args.out), "bev_range": spec.bev_range})
    return EXIT_OK


def _model_config_for(mapping: dict, data_spec):
    """Model/train configs from a key=value mapping, sized to the data when not given."""
    from satfuse.config import split_run_config
    from satfuse.fusion.model import bench_config

    mcfg, tcfg = split_run_config(mapping)
    lat, lon = data_spec.extent
    base = bench_config().to_dict()
    base.update(H=data_spec.H, W=data_spec.W, C=data_spec.channels, extent_lat=lat, extent_lon=lon)
    base.update({k: v for k, v in mapping.items() if k in base})
    mcfg = type(mcfg).from_mapping(base)
    if (mcfg.H, mcfg.W, mcfg.C) != (data_spec.H, data_spec.W, data_spec.channels):
        raise errors.DimensionError(
            f"model grid {(mcfg.H, mcfg.W, mcfg.C)} does not match data {(data_spec.H, data_spec.W, data_spec.channels)}"
        )
    return mcfg, tcfg


def cmd_train(args) -> int:
    from satfuse.config import read_kv
    from satfuse.synth import load_split
    from satfuse.train import train

    mapping = read_kv(args.config) if args.config else {}
    mapping.update(_overrides(args.set))
    spec, samples = load_split(args.data)
    try:
        mcfg, tcfg = _model_config_for(mapping, spec)
    except errors.ConfigError as exc:
        raise UsageError(str(exc)) from None
    val = None
    if args.val:
        vspec, val = load_split(args.val)
        if (vspec.H, vspec.W, vspec.channels) != (spec.H, spec.W, spec.channels):
            raise errors.DimensionError("validation split grid differs from training split")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = train(mcfg, tcfg, samples, val, log_path=out / "log.jsonl", out_dir=out)
    summary = {"steps": res.steps, "final_loss": res.history[-1]["loss"] if res.history else None,
               "checkpoint": str(out), "digest": res.model.params.digest()}
    if res.final_val is not None:
        summary["val"] = res.final_val.to_dict()
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    _emit(summary)
    return EXIT_OK


def cmd_eval_ckpt(args) -> int:
    from satfuse.fusion.model import FusionModel
    from satfuse.synth import load_split, parse_range
    from satfuse.train import evaluate

    model = FusionModel.load(args.ckpt)
    spec, samples = load_split(args.data)
    if parse_range(args.range) != spec.extent:
        raise errors.FormatError(f"data covers {spec.bev_range} but --range is {args.range}")
    if (model.cfg.extent_lat, model.cfg.extent_lon) != spec.extent:
        raise errors.DimensionError(
            f"checkpoint footprint {(model.cfg.extent_lat, model.cfg.extent_lon)} vs data {spec.extent}"
        )
    res = evaluate(model, samples, args.range)
    d = res.to_dict()
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(json.dumps(d, indent=1))
    _emit(d)
    return EXIT_OK


def cmd_eval(args) -> int:
    from satfuse.metrics import evaluate_dirs, write_report

    rep = evaluate_dirs(args.pred, args.gt)
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        write_report(args.report, rep)
    _emit(rep.to_dict())
    return EXIT_OK


def cmd_bench_forward(args) -> int:
    import numpy as np

    from satfuse.fusion.model import FusionModel, full_scale_config
    from satfuse.tensor import no_grad

    try:
        H, W, C = (int(v) for v in args.shape.lower().split("x"))
    except ValueError:
        raise UsageError(f"--shape must be HxWxC, got {args.shape!r}") from None
    over = _overrides(args.set)
    over.update(H=H, W=W, C=C)
    try:
        cfg = full_scale_config(**over)
    except errors.ConfigError as exc:
        raise UsageError(str(exc)) from None
    model = FusionModel(cfg, seed=0)
    rng = np.random.default_rng(0)
    f_bev = rng.normal(size=(H, W, C)).astype(np.float32)
    sat = rng.random((3, H, W)).astype(np.float32)
    times = []
    for _ in range(args.repeat):
        t0 = time.perf_counter()
        with no_grad():
            model.forward(f_bev, sat)
        times.append(time.perf_counter() - t0)
    pc = model.patch_cfg
    _emit({"shape": [H, W, C], "tokens": pc.n_tokens, "c_h": cfg.c_h, "fusion": cfg.fusion,
           "seconds": min(times), "all_seconds": times})
    return EXIT_OK


_COLOURS = [(0, 0, 0), (255, 200, 0), (0, 160, 255), (230, 40, 40)]


def _colourise(raster):
    import numpy as np

    lut = np.array(_COLOURS, dtype=np.uint8)
    return lut[np.clip(raster, 0, len(lut) - 1)]


def render_panels(sample, pred, scale: int = 4):
    """(H, W) rasters -> one RGB uint8 image: BEV proxy | satellite | prediction | ground truth."""
    import numpy as np

    mag = np.abs(sample.f_bev.data).mean(axis=-1)
    mag = (255 * mag / max(float(mag.max()), 1e-12)).astype(np.uint8)
    bev = np.repeat(mag[..., None], 3, axis=-1)
    sat = (np.clip(sample.sat_tile.pixels.data.transpose(1, 2, 0), 0, 1) * 255).astype(np.uint8)
    panels = [bev, sat, _colourise(pred), _colourise(sample.gt)]
    H = panels[0].shape[0]
    gap = np.full((H, 1, 3), 255, dtype=np.uint8)
    row = np.concatenate([x for p in panels for x in (p, gap)][:-1], axis=1)
    return np.repeat(np.repeat(row, scale, axis=0), scale, axis=1)


def cmd_render(args) -> int:
    import numpy as np
    from PIL import Image

    from satfuse.fusion.model import FusionModel
    from satfuse.synth import load_split, read_manifest
    from satfuse.train import predict

    model = FusionModel.load(args.ckpt)
    _, samples = load_split(args.data)
    ids = [e["id"] for e in read_manifest(args.data)["samples"]]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for sid, s in list(zip(ids, samples))[: args.limit]:
        pred = predict(model, s)
        Image.fromarray(render_panels(s, pred, args.scale)).save(out / f"{sid}_panels.png")
        Image.fromarray(pred.astype(np.uint8)).save(out / f"{sid}_pred.png")
        written.append(sid)
    _emit({"rendered": written, "out": str(out)})
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="satfuse", description="Satellite-map fusion for HD map construction.")
    p.add_argument("--threads", type=int, default=None, help="worker/BLAS thread cap (env SATFUSE_THREADS)")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    s = sub.add_parser("solve-align", help="fit the landmark transform")
    s.add_argument("--landmarks", required=True)
    s.add_argument("--mode", choices=("similarity", "affine"), default="similarity")
    s.add_argument("--out", help="write the transform JSON here")
    s.set_defaults(func=cmd_solve_align)

    s = sub.add_parser("gen-tiles", help="cut pose-oriented tiles from a district raster")
    s.add_argument("--raster", required=True)
    s.add_argument("--poses", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--res", default="100x200", help="tile resolution HxW")
    s.set_defaults(func=cmd_gen_tiles)

    s = sub.add_parser("gen-synth", help="write a synthetic split")
    s.add_argument("--spec", help="key=value scene spec file")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--start", type=int, default=0, help="first sample index")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_gen_synth)

    s = sub.add_parser("train", help="train a model on a synthetic split")
    s.add_argument("--config", help="key=value model + training config")
    s.add_argument("--data", required=True)
    s.add_argument("--val", help="validation split")
    s.add_argument("--out", default="run")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval-ckpt", help="evaluate a checkpoint on a split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--range", required=True, choices=("60x30", "60x60", "120x60"))
    s.add_argument("--report")
    s.set_defaults(func=cmd_eval_ckpt)

    s = sub.add_parser("eval", help="IoU of predicted rasters against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--report")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench-forward", help="time one fusion forward pass")
    s.add_argument("--shape", default="100x200x64", help="HxWxC")
    s.add_argument("--repeat", type=int, default=1)
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_bench_forward)

    s = sub.add_parser("render", help="side-by-side BEV / satellite / prediction / ground-truth panels")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--limit", type=int, default=8)
    s.add_argument("--scale", type=int, default=4)
    s.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for bad usage
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args.n_threads = _threads(args)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.n_threads):
            return args.func(args)
    except UsageError as exc:
        print(f"satfuse: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except errors.ConfigError as exc:
        print(f"satfuse: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (errors.NumericError, errors.EvaluationError, errors.DegenerateConfigurationError) as exc:
        print(f"satfuse: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (errors.SatFuseError, OSError, ValueError) as exc:
        print(f"satfuse: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
