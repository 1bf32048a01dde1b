"""Command-line entry point.

Subcommands: ``synth``, ``reconstruct``, ``eval``, ``train-overfit`` and
``fuse-bench``. Each accepts ``--config FILE`` (a JSON object); any flag
given on the command line overrides the same key in the file.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, synth
from . import io as pio
from .geometry import AlignmentError
from .losses import LossConfig
from .memory import PointerMemoryError
from .model import ModelConfig, StreamingModel
from .pipeline import (
    REPORT_KEYS,
    NumericError,
    StreamConfig,
    StreamError,
    evaluate,
    reconstruct_stream,
    train_overfit,
)
from .rope3d import verify_golden

log = logging.getLogger("pointermem")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
FIXTURES = {
    "static": synth.static_fixture,
    "dynamic": synth.dynamic_fixture,
    "revisit": synth.revisit_fixture,
    "overfit": synth.overfit_fixture,
}
BENCH_HEADER = ("frame", "pointers", "fused", "appended", "ms")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(path) -> dict:
    if path is None:
        return {}
    cfg = json.loads(Path(path).read_text())
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return cfg


def _opt(args, cfg: dict, key: str, default):
    """Flag value if given, else config value, else ``default``."""
    value = getattr(args, key, None)
    if value is not None:
        return value
    return cfg.get(key, default)


def _scene_frames(args, cfg):
    scene = _opt(args, cfg, "scene", None)
    fixture = _opt(args, cfg, "fixture", None)
    if scene and fixture:
        raise UsageError("give either a scene directory or --fixture, not both")
    if fixture:
        if fixture not in FIXTURES:
            raise UsageError(f"unknown fixture {fixture!r}; choose from {sorted(FIXTURES)}")
        return synth.generate(FIXTURES[fixture]())
    if not scene:
        raise UsageError("a scene directory or --fixture is required")
    return pio.load_scene(scene)[1]


def _model_from_weights(path) -> StreamingModel:
    params, mcfg = pio.load_checkpoint(path)
    if mcfg is None:
        raise ValueError(f"{path}: checkpoint manifest has no model config")
    model = StreamingModel(ModelConfig.from_json(mcfg))
    named = dict(model.named_parameters())
    missing = set(named) - set(params)
    if missing:
        raise ValueError(f"{path}: checkpoint lacks {sorted(missing)[:3]}")
    for name, tensor in named.items():
        if params[name].shape != tensor.data.shape:
            raise ValueError(f"{path}: {name} has shape {params[name].shape}, model wants {tensor.data.shape}")
        tensor.data = params[name].copy()
    return model


def _model_config(cfg: dict, frames, tiny: bool, seed) -> ModelConfig:
    overrides = dict(cfg.get("model", {}))
    overrides.setdefault("image_size", frames[0].pixels.shape[:2])
    if seed is not None:
        overrides["seed"] = seed
    return ModelConfig.tiny(**overrides) if tiny else ModelConfig.from_json(overrides)


def _stream_config(args, cfg, patch: int) -> StreamConfig:
    return StreamConfig(
        fusion=_opt(args, cfg, "fusion", True),
        l=tuple(_opt(args, cfg, "l", (20.0, 20.0, 20.0))),
        accelerator=_opt(args, cfg, "accelerator", "brute"),
        oracle_frontend=_opt(args, cfg, "oracle_frontend", False),
        noise_sigma=float(_opt(args, cfg, "noise_sigma", 0.0)),
        seed=int(_opt(args, cfg, "seed", 0)),
        patch=patch,
    )


def _build_model(args, cfg, frames):
    """Model for the stream, or ``None`` in oracle mode."""
    if _opt(args, cfg, "oracle_frontend", False):
        return None
    weights = _opt(args, cfg, "weights", None)
    if weights:
        return _model_from_weights(weights)
    log.warning("no --weights given; running a randomly initialised model")
    return StreamingModel(_model_config(cfg, frames, tiny=False, seed=_opt(args, cfg, "seed", None)))


# subcommands


def cmd_synth(args, cfg) -> int:
    spec_path = _opt(args, cfg, "spec", None)
    fixture = _opt(args, cfg, "fixture", None)
    if bool(spec_path) == bool(fixture):
        raise UsageError("give exactly one of --spec or --fixture")
    if fixture:
        if fixture not in FIXTURES:
            raise UsageError(f"unknown fixture {fixture!r}; choose from {sorted(FIXTURES)}")
        spec = FIXTURES[fixture]()
    else:
        spec = synth.SceneSpec.from_json(json.loads(Path(spec_path).read_text()))
    frames = synth.generate(spec)
    out = pio.save_scene(args.out, spec, frames)
    print(f"wrote {len(frames)} frames ({spec.image_size[0]}x{spec.image_size[1]}) to {out}")
    return EXIT_OK


def cmd_reconstruct(args, cfg) -> int:
    frames = pio.load_scene(args.scene)[1]
    model = _build_model(args, cfg, frames)
    patch = model.cfg.patch if model is not None else int(cfg.get("patch", 8))
    sconf = _stream_config(args, cfg, patch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    every = int(_opt(args, cfg, "snapshot_every", 0))
    snapshots = []

    def on_frame(t, result):
        if every > 0 and (t + 1) % every == 0:
            name = f"snapshots/frame_{t:04d}"
            pio.save_snapshot(out / name, result.memory, t)
            snapshots.append(name)

    t0 = time.perf_counter()
    result = reconstruct_stream(frames, model, sconf, on_frame)
    elapsed = time.perf_counter() - t0
    files = pio.save_run_outputs(out, result.outputs)
    extra = {
        "format": "pointermem-run/1",
        "scene": str(args.scene),
        "frame_count": len(frames),
        "shape": list(frames[0].pixels.shape[:2]),
        "model": model.cfg.to_json() if model is not None else None,
        "weights": _opt(args, cfg, "weights", None),
        "outputs": files,
        "snapshots": snapshots,
    }
    if _opt(args, cfg, "export_ply", False):
        mem = result.memory
        located = ~mem.null
        pio.export_ply(out / "memory.ply", mem.positions[located],
                       np.linalg.norm(mem.features[located], axis=1))
        extra["ply"] = "memory.ply"
    pio.write_json(out / "manifest.json", result.manifest(extra))
    print(f"{len(frames)} frames, {len(result.memory)} pointers, {elapsed:.2f} s -> {out}")
    return EXIT_OK


def format_report(report: dict) -> str:
    lines = []
    for key in REPORT_KEYS:
        v = report.get(key)
        lines.append(f"{key:<12} {'n/a' if v is None else f'{v:.6g}'}")
    return "\n".join(lines)


def cmd_eval(args, cfg) -> int:
    run = Path(args.run)
    manifest = json.loads((run / "manifest.json").read_text())
    frames = pio.load_scene(args.scene)[1]
    outputs = pio.load_run_outputs(run, manifest["frame_count"], manifest["shape"])
    median_scaling = _opt(args, cfg, "median_scaling", True)
    report = evaluate(outputs, frames, median_scaling)
    path = Path(_opt(args, cfg, "report", None) or run / "report.json")
    pio.write_json(path, report)
    print(format_report(report))
    return EXIT_OK


def cmd_train_overfit(args, cfg) -> int:
    frames = pio.load_scene(args.scene)[1]
    steps = int(_opt(args, cfg, "steps", 500))
    lr = float(_opt(args, cfg, "lr", 1e-4))
    mcfg = _model_config(cfg, frames, tiny=True, seed=_opt(args, cfg, "seed", None))
    model = StreamingModel(mcfg)
    loss_cfg = LossConfig(alpha=float(_opt(args, cfg, "alpha", mcfg.alpha)),
                          metric_scale=bool(_opt(args, cfg, "metric_scale", False)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []

    def on_step(step, parts):
        rows.append((step, parts["total"], parts["conf"], parts["pose"]))
        if step % 50 == 0:
            log.info("step %d loss %.6g", step, parts["total"])

    try:
        curve = train_overfit(frames, model, steps, lr, loss_cfg, _opt(args, cfg, "fusion", True), on_step)
    finally:
        with open(out / "loss.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("step", "total", "conf", "pose"))
            w.writerows(rows)
    pio.save_checkpoint(out / "weights.f64", model.named_parameters(), mcfg.to_json())
    summary = {"steps": steps, "lr": lr, "model": mcfg.to_json(), "initial": curve[0], "final": curve[-1],
               "ratio": curve[-1] / curve[0]}
    figure = _opt(args, cfg, "figure", None)
    if figure:
        from .plotting import plot_loss_curve

        parts = {"conf": [r[2] for r in rows], "pose": [r[3] for r in rows]}
        summary["figure"] = str(plot_loss_curve(curve, figure, parts))
    pio.write_json(out / "train.json", summary)
    print(f"loss {curve[0]:.6g} -> {curve[-1]:.6g} (ratio {summary['ratio']:.3f}) in {steps} steps")
    return EXIT_OK


def bench(frames, model, sconf: StreamConfig, repeats: int) -> list[dict]:
    """Per-frame rows with the minimum time over ``repeats`` runs."""
    rows = None
    for _ in range(max(1, repeats)):
        result = reconstruct_stream(frames, model, sconf)
        current = [{"frame": r.frame, "pointers": r.pointers, "fused": r.fused, "appended": r.appended,
                    "ms": r.ms} for r in result.records]
        if rows is None:
            rows = current
            continue
        for a, b in zip(rows, current):
            if a["pointers"] != b["pointers"]:
                raise RuntimeError(f"pointer count differs between repeats at frame {a['frame']}")
            a["ms"] = min(a["ms"], b["ms"])
    return rows


def write_bench_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_HEADER)
        w.writeheader()
        for r in rows:
            w.writerow({**r, "ms": f"{r['ms']:.4f}"})


def cmd_fuse_bench(args, cfg) -> int:
    golden = _opt(args, cfg, "rope_golden", None)
    if golden:
        err = verify_golden(golden)
        print(f"rope golden max deviation {err:.3e}")
        if err > 1e-12:
            return EXIT_NUMERIC
    frames = _scene_frames(args, cfg)
    weights = _opt(args, cfg, "weights", None)
    model = _model_from_weights(weights) if weights else None
    patch = model.cfg.patch if model is not None else int(cfg.get("patch", 8))
    sconf = _stream_config(args, cfg, patch)
    sconf.oracle_frontend = model is None
    repeats = int(_opt(args, cfg, "repeats", 1))
    rows = bench(frames, model, sconf, repeats)
    write_bench_csv(args.out, rows)
    figure = _opt(args, cfg, "figure", None)
    if figure:
        from .plotting import plot_fuse_bench

        label = "fusion" if sconf.fusion else "no fusion"
        series = {label: rows}
        if _opt(args, cfg, "compare", False):
            other = StreamConfig(**{**sconf.__dict__, "fusion": not sconf.fusion})
            series["no fusion" if sconf.fusion else "fusion"] = bench(frames, model, other, repeats)
        plot_fuse_bench(series, figure)
    last = rows[-1]
    print(f"{len(rows)} frames, final pointers {last['pointers']}, "
          f"median ms {float(np.median([r['ms'] for r in rows])):.3f} -> {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pointermem", description="Streaming reconstruction with a spatial pointer memory.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help, description=help)
        sp.add_argument("--config", help="JSON config; flags override its keys")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("synth", cmd_synth, "render a synthetic scene to a directory")
    sp.add_argument("out", help="output scene directory")
    sp.add_argument("--spec", help="scene spec JSON")
    sp.add_argument("--fixture", help=f"named spec: {', '.join(FIXTURES)}")

    sp = add("reconstruct", cmd_reconstruct, "run the streaming reconstruction over a scene")
    sp.add_argument("scene", help="scene directory written by synth")
    sp.add_argument("out", help="run directory")
    sp.add_argument("--weights", help="checkpoint written by train-overfit")
    sp.add_argument("--oracle-frontend", dest="oracle_frontend", action="store_const", const=True,
                    help="use ground-truth geometry in place of the network")
    sp.add_argument("--noise-sigma", dest="noise_sigma", type=float, help="oracle point noise in meters")
    sp.add_argument("--no-fusion", dest="fusion", action="store_const", const=False,
                    help="append every new pointer")
    sp.add_argument("--snapshot-every", dest="snapshot_every", type=int, metavar="N",
                    help="write a memory snapshot every N frames")
    sp.add_argument("--export-ply", dest="export_ply", action="store_const", const=True,
                    help="write the final memory as memory.ply")
    sp.add_argument("--accelerator", choices=("brute", "grid"))
    sp.add_argument("--seed", type=int)

    sp = add("eval", cmd_eval, "score a run against its scene")
    sp.add_argument("run", help="run directory written by reconstruct")
    sp.add_argument("scene", help="ground-truth scene directory")
    sp.add_argument("--report", help="report path (default RUN/report.json)")
    sp.add_argument("--no-median-scaling", dest="median_scaling", action="store_const", const=False)

    sp = add("train-overfit", cmd_train_overfit, "overfit the tiny model on one short scene")
    sp.add_argument("scene", help="scene directory")
    sp.add_argument("out", help="output directory for loss.csv, weights and train.json")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--metric-scale", dest="metric_scale", action="store_const", const=True)
    sp.add_argument("--no-fusion", dest="fusion", action="store_const", const=False)
    sp.add_argument("--figure", help="also render the loss curve to this image")

    sp = add("fuse-bench", cmd_fuse_bench, "pointer count and per-frame time over a sequence")
    sp.add_argument("out", help="CSV path")
    sp.add_argument("--scene", help="scene directory")
    sp.add_argument("--fixture", help=f"named spec instead of a scene: {', '.join(FIXTURES)}")
    sp.add_argument("--weights", help="benchmark a trained model instead of the oracle frontend")
    sp.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    sp.add_argument("--no-fusion", dest="fusion", action="store_const", const=False)
    sp.add_argument("--accelerator", choices=("brute", "grid"))
    sp.add_argument("--repeats", type=int, help="keep the minimum time per frame over this many runs")
    sp.add_argument("--figure", help="also render pointer count and time to this image")
    sp.add_argument("--compare", action="store_const", const=True,
                    help="overlay the run with fusion toggled in the figure")
    sp.add_argument("--rope-golden", dest="rope_golden", help="verify rotation vectors first")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _load_config(args.config)
        return args.fn(args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"pointermem: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"pointermem: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError, StreamError, AlignmentError, PointerMemoryError, RuntimeError) as exc:
        print(f"pointermem: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
