"""Command-line entry point: generate scenes, run reconstructions, report, serve."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from . import io as dio
from .pipeline import (
    default_config_text,
    difference_series,
    format_summary,
    load_config,
    read_metrics,
    rows_to_csv,
    run,
    summarize,
)
from .posefeed import FrameEnvelope
from .synth import EmptyScanError, Scene, SceneSpec

log = logging.getLogger("deformfusion")


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _scene_spec(args) -> SceneSpec:
    kv = dio.read_kv(args.scene) if args.scene else {}
    kv.update({k[6:]: v for k, v in _overrides(args.set).items() if k.startswith("scene.")})
    if args.seed is not None:
        kv["seed"] = str(args.seed)
    if getattr(args, "frames", None) is not None:
        kv["frames"] = str(args.frames)
    return SceneSpec.from_kv(kv)


def cmd_generate(args) -> int:
    spec = _scene_spec(args)
    scene = Scene(spec)
    out = Path(args.output)
    for i in range(spec.frames):
        frame = scene.render(i)
        dio.write_envelope(out, FrameEnvelope(frame.scan, frame.prior, frame.correspondences))
        log.info("wrote frame %d", i)
    (out / "scene.cfg").write_text(dio.format_kv(spec.to_kv()))
    print(f"wrote {spec.frames} frames to {out}")
    return 0


def cmd_run(args) -> int:
    overrides = _overrides(args.set)
    if args.input:
        overrides["input_dir"] = str(args.input)
    if args.scene:
        overrides.update({f"scene.{k}": v for k, v in dio.read_kv(args.scene).items()})
    if args.seed is not None:
        overrides["scene.seed"] = str(args.seed)
    if args.frames is not None:
        overrides["scene.frames"] = str(args.frames)
    if args.export_every is not None:
        overrides["export_every"] = str(args.export_every)
    if args.no_prior:
        overrides["use_prior"] = "false"
    if args.threaded:
        overrides["threaded"] = "true"
    overrides["output_dir"] = str(args.output)
    config = load_config(args.config, overrides)
    if config.scene is None and config.input_dir is None:
        raise ValueError("select an input: --scene FILE, --set scene.KEY=VALUE or --input DIR")

    def progress(res):
        m = res.metrics
        log.info(
            "frame %s %s residual=%s points=%s",
            res.frame,
            "skipped" if res.skipped else "->".join(res.stages),
            m.get("data_residual"),
            m.get("points"),
        )

    result = run(config, progress=progress)
    print(f"processed {len(result.metrics)} frames ({result.drops} dropped); outputs in {args.output}")
    return result.status


def cmd_report(args) -> int:
    rows = read_metrics(args.metrics)
    print(format_summary(summarize(rows), extra={"frames": len(rows)}), end="")
    diff = None
    if args.baseline:
        diff = difference_series(rows, read_metrics(args.baseline))
        text = rows_to_csv(diff)
        if args.output:
            Path(args.output).mkdir(parents=True, exist_ok=True)
            (Path(args.output) / "difference.csv").write_text(text)
        else:
            print(text, end="")
    if args.plot:
        _plot(rows, diff, Path(args.plot))
    return 0


def _plot(rows, diff, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    frames = [int(r["frame"]) for r in rows]
    if diff is not None:
        ax.plot([d["frame"] for d in diff], [d["distance"] for d in diff], label="camera position difference")
        ax.set_ylabel("mm")
    else:
        ax.plot(frames, [float(r["data_residual"] or 0) for r in rows], label="mean data residual")
        ax.set_ylabel("mm")
    ax.set_xlabel("frame")
    ax.legend()
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port, log_level="info" if args.verbose else "warning")
    return 0


def cmd_config(args) -> int:
    print(default_config_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deformfusion", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for stage-level logs")
    sub = p.add_subparsers(dest="command", required=True)

    def scene_args(sp):
        sp.add_argument("--scene", type=Path, help="scene spec (key = value file)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--frames", type=int)
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")

    g = sub.add_parser("generate", help="render a synthetic scene to the offline frame layout")
    scene_args(g)
    g.add_argument("-o", "--output", type=Path, required=True)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="reconstruct a synthetic scene or an offline frame directory")
    scene_args(r)
    r.add_argument("--input", type=Path, help="offline frame directory")
    r.add_argument("-c", "--config", type=Path, help="run config (key = value); shipped defaults apply underneath")
    r.add_argument("-o", "--output", type=Path, required=True)
    r.add_argument("--export-every", type=int, help="write model_NNNN.ply every N frames")
    r.add_argument("--no-prior", action="store_true", help="ignore pose priors (A/B baseline)")
    r.add_argument("--threaded", action="store_true", help="produce frames on a separate thread (latest-wins)")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="summarise a metrics CSV, optionally against a baseline")
    rep.add_argument("metrics", type=Path)
    rep.add_argument("--baseline", type=Path, help="second metrics CSV; emits a pose difference series")
    rep.add_argument("-o", "--output", type=Path, help="directory for difference.csv")
    rep.add_argument("--plot", type=Path, help="write a PNG plot")
    rep.set_defaults(func=cmd_report)

    s = sub.add_parser("serve", help="start the HTTP service")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8000)
    s.set_defaults(func=cmd_serve)

    c = sub.add_parser("config", help="print the shipped default configuration")
    c.set_defaults(func=cmd_config)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, EmptyScanError) as exc:
        print(f"deformfusion: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
