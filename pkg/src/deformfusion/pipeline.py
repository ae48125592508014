"""Per-frame reconstruction loop: prior -> solve -> register -> fuse -> filter -> regenerate nodes."""

from __future__ import annotations

import csv
import io as _io
import logging
import math
import threading
import time
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import io as dio
from .energy import TERMS, EnergyParams, FrameProblem, data_residual_stats, euler_zyx
from .fusion import FusionParams, PointModel, filter_points, fuse_frame, lift_scan, register_warped, warp_model
from .geometry import normals_from_depth
from .posefeed import FrameEnvelope, LatestFeed, apply_prior
from .solver import SolverConfig, solve
from .synth import GroundTruth, Scene, SceneSpec, evaluate
from .warpfield import build_node_graph, compute_skinning

log = logging.getLogger(__name__)

STAGES = ("prior", "visible", "solve", "register", "fuse", "filter", "nodes")

METRIC_COLUMNS = [
    "frame",
    "skipped",
    "prior_applied",
    "iterations",
    "termination",
    "energy_initial",
    "energy_final",
    "e_rot",
    "e_reg",
    "e_data",
    "e_corr",
    "e_r",
    "e_p",
    "visible",
    "data_residual",
    "registered",
    "spawned",
    "points",
    "nodes",
    "dropped",
    "yaw",
    "pitch",
    "roll",
    "tx",
    "ty",
    "tz",
    "cam_x",
    "cam_y",
    "cam_z",
    "pose_err_t",
    "pose_err_r",
    "mean_distance",
    "mean_residual",
]


ENERGY_COLUMNS = ["frame", "iteration", "accepted", "total"] + [f"e_{t}" for t in TERMS] + ["visible"]


@dataclass
class RunConfig:
    energy: EnergyParams = field(default_factory=EnergyParams)
    fusion: FusionParams = field(default_factory=FusionParams)
    solver: SolverConfig = field(default_factory=SolverConfig)
    neighbor_count: int = 4
    skin_k: int = 4
    use_prior: bool = True
    normal_smoothing: float = 0.0  # pixels
    discard_residual: float = math.inf  # mm; frames above this mean residual are not fused
    export_every: int = 0  # frames between PLY snapshots (0 = final only)
    scene: SceneSpec | None = None
    input_dir: Path | None = None
    output_dir: Path | None = None
    threaded: bool = False

    def validate(self) -> None:
        if (self.scene is None) == (self.input_dir is None):
            raise ValueError("exactly one input mode (scene or input_dir) must be set")
        if self.neighbor_count < 1 or self.skin_k < 1:
            raise ValueError("neighbor_count and skin_k must be >= 1")
        if self.export_every < 0:
            raise ValueError("export_every must be >= 0")

    # flat key = value form ---------------------------------------------------
    _SECTIONS = {"energy": EnergyParams, "fusion": FusionParams, "solver": SolverConfig}

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "RunConfig":
        parts = {name: {} for name in cls._SECTIONS}
        scene_kv, top = {}, {}
        owners = {f.name: sec for sec, typ in cls._SECTIONS.items() for f in fields(typ)}
        for key, raw in kv.items():
            if key.startswith("scene."):
                scene_kv[key[6:]] = raw
            elif key in owners:
                sec = owners[key]
                parts[sec][key] = _coerce(cls._SECTIONS[sec], key, raw)
            elif key in ("neighbor_count", "skin_k", "export_every"):
                top[key] = int(raw)
            elif key in ("normal_smoothing", "discard_residual"):
                top[key] = float(raw)
            elif key in ("use_prior", "threaded"):
                top[key] = raw.strip().lower() in ("1", "true", "yes", "on")
            elif key in ("input_dir", "output_dir"):
                top[key] = Path(raw) if raw else None
            else:
                raise ValueError(f"unknown config key {key!r}")
        cfg = cls(
            energy=EnergyParams(**parts["energy"]),
            fusion=FusionParams(**parts["fusion"]),
            solver=SolverConfig(**parts["solver"]),
            **top,
        )
        if scene_kv:
            cfg.scene = SceneSpec.from_kv(scene_kv)
        return cfg


def default_config_text() -> str:
    """The shipped example configuration with the default values."""
    return resources.files("deformfusion").joinpath("data/default.cfg").read_text()


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Shipped defaults, then the config file at ``path``, then ``overrides``."""
    kv = dio.parse_kv(default_config_text())
    if path is not None:
        kv.update(dio.read_kv(path))
    kv.update(overrides or {})
    return RunConfig.from_kv(kv)


def _coerce(typ, key, raw: str):
    ftype = str({f.name: f.type for f in fields(typ)}[key])
    return int(raw) if ftype == "int" else float(raw)


@dataclass
class FrameResult:
    frame: int
    metrics: dict
    energy_rows: list[dict]
    stages: list[str]
    timings: dict[str, float]
    skipped: bool = False


class Reconstructor:
    """Owns the point model and warp field; feed it one envelope at a time."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.model: PointModel | None = None
        self.field = None
        self.R = np.eye(3)
        self.T = np.zeros(3)
        self.frames_processed = 0

    # helpers ----------------------------------------------------------------
    def _prepare_scan(self, env: FrameEnvelope):
        scan = env.scan
        if self.config.normal_smoothing > 0:
            scan.normals = normals_from_depth(scan, self.config.normal_smoothing)
        return scan

    def _rebuild_nodes(self):
        f = self.config.fusion
        self.field = build_node_graph(
            self.model.positions, f.node_grid, self.config.neighbor_count, self.config.skin_k, R=self.R, T=self.T
        )

    def _initialise(self, env: FrameEnvelope, truth: GroundTruth | None) -> FrameResult:
        scan = self._prepare_scan(env)
        frame = env.frame_index
        applied = False
        if self.config.use_prior and env.prior is not None:
            self.R, self.T = env.prior.R.copy(), env.prior.T.copy()
            applied = True
        model = lift_scan(scan, self.R, self.T, frame)
        if len(model) == 0:
            raise ValueError(f"first frame {frame} has no valid pixels")
        self.model = filter_points(model, frame, self.config.fusion)
        self._rebuild_nodes()
        self.frames_processed += 1
        metrics = self._base_metrics(frame)
        metrics.update(prior_applied=int(applied), registered=0, spawned=len(model), termination="init")
        metrics.update(self._truth_metrics(truth))
        metrics.update(self._state_metrics())
        return FrameResult(frame, metrics, [], ["prior", "fuse", "filter", "nodes"], {})

    def _base_metrics(self, frame: int) -> dict:
        row = {c: "" for c in METRIC_COLUMNS}
        row.update(frame=frame, skipped=0, iterations=0, visible=0, data_residual=0.0)
        for t in ("rot", "reg", "data", "corr", "r", "p"):
            row[f"e_{t}"] = 0.0
        row.update(energy_initial=0.0, energy_final=0.0)
        return row

    def _state_metrics(self) -> dict:
        yaw, pitch, roll = np.degrees(euler_zyx(self.R))
        c = -self.R.T @ self.T
        return dict(
            points=len(self.model),
            nodes=self.field.m,
            yaw=yaw,
            pitch=pitch,
            roll=roll,
            tx=self.T[0],
            ty=self.T[1],
            tz=self.T[2],
            cam_x=c[0],
            cam_y=c[1],
            cam_z=c[2],
        )

    def _truth_metrics(self, truth: GroundTruth | None) -> dict:
        if truth is None:
            return {}
        rep = evaluate(self.model, truth, self.R, self.T)
        return dict(
            pose_err_t=rep.translation_error,
            pose_err_r=rep.rotation_error,
            mean_distance=rep.mean_distance,
            mean_residual=rep.mean_residual,
        )

    # main entry -------------------------------------------------------------
    def process(self, env: FrameEnvelope, truth: GroundTruth | None = None) -> FrameResult:
        if self.model is None:
            return self._initialise(env, truth)
        cfg = self.config
        frame = env.frame_index
        stages, timings = [], {}
        clock = time.perf_counter()

        def mark(stage):
            nonlocal clock
            now = time.perf_counter()
            timings[stage] = now - clock
            clock = now
            stages.append(stage)
            log.debug("frame %d stage %s", frame, stage)

        scan = self._prepare_scan(env)
        metrics = self._base_metrics(frame)

        # prior
        field = self.field.with_pose(self.R, self.T)
        applied = False
        prior = env.prior if cfg.use_prior else None
        field, applied = apply_prior(field, prior, frame)
        if not applied:
            prior = None
        metrics["prior_applied"] = int(applied)
        mark("prior")

        # problem set-up; correspondences arrive in previous/current camera coordinates
        skin = compute_skinning(self.model.positions, field)
        prev_cam, cur_cam = env.correspondence_arrays()
        corr_src = (prev_cam - self.T) @ self.R if len(prev_cam) else np.zeros((0, 3))
        corr_skin = compute_skinning(corr_src, field) if len(corr_src) else None
        problem = FrameProblem(
            self.model.positions, self.model.normals, skin, scan, corr_src, cur_cam, corr_skin, prior
        )
        mark("visible")

        energy_rows = []

        def on_iter(it, res, accepted):
            row = {"frame": frame, "iteration": it, "accepted": int(accepted), "total": res.total}
            row.update({f"e_{k}": v for k, v in res.energies.items()})
            row["visible"] = len(res.visibility) if res.visibility is not None else 0
            energy_rows.append(row)

        skipped = False
        try:
            field, report = solve(field, problem, cfg.energy, cfg.solver, on_iteration=on_iter)
        except ValueError as exc:
            log.warning("frame %d: solve failed (%s); frame skipped", frame, exc)
            report = None
            skipped = True
        mark("solve")

        if report is not None:
            res = report.final
            mean_r, n_vis = data_residual_stats(res)
            metrics.update(
                iterations=report.iterations,
                termination=report.termination,
                energy_initial=report.initial_energy,
                energy_final=report.final_energy,
                visible=n_vis,
                data_residual=mean_r if n_vis else 0.0,
            )
            metrics.update({f"e_{k}": v for k, v in res.energies.items()})
            if report.termination == "stalled":
                log.warning("frame %d: solver stalled; frame skipped", frame)
                skipped = True
            elif n_vis and mean_r > cfg.discard_residual:
                log.warning("frame %d: mean residual %.3f mm above threshold; frame skipped", frame, mean_r)
                skipped = True

        if skipped:
            # keep the model; carry the best pose estimate forward
            self.R, self.T = field.R.copy(), field.T.copy()
            self._rebuild_nodes()
            metrics["skipped"] = 1
            metrics.update(self._state_metrics())
            metrics.update(self._truth_metrics(truth))
            self.frames_processed += 1
            return FrameResult(frame, metrics, energy_rows, stages, timings, skipped=True)

        warped = warp_model(self.model, field, skin)
        reg = register_warped(warped[0], warped[1], scan, cfg.fusion)
        mark("register")
        fused, stats = fuse_frame(self.model, field, scan, reg, cfg.fusion, frame, skin=skin, warped=warped)
        metrics.update(registered=stats.registered, spawned=stats.spawned)
        mark("fuse")
        self.model = filter_points(fused, frame, cfg.fusion)
        mark("filter")
        self.R, self.T = field.R.copy(), field.T.copy()
        self._rebuild_nodes()
        mark("nodes")
        self.frames_processed += 1

        metrics.update(self._state_metrics())
        metrics.update(self._truth_metrics(truth))
        return FrameResult(frame, metrics, energy_rows, stages, timings)


# --------------------------------------------------------------------------- frame sources


class SyntheticSource:
    def __init__(self, spec: SceneSpec):
        self.spec = spec
        self.scene = Scene(spec)
        self._truth: dict[int, GroundTruth] = {}

    def __len__(self) -> int:
        return self.spec.frames

    def envelope(self, i: int) -> FrameEnvelope:
        fr = self.scene.render(i)
        self._truth[i] = fr.truth
        return FrameEnvelope(fr.scan, fr.prior, fr.correspondences)

    def truth(self, i: int) -> GroundTruth | None:
        return self._truth.pop(i, None)


class OfflineSource:
    def __init__(self, directory, normal_smoothing: float = 0.0):
        self.directory = Path(directory)
        if not (self.directory / "intrinsics.cfg").exists():
            raise FileNotFoundError(f"{self.directory}: missing intrinsics.cfg")
        self.indices = dio.list_frames(self.directory)
        if not self.indices:
            raise FileNotFoundError(f"{self.directory}: no frames found")
        self.normal_smoothing = normal_smoothing

    def __len__(self) -> int:
        return len(self.indices)

    def envelope(self, i: int) -> FrameEnvelope:
        return dio.read_envelope(self.directory, self.indices[i], self.normal_smoothing)

    def truth(self, i: int):
        return None


# --------------------------------------------------------------------------- run


@dataclass
class RunResult:
    status: int
    metrics: list[dict]
    energy_rows: list[dict]
    drops: int
    model: PointModel | None
    outputs: dict[str, Path] = field(default_factory=dict)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def rows_to_csv(rows: list[dict], columns: list[str] | None = None) -> str:
    if columns is None:
        if not rows:
            return ""
        columns = list(rows[0].keys())
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def run(config: RunConfig, progress=None) -> RunResult:
    """Reconstruct a whole sequence; writes artefacts when ``output_dir`` is set."""
    config.validate()
    source = SyntheticSource(config.scene) if config.scene is not None else OfflineSource(config.input_dir)
    rec = Reconstructor(config)
    feed = LatestFeed()
    out = Path(config.output_dir) if config.output_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    metrics, energy_rows, timing_rows = [], [], []
    outputs = {}

    def consume(env):
        truth = source.truth(env.frame_index) if isinstance(source, SyntheticSource) else None
        res = rec.process(env, truth)
        res.metrics["dropped"] = feed.dropped
        metrics.append(res.metrics)
        energy_rows.extend(res.energy_rows)
        timing_rows.append({"frame": res.frame, **{s: res.timings.get(s, 0.0) for s in STAGES}})
        log.info(
            "frame %d: stages %s, %d points, residual %.4f mm%s",
            res.frame,
            "->".join(res.stages),
            res.metrics["points"],
            float(res.metrics["data_residual"] or 0.0),
            " (skipped)" if res.skipped else "",
        )
        if out and config.export_every and rec.frames_processed % config.export_every == 0:
            p = out / f"model_{res.frame:04d}.ply"
            dio.write_ply(p, rec.model)
        if progress is not None:
            progress(res)

    if config.threaded:
        done = threading.Event()

        def produce():
            for i in range(len(source)):
                env = source.envelope(i)
                feed.submit(env)
            done.set()

        t = threading.Thread(target=produce, daemon=True)
        t.start()
        while not (done.is_set() and feed.pending == 0):
            env = feed.take_latest()
            if env is None:
                time.sleep(0.001)
                continue
            consume(env)
        t.join()
    else:
        for i in range(len(source)):
            feed.submit(source.envelope(i))
            consume(feed.take_latest())

    if out:
        (out / "metrics.csv").write_text(rows_to_csv(metrics, METRIC_COLUMNS))
        outputs["metrics"] = out / "metrics.csv"
        (out / "energy.csv").write_text(rows_to_csv(energy_rows, ENERGY_COLUMNS))
        outputs["energy"] = out / "energy.csv"
        (out / "timings.csv").write_text(rows_to_csv(timing_rows))
        final = out / "model_final.ply"
        dio.write_ply(final, rec.model)
        outputs["model"] = final
        summary = summarize(metrics)
        (out / "summary.txt").write_text(format_summary(summary, extra={"frames": len(metrics), "drops": feed.dropped}))
        outputs["summary"] = out / "summary.txt"
    return RunResult(0, metrics, energy_rows, feed.dropped, rec.model, outputs)


# --------------------------------------------------------------------------- reporting


def _numeric_columns(rows: list[dict]) -> list[str]:
    cols = []
    for c in rows[0].keys():
        try:
            [float(r[c]) for r in rows if r[c] != ""]
        except (TypeError, ValueError):
            continue
        if any(r[c] != "" for r in rows) and c != "frame":
            cols.append(c)
    return cols


def summarize(rows: list[dict]) -> dict[str, dict[str, float]]:
    """Mean and max of every numeric metric column."""
    if not rows:
        raise ValueError("no metric rows to summarise")
    out = {}
    for c in _numeric_columns(rows):
        vals = np.array([float(r[c]) for r in rows if r[c] != ""])
        out[c] = {"mean": float(vals.mean()), "max": float(vals.max())}
    return out


def format_summary(summary: dict, extra: dict | None = None) -> str:
    lines = []
    for k, v in (extra or {}).items():
        lines.append(f"{k}: {v}")
    width = max((len(c) for c in summary), default=6)
    lines.append(f"{'metric':<{width}}  {'mean':>14}  {'max':>14}")
    for c, s in summary.items():
        lines.append(f"{c:<{width}}  {s['mean']:>14.6g}  {s['max']:>14.6g}")
    return "\n".join(lines) + "\n"


def parse_metrics(text: str, source: str = "metrics") -> list[dict]:
    rows = list(csv.DictReader(_io.StringIO(text)))
    if not rows:
        raise ValueError(f"{source}: empty metrics file")
    return rows


def read_metrics(path) -> list[dict]:
    return parse_metrics(Path(path).read_text(), str(path))


def difference_series(a: list[dict], b: list[dict], columns=("cam_x", "cam_y", "cam_z")) -> list[dict]:
    """Per-frame pose difference between two runs (e.g. prior on vs off), matched on frame."""
    bmap = {int(r["frame"]): r for r in b}
    out = []
    for r in a:
        f = int(r["frame"])
        if f not in bmap:
            continue
        row = {"frame": f}
        diffs = []
        for c in columns:
            d = float(r[c]) - float(bmap[f][c])
            row[f"d_{c}"] = d
            diffs.append(d)
        row["distance"] = float(np.linalg.norm(diffs))
        out.append(row)
    return out
