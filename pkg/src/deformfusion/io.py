"""File formats: depth/colour rasters, key=value configs, PLY models and the offline frame layout.

Offline directory layout::

    intrinsics.cfg
    frame_000000.depth      raw little-endian float32 depth (mm)
    frame_000000.depth.hdr  "width W\\nheight H\\ndtype float32\\n"
    frame_000000.ppm        colour (P6, 8-bit)
    frame_000000.pose       12 numbers: rotation row-major then translation
    frame_000000.corr       "id px py pz cx cy cz" per line
    frame_000000.pgm        optional 16-bit depth in whole mm (read if .depth is absent)
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .fusion import PointModel
from .geometry import CameraIntrinsics, DepthScan
from .posefeed import FeatureCorrespondence, FrameEnvelope, PosePrior


class FormatError(ValueError):
    pass


# --------------------------------------------------------------------------- key=value


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text())


def format_kv(values: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())


def read_intrinsics(path) -> CameraIntrinsics:
    kv = read_kv(path)
    try:
        return CameraIntrinsics(
            fx=float(kv["fx"]),
            fy=float(kv["fy"]),
            cx=float(kv["cx"]),
            cy=float(kv["cy"]),
            width=int(kv["width"]),
            height=int(kv["height"]),
        )
    except KeyError as exc:
        raise FormatError(f"{path}: missing intrinsics key {exc}") from None


def write_intrinsics(path, intr: CameraIntrinsics) -> None:
    Path(path).write_text(
        format_kv(
            {"fx": repr(intr.fx), "fy": repr(intr.fy), "cx": repr(intr.cx), "cy": repr(intr.cy), "width": intr.width, "height": intr.height}
        )
    )


# --------------------------------------------------------------------------- netpbm


def _read_pnm(path, magic: bytes):
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(data, pos)
        if m is None:
            raise FormatError(f"{path}: truncated header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} header, got {tokens[0]!r}")
    width, height, maxval = (int(t) for t in tokens[1:])
    pos += 1  # single whitespace after maxval
    return data[pos:], width, height, maxval


def write_pgm16(path, depth_mm: np.ndarray) -> None:
    """16-bit PGM of depth rounded to whole millimetres (0 = invalid)."""
    d = np.clip(np.rint(np.nan_to_num(depth_mm, nan=0.0)), 0, 65535).astype(">u2")
    h, w = d.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + d.tobytes())


def read_pgm(path) -> np.ndarray:
    body, w, h, maxval = _read_pnm(path, b"P5")
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(body, dtype=dtype, count=w * h).reshape(h, w).astype(np.float64)


def write_ppm(path, color: np.ndarray) -> None:
    c = np.clip(np.rint(color), 0, 255).astype(np.uint8)
    h, w, _ = c.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + c.tobytes())


def read_ppm(path) -> np.ndarray:
    body, w, h, maxval = _read_pnm(path, b"P6")
    if maxval > 255:
        raise FormatError(f"{path}: only 8-bit PPM is supported")
    return np.frombuffer(body, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3).astype(np.float64)


# --------------------------------------------------------------------------- raw float rasters


def write_raw_depth(path, depth: np.ndarray) -> None:
    path = Path(path)
    h, w = depth.shape
    path.write_bytes(np.asarray(depth, dtype="<f4").tobytes())
    Path(str(path) + ".hdr").write_text(format_kv({"width": w, "height": h, "dtype": "float32"}))


def read_raw_depth(path) -> np.ndarray:
    path = Path(path)
    hdr = read_kv(str(path) + ".hdr")
    if hdr.get("dtype", "float32") != "float32":
        raise FormatError(f"{path}: unsupported dtype {hdr['dtype']}")
    w, h = int(hdr["width"]), int(hdr["height"])
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    if data.size != w * h:
        raise FormatError(f"{path}: expected {w * h} samples, found {data.size}")
    return data.reshape(h, w).astype(np.float64)


# --------------------------------------------------------------------------- pose / correspondences


def write_pose(path, prior: PosePrior) -> None:
    vals = np.concatenate([prior.R.ravel(), prior.T])
    Path(path).write_text(" ".join(repr(float(x)) for x in vals) + "\n")


def read_pose(path, frame_index: int = 0) -> PosePrior:
    vals = np.array(Path(path).read_text().split(), dtype=np.float64)
    if vals.size != 12:
        raise FormatError(f"{path}: expected 12 numbers, found {vals.size}")
    return PosePrior(vals[:9].reshape(3, 3), vals[9:], frame_index)


def write_correspondences(path, corrs) -> None:
    lines = []
    for c in corrs:
        vals = " ".join(repr(float(x)) for x in np.concatenate([c.previous, c.current]))
        lines.append(f"{c.feature_id} {vals}")
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_correspondences(path) -> list[FeatureCorrespondence]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if len(parts) != 7:
            raise FormatError(f"{path}:{lineno}: expected 7 fields")
        vals = np.array(parts[1:], dtype=np.float64)
        out.append(FeatureCorrespondence(vals[:3], vals[3:], int(parts[0])))
    return out


# --------------------------------------------------------------------------- offline directory


def frame_stem(index: int) -> str:
    return f"frame_{index:06d}"


def write_envelope(directory, envelope: FrameEnvelope) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    intr_path = directory / "intrinsics.cfg"
    if not intr_path.exists():
        write_intrinsics(intr_path, envelope.scan.intrinsics)
    stem = directory / frame_stem(envelope.frame_index)
    write_raw_depth(str(stem) + ".depth", envelope.scan.depth)
    write_ppm(str(stem) + ".ppm", envelope.scan.color)
    if envelope.prior is not None:
        write_pose(str(stem) + ".pose", envelope.prior)
    write_correspondences(str(stem) + ".corr", envelope.correspondences)


def list_frames(directory) -> list[int]:
    directory = Path(directory)
    idx = set()
    for p in directory.iterdir():
        m = re.fullmatch(r"frame_(\d+)\.(depth|pgm)", p.name)
        if m:
            idx.add(int(m.group(1)))
    return sorted(idx)


def read_envelope(directory, index: int, normal_smoothing: float = 0.0) -> FrameEnvelope:
    from .geometry import normals_from_depth

    directory = Path(directory)
    intr = read_intrinsics(directory / "intrinsics.cfg")
    stem = directory / frame_stem(index)
    raw = Path(str(stem) + ".depth")
    if raw.exists():
        depth = read_raw_depth(raw)
    elif Path(str(stem) + ".pgm").exists():
        depth = read_pgm(str(stem) + ".pgm")
    else:
        raise FormatError(f"no depth raster for frame {index} in {directory}")
    color_path = Path(str(stem) + ".ppm")
    color = read_ppm(color_path) if color_path.exists() else None
    scan = DepthScan(depth, intr, color=color, normals=np.zeros(depth.shape + (3,)), frame_index=index)
    scan.normals = normals_from_depth(scan, normal_smoothing)
    pose_path = Path(str(stem) + ".pose")
    prior = read_pose(pose_path, index) if pose_path.exists() else None
    corr_path = Path(str(stem) + ".corr")
    corrs = read_correspondences(corr_path) if corr_path.exists() else []
    return FrameEnvelope(scan, prior, corrs)


# --------------------------------------------------------------------------- PLY

PLY_PROPS = ("x", "y", "z", "nx", "ny", "nz", "red", "green", "blue", "weight", "stamp", "stable")


def format_ply(model: PointModel) -> str:
    n = len(model)
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
        "property float nx",
        "property float ny",
        "property float nz",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "property float weight",
        "property int stamp",
        "property uchar stable",
        "end_header",
    ]
    col = np.clip(np.rint(model.colors), 0, 255).astype(int)
    lines = []
    for i in range(n):
        p, nr = model.positions[i], model.normals[i]
        lines.append(
            f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {nr[0]:.6f} {nr[1]:.6f} {nr[2]:.6f} "
            f"{col[i, 0]} {col[i, 1]} {col[i, 2]} {model.weights[i]:.6f} {model.stamps[i]} {int(model.stable[i])}"
        )
    return "\n".join(header + lines) + "\n"


def write_ply(path, model: PointModel) -> None:
    Path(path).write_text(format_ply(model))


def parse_ply(text: str) -> PointModel:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError("not a PLY file")
    n = None
    props = []
    i = 1
    while i < len(lines):
        parts = lines[i].split()
        i += 1
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise FormatError("only ASCII PLY is supported")
        if parts[0] == "element" and parts[1] == "vertex":
            n = int(parts[2])
        elif parts[0] == "element":
            n_other = int(parts[2])
            if n_other:
                raise FormatError("only vertex elements are supported")
        elif parts[0] == "property" and n is not None:
            props.append(parts[-1])
        elif parts[0] == "end_header":
            break
    if n is None:
        raise FormatError("missing vertex element")
    data = np.array([ln.split() for ln in lines[i : i + n]], dtype=np.float64).reshape(n, len(props))
    col = {name: data[:, j] for j, name in enumerate(props)}

    def get(name, default):
        return col[name] if name in col else np.full(n, default, dtype=np.float64)

    pos = np.stack([get("x", 0.0), get("y", 0.0), get("z", 0.0)], axis=1)
    nrm = np.stack([get("nx", 0.0), get("ny", 0.0), get("nz", 0.0)], axis=1)
    rgb = np.stack([get("red", 0.0), get("green", 0.0), get("blue", 0.0)], axis=1)
    return PointModel(pos, nrm, rgb, get("weight", 1.0), get("stamp", 0).astype(np.int64), get("stable", 0) > 0)


def read_ply(path) -> PointModel:
    return parse_ply(Path(path).read_text())


def read_surface_points(path) -> np.ndarray:
    """Vertex positions of an ASCII PLY mesh (faces ignored)."""
    lines = Path(path).read_text().splitlines()
    n_vert, props, i = None, [], 1
    current = None
    while i < len(lines):
        parts = lines[i].split()
        i += 1
        if not parts:
            continue
        if parts[0] == "element":
            current = parts[1]
            if current == "vertex":
                n_vert = int(parts[2])
        elif parts[0] == "property" and current == "vertex":
            props.append(parts[-1])
        elif parts[0] == "end_header":
            break
    if n_vert is None:
        raise FormatError(f"{path}: missing vertex element")
    data = np.array([ln.split()[: len(props)] for ln in lines[i : i + n_vert]], dtype=np.float64)
    return data[:, [props.index("x"), props.index("y"), props.index("z")]]
