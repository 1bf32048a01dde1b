"""On-disk formats.

Scenes: ``manifest.json`` plus per-frame little-endian float64 binaries
(``frame_XXXX_{pixels,self,global,depth}.f64``) and ``poses.json``.
Invalid pointmap pixels are written as NaN.

Memory snapshots: ``manifest.json`` plus ``positions.f64`` (N x 3, NaN for
null pointers) and ``features.f64`` (N x d_mem), row-major.

Run outputs: ``frame_XXXX_{self,global}.f64`` pointmaps (NaN for invalid
pixels), optional ``frame_XXXX_{self,global}_conf.f64`` and ``poses.json``.

Checkpoints: one flat float64 binary plus a JSON manifest listing each
named tensor's shape and offset.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import CameraPose, Pointmap
from .memory import SpatialPointerMemory
from .pipeline import FrameOutput
from .synth import Frame, SceneSpec

__all__ = [
    "write_f64",
    "read_f64",
    "save_scene",
    "load_scene",
    "save_snapshot",
    "load_snapshot",
    "export_ply",
    "read_ply",
    "save_run_outputs",
    "load_run_outputs",
    "save_checkpoint",
    "load_checkpoint",
    "write_json",
]

LE_F64 = np.dtype("<f8")


def write_f64(path, array) -> None:
    np.ascontiguousarray(array, dtype=LE_F64).tofile(path)


def read_f64(path, shape) -> np.ndarray:
    data = np.fromfile(path, dtype=LE_F64)
    expected = int(np.prod(shape))
    if data.size != expected:
        raise ValueError(f"{path}: expected {expected} float64 values, found {data.size}")
    return data.reshape(shape).astype(np.float64)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")


def _pm_to_array(pm: Pointmap) -> np.ndarray:
    return np.where(pm.valid[..., None], pm.points, np.nan)


def save_scene(directory, spec: SceneSpec | None, frames: list[Frame]) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    H, W = frames[0].depth.shape
    C = frames[0].pixels.shape[2]
    manifest = {
        "format": "pointermem-scene/1",
        "spec": spec.to_json() if spec is not None else None,
        "frame_count": len(frames),
        "shapes": {"pixels": [H, W, C], "pointmap": [H, W, 3], "depth": [H, W]},
        "dtype": "float64-le",
    }
    for fr in frames:
        stem = d / f"frame_{fr.index:04d}"
        write_f64(f"{stem}_pixels.f64", fr.pixels)
        write_f64(f"{stem}_self.f64", _pm_to_array(fr.gt_self))
        write_f64(f"{stem}_global.f64", _pm_to_array(fr.gt_global))
        write_f64(f"{stem}_depth.f64", np.where(fr.gt_self.valid, fr.depth, np.nan))
    write_json(d / "poses.json", [fr.gt_pose.to_json() for fr in frames])
    write_json(d / "manifest.json", manifest)
    return d


def load_scene(directory) -> tuple[SceneSpec | None, list[Frame]]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    shapes = manifest["shapes"]
    poses = json.loads((d / "poses.json").read_text())
    frames = []
    for i in range(manifest["frame_count"]):
        stem = d / f"frame_{i:04d}"
        pix = read_f64(f"{stem}_pixels.f64", shapes["pixels"])
        gs = Pointmap(read_f64(f"{stem}_self.f64", shapes["pointmap"]))
        gg = Pointmap(read_f64(f"{stem}_global.f64", shapes["pointmap"]))
        depth = np.nan_to_num(read_f64(f"{stem}_depth.f64", shapes["depth"]), nan=0.0)
        gs.points = np.nan_to_num(gs.points)
        gg.points = np.nan_to_num(gg.points)
        frames.append(Frame(i, pix, gs, gg, CameraPose.from_json(poses[i]), depth))
    spec = SceneSpec.from_json(manifest["spec"]) if manifest.get("spec") else None
    return spec, frames


def save_run_outputs(directory, outputs: list[FrameOutput]) -> list[str]:
    """Write per-frame predicted pointmaps and poses; returns the file names."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for t, out in enumerate(outputs):
        for tag, pm in (("self", out.self_pm), ("global", out.global_pm)):
            name = f"frame_{t:04d}_{tag}.f64"
            write_f64(d / name, _pm_to_array(pm))
            names.append(name)
            if pm.confidence is not None:
                name = f"frame_{t:04d}_{tag}_conf.f64"
                write_f64(d / name, pm.confidence)
                names.append(name)
    write_json(d / "poses.json", [o.pose.to_json() for o in outputs])
    names.append("poses.json")
    return names


def load_run_outputs(directory, frame_count: int, shape) -> list[FrameOutput]:
    """Read back what :func:`save_run_outputs` wrote.

    Raises:
        FileNotFoundError: a frame file is missing.
    """
    d = Path(directory)
    H, W = shape
    poses = json.loads((d / "poses.json").read_text())
    if len(poses) != frame_count:
        raise ValueError(f"run has {len(poses)} poses, expected {frame_count}")
    outputs = []
    for t in range(frame_count):
        pms = []
        for tag in ("self", "global"):
            pts = read_f64(d / f"frame_{t:04d}_{tag}.f64", (H, W, 3))
            valid = np.isfinite(pts).all(axis=2)
            conf_path = d / f"frame_{t:04d}_{tag}_conf.f64"
            conf = read_f64(conf_path, (H, W)) if conf_path.exists() else None
            pms.append(Pointmap(np.nan_to_num(pts), valid, conf))
        outputs.append(FrameOutput(pms[0], pms[1], CameraPose.from_json(poses[t])))
    return outputs


def save_snapshot(directory, mem: SpatialPointerMemory, frame_index: int) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_f64(d / "positions.f64", mem.positions)
    write_f64(d / "features.f64", mem.features)
    extent = None
    if mem.extent is not None:
        extent = {"min": mem.extent[0].tolist(), "max": mem.extent[1].tolist()}
    write_json(
        d / "manifest.json",
        {
            "format": "pointermem-memory/1",
            "frame_index": int(frame_index),
            "count": len(mem),
            "null_count": int(mem.null.sum()),
            "d_mem": mem.d_mem,
            "l": list(mem.l),
            "extent": extent,
            "first_frame_ingested": mem.first_frame_ingested,
            "last_update": mem.last_update.tolist(),
            "arrays": {"positions": [len(mem), 3], "features": [len(mem), mem.d_mem]},
            "dtype": "float64-le",
        },
    )
    return d


def load_snapshot(directory) -> tuple[SpatialPointerMemory, int]:
    d = Path(directory)
    m = json.loads((d / "manifest.json").read_text())
    mem = SpatialPointerMemory(m["d_mem"], m["l"])
    mem.positions = read_f64(d / "positions.f64", (m["count"], 3))
    mem.features = read_f64(d / "features.f64", (m["count"], m["d_mem"]))
    mem.last_update = np.asarray(m.get("last_update", [0] * m["count"]), dtype=np.int64)
    mem.first_frame_ingested = bool(m.get("first_frame_ingested", False))
    mem._refresh_extent()
    return mem, int(m["frame_index"])


def export_ply(path, positions, scalar=None, scalar_name: str = "feature_norm") -> None:
    """ASCII PLY with x y z and one float scalar per vertex."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if scalar is None:
        scalar = np.zeros(len(positions))
    scalar = np.asarray(scalar, dtype=np.float64).reshape(-1)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(positions)}",
        "property float x",
        "property float y",
        "property float z",
        f"property float {scalar_name}",
        "end_header",
    ]
    lines += [f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {s:.9g}" for p, s in zip(positions, scalar)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    text = Path(path).read_text().splitlines()
    end = text.index("end_header")
    n = next(int(l.split()[-1]) for l in text[:end] if l.startswith("element vertex"))
    rows = np.array([[float(v) for v in l.split()] for l in text[end + 1 : end + 1 + n]]).reshape(n, -1)
    return rows[:, :3], rows[:, 3]


def save_checkpoint(path, named_params, config: dict | None = None) -> None:
    """Write ``<path>`` (flat float64) and ``<path>.json`` (manifest)."""
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, t in named_params:
        arr = np.asarray(t.data if hasattr(t, "data") else t, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.reshape(-1))
        offset += arr.size
    flat = np.concatenate(chunks) if chunks else np.zeros(0)
    write_f64(path, flat)
    write_json(Path(str(path) + ".json"), {"format": "pointermem-weights/1", "total": offset,
                                           "config": config, "tensors": entries})


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict | None]:
    path = Path(path)
    manifest = json.loads(Path(str(path) + ".json").read_text())
    flat = read_f64(path, (manifest["total"],))
    out = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        out[e["name"]] = flat[e["offset"] : e["offset"] + n].reshape(e["shape"])
    return out, manifest.get("config")
