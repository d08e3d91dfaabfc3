"""On-disk formats: trajectory binaries, CSV export, split manifests, atomic writes."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .dynamics import DatasetSplit, SystemSpec, Trajectory

TRAJ_MAGIC = b"WPTR"
TRAJ_VERSION = 1
MANIFEST_VERSION = 1


class FormatError(ValueError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps_json(obj) -> str:
    """Canonical JSON: sorted keys, NaN/inf mapped to null, fixed float repr."""
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if np.isfinite(x) else None
    return obj


# --------------------------------------------------------------------------
# trajectories


def _fields(traj: Trajectory) -> list[tuple[str, int]]:
    d = traj.spec.obs_dim
    out = [("position", d), ("velocity", d)]
    out += [(name, int(np.asarray(series).reshape(len(series), -1).shape[1]))
            for name, series in sorted(traj.targets.items())]
    return out


def trajectory_bytes(traj: Trajectory) -> bytes:
    """Binary layout: magic, u16 version, u32 header length, JSON header, f8 LE records."""
    fields = _fields(traj)
    header = {
        "system_kind": traj.spec.system_kind,
        "dt": traj.spec.dt,
        "steps": traj.spec.steps,
        "fields": [{"name": n, "width": w} for n, w in fields],
        "spec": asdict(traj.spec),
        "params": traj.params,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    cols = [traj.full_states]
    cols += [np.asarray(traj.targets[n]).reshape(traj.spec.steps, -1) for n, _ in fields[2:]]
    body = np.ascontiguousarray(np.hstack(cols), dtype="<f8").tobytes()
    return TRAJ_MAGIC + struct.pack("<HI", TRAJ_VERSION, len(hbytes)) + hbytes + body


def trajectory_from_bytes(data: bytes) -> Trajectory:
    if data[:4] != TRAJ_MAGIC:
        raise FormatError("not a trajectory file")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != TRAJ_VERSION:
        raise FormatError(f"unsupported trajectory version {version}")
    start = 4 + struct.calcsize("<HI")
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    spec = SystemSpec(**header["spec"])
    widths = [f["width"] for f in header["fields"]]
    total = sum(widths)
    body = np.frombuffer(data, dtype="<f8", offset=start + hlen)
    if body.size != spec.steps * total:
        raise FormatError("record block size does not match header")
    table = body.reshape(spec.steps, total).astype(np.float64)
    d = spec.obs_dim
    states = table[:, : 2 * d].copy()
    targets, col = {}, 2 * d
    for f in header["fields"][2:]:
        targets[f["name"]] = table[:, col:col + f["width"]].copy()
        col += f["width"]
    return Trajectory(spec, states[:, :d].copy(), states, targets, header["params"])


def save_trajectory(traj: Trajectory, path) -> None:
    atomic_write_bytes(path, trajectory_bytes(traj))


def load_trajectory(path) -> Trajectory:
    return trajectory_from_bytes(Path(path).read_bytes())


def trajectory_csv(traj: Trajectory) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    fields = _fields(traj)
    names = ["step", "time"]
    for name, width in fields:
        names += [name] if width == 1 else [f"{name}_{i}" for i in range(width)]
    writer.writerow(names)
    cols = [traj.full_states] + [np.asarray(traj.targets[n]).reshape(traj.spec.steps, -1) for n, _ in fields[2:]]
    table = np.hstack(cols)
    for i, row in enumerate(table):
        writer.writerow([i, repr(float(traj.times[i]))] + [repr(float(v)) for v in row])
    return buf.getvalue()


# --------------------------------------------------------------------------
# split manifests


def save_split(split: DatasetSplit, directory) -> Path:
    """Write every trajectory plus ``manifest.json``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, traj in enumerate(split.trajectories):
        name = f"traj_{i:05d}.wptr"
        save_trajectory(traj, directory / name)
        files.append(name)
    manifest = {
        "version": MANIFEST_VERSION,
        "role": split.role,
        "system_kind": split.system_kind,
        "seed": split.seed,
        "generator_ranges": {k: list(v) for k, v in split.generator_ranges.items()},
        "files": files,
    }
    path = directory / "manifest.json"
    atomic_write_text(path, json.dumps(manifest, sort_keys=True, indent=2))
    return path


def load_split(directory) -> DatasetSplit:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise FormatError("unsupported manifest version")
    trajs = [load_trajectory(directory / f) for f in manifest["files"]]
    ranges = {k: tuple(v) for k, v in manifest["generator_ranges"].items()}
    return DatasetSplit(manifest["role"], trajs, ranges, manifest["system_kind"], manifest["seed"])
