"""Plain-text and image interchange formats.

* point clouds: first line ``N``, then ``x y z`` per line (mm)
* transforms: one line of 12 numbers (row-major rotation, then translation)
* keypoint pairs: ``name sx sy sz tx ty tz`` per line
* frame sequences: ``frame_%05d.pgm`` (8-bit binary graymap) + ``frame_%05d.pose``
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import RigidTransform


class CloudFormatError(ValueError):
    pass


def write_cloud(path, points):
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    with open(path, "w") as fh:
        fh.write(f"{len(points)}\n")
        for x, y, z in points.tolist():
            fh.write(f"{x!r} {y!r} {z!r}\n")


def read_cloud(path):
    path = Path(path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise CloudFormatError(f"{path}:1: empty file, expected point count")
    try:
        n = int(lines[0].strip())
    except ValueError:
        raise CloudFormatError(f"{path}:1: header must be an integer point count") from None
    if n < 0:
        raise CloudFormatError(f"{path}:1: negative point count")
    body = lines[1:]
    pts = np.empty((n, 3))
    row = 0
    for lineno, line in enumerate(body, start=2):
        if not line.strip():
            continue
        if row >= n:
            raise CloudFormatError(f"{path}:{lineno}: more points than the header's {n}")
        parts = line.split()
        if len(parts) != 3:
            raise CloudFormatError(f"{path}:{lineno}: expected 3 coordinates, got {len(parts)}")
        try:
            pts[row] = [float(v) for v in parts]
        except ValueError:
            raise CloudFormatError(f"{path}:{lineno}: non-numeric coordinate") from None
        if not np.all(np.isfinite(pts[row])):
            raise CloudFormatError(f"{path}:{lineno}: non-finite coordinate")
        row += 1
    if row != n:
        raise CloudFormatError(f"{path}:{len(lines) + 1}: header promises {n} points, found {row}")
    return pts


def write_transform(path, t):
    with open(path, "w") as fh:
        fh.write(t.to_line() + "\n")


def read_transform(path):
    with open(path) as fh:
        for line in fh:
            if line.strip() and not line.lstrip().startswith("#"):
                return RigidTransform.from_line(line)
    raise ValueError(f"{path}: no transform line found")


def write_keypoints(path, source, target):
    with open(path, "w") as fh:
        for name in source:
            s, t = source[name], target[name]
            fh.write(" ".join([name] + [repr(float(v)) for v in (*s, *t)]) + "\n")


def read_keypoints(path):
    """Return ``(source, target)`` dictionaries of keypoint name -> 3-vector."""
    source, target = {}, {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 7:
                raise CloudFormatError(f"{path}:{lineno}: expected 'name sx sy sz tx ty tz'")
            vals = np.array([float(v) for v in parts[1:]])
            source[parts[0]] = vals[:3]
            target[parts[0]] = vals[3:]
    return source, target


def write_pgm(path, pixels):
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(path, format="PPM")


def read_pgm(path):
    with Image.open(path) as im:
        return np.array(im.convert("L"), dtype=np.uint8)


def write_frame_sequence(directory, frames):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k, frame in enumerate(frames):
        stem = directory / f"frame_{k:05d}"
        write_pgm(stem.with_suffix(".pgm"), frame.pixels)
        write_transform(stem.with_suffix(".pose"), frame.probe_pose)


def iter_frame_sequence(directory):
    """Yield ``(index, pixels, pose)`` for each ``frame_%05d`` pair, in order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"frame directory not found: {directory}")
    stems = sorted(p.stem for p in directory.glob("frame_*.pgm"))
    for stem in stems:
        idx = int(stem.split("_")[1])
        pose_path = directory / f"{stem}.pose"
        if not pose_path.exists():
            raise FileNotFoundError(f"missing pose sidecar {pose_path}")
        yield idx, read_pgm(directory / f"{stem}.pgm"), read_transform(pose_path)


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return Path(path)
