"""CSV dataset format.

One directory holds ``imu.csv``, ``features.csv``, ``ranges.csv``,
``priors.csv``, ``groundtruth.csv``, ``anchors.csv``, ``landmarks.csv`` and
``calib.txt``. Files are comma separated with a header row; ``#`` lines are
comments. Quaternions are Hamilton ``(qw, qx, qy, qz)``, world-from-body.
Floats are written with 17 significant digits so a save/load round trip is
exact.
"""
from __future__ import annotations

import csv
import io
import os
import tempfile
from pathlib import Path

import numpy as np

from ..errors import ParseError
from ..geometry import Pose, quat_to_rot, rot_to_quat
from ..sim import Anchor, Calibration, Camera, Dataset, FeatureStream, ImuStream, PoseStream, RangeStream

HEADERS = {
    "imu.csv": ["t", "wx", "wy", "wz", "ax", "ay", "az"],
    "ranges.csv": ["t", "anchor_id", "range", "is_outlier_truth"],
    "features.csv": ["t", "landmark_id", "u", "v"],
    "anchors.csv": ["anchor_id", "x", "y", "z", "kind", "sigma"],
    "priors.csv": ["t", "qw", "qx", "qy", "qz", "px", "py", "pz"],
    "groundtruth.csv": ["t", "qw", "qx", "qy", "qz", "px", "py", "pz"],
    "landmarks.csv": ["landmark_id", "x", "y", "z"],
}
CALIB_FILE = "calib.txt"
CALIB_KEYS = ["qw", "qx", "qy", "qz", "tx", "ty", "tz", "fx", "fy", "cx", "cy", "width", "height"]
FLOAT_FMT = "%.17g"


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt_rows(header, columns, kinds) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    if len(columns) and len(columns[0]):
        cols = [np.asarray(c) for c in columns]
        n = len(cols[0])
        parts = []
        for c, k in zip(cols, kinds):
            if k == "f":
                parts.append(np.char.mod(FLOAT_FMT, c.astype(float)))
            elif k == "i":
                parts.append(c.astype(np.int64).astype(str))
            else:
                parts.append(c.astype(str))
        rows = parts[0]
        for p in parts[1:]:
            rows = np.char.add(np.char.add(rows, ","), p)
        buf.write("\n".join(rows.tolist()))
        buf.write("\n")
        assert len(rows) == n
    return buf.getvalue()


def _pose_columns(ps: PoseStream):
    q = np.array([rot_to_quat(R) for R in ps.rotation]).reshape(-1, 4)
    return [ps.t, q[:, 0], q[:, 1], q[:, 2], q[:, 3], ps.position[:, 0], ps.position[:, 1], ps.position[:, 2]]


def save_trajectory_csv(path, ps: PoseStream) -> None:
    atomic_write_text(path, _fmt_rows(HEADERS["priors.csv"], _pose_columns(ps), "f" * 8))


def save_calibration(path, calib: Calibration) -> None:
    q = rot_to_quat(calib.T_IC.rotation)
    t = calib.T_IC.translation
    c = calib.camera
    vals = [*q, *t, c.fx, c.fy, c.cx, c.cy, c.width, c.height]
    lines = ["# T_IC (body from camera) and pinhole intrinsics"]
    for k, v in zip(CALIB_KEYS, vals):
        lines.append(f"{k}={int(v)}" if k in ("width", "height") else f"{k}={FLOAT_FMT % v}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def save_anchors(path, anchors: dict) -> None:
    ids = sorted(anchors)
    A = [anchors[i] for i in ids]
    atomic_write_text(path, _fmt_rows(HEADERS["anchors.csv"],
                      [ids, [a.position[0] for a in A], [a.position[1] for a in A], [a.position[2] for a in A],
                       [a.kind for a in A], [a.sigma for a in A]], "ifffsf"))


def save_dataset(ds: Dataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    imu = ds.imu
    atomic_write_text(d / "imu.csv", _fmt_rows(HEADERS["imu.csv"],
                      [imu.t, *imu.gyro.T, *imu.accel.T], "f" * 7))
    f = ds.features
    atomic_write_text(d / "features.csv", _fmt_rows(HEADERS["features.csv"],
                      [f.t, f.landmark_id, f.uv[:, 0], f.uv[:, 1]], "fiff"))
    r = ds.ranges
    atomic_write_text(d / "ranges.csv", _fmt_rows(HEADERS["ranges.csv"],
                      [r.t, r.anchor_id, r.range, r.is_outlier_truth.astype(int)], "fifi"))
    atomic_write_text(d / "priors.csv", _fmt_rows(HEADERS["priors.csv"], _pose_columns(ds.priors), "f" * 8))
    atomic_write_text(d / "groundtruth.csv", _fmt_rows(HEADERS["groundtruth.csv"], _pose_columns(ds.ground_truth), "f" * 8))
    save_anchors(d / "anchors.csv", ds.anchors)
    lids = sorted(ds.landmarks)
    L = np.array([ds.landmarks[i] for i in lids]).reshape(-1, 3)
    atomic_write_text(d / "landmarks.csv", _fmt_rows(HEADERS["landmarks.csv"], [lids, *L.T], "ifff"))
    save_calibration(d / CALIB_FILE, ds.calibration)


def _data_lines(path: Path):
    """(line number, stripped text) for non-comment, non-blank lines."""
    if not path.is_file():
        raise ParseError(path, 0, "file not found")
    with open(path, newline="") as f:
        for no, line in enumerate(f, start=1):
            s = line.strip()
            if s and not s.startswith("#"):
                yield no, s


def read_table(path, header, kinds, sorted_by: int | None = 0):
    """Parse a CSV into per-column arrays; errors carry the offending line number."""
    path = Path(path)
    lines = _data_lines(path)
    try:
        no, first = next(lines)
    except StopIteration:
        raise ParseError(path, 0, "missing header row") from None
    got = [h.strip() for h in first.split(",")]
    if got != header:
        raise ParseError(path, no, f"expected header {','.join(header)}, got {first}")
    rows, numbers = [], []
    for no, s in lines:
        rows.append(s)
        numbers.append(no)
    n = len(rows)
    ncol = len(header)
    if all(k != "s" for k in kinds):
        try:
            arr = np.loadtxt(io.StringIO("\n".join(rows)), delimiter=",", dtype=float, ndmin=2) if n else np.zeros((0, ncol))
            if arr.shape[1] != ncol:
                raise ValueError
        except ValueError:
            arr = None
        if arr is not None:
            cols = []
            for j, k in enumerate(kinds):
                c = arr[:, j]
                if k == "i":
                    if not np.all(c == np.round(c)):
                        bad = int(np.flatnonzero(c != np.round(c))[0])
                        raise ParseError(path, numbers[bad], f"column {header[j]} must be an integer")
                    c = c.astype(np.int64)
                cols.append(c)
            _check_sorted(path, cols, sorted_by, numbers)
            return cols
    # slow path with per-line diagnostics
    out = [[] for _ in header]
    for s, no in zip(csv.reader(rows), numbers):
        if len(s) != ncol:
            raise ParseError(path, no, f"expected {ncol} fields, got {len(s)}")
        for j, (v, k) in enumerate(zip(s, kinds)):
            v = v.strip()
            try:
                out[j].append(int(v) if k == "i" else float(v) if k == "f" else v)
            except ValueError:
                raise ParseError(path, no, f"bad value {v!r} for column {header[j]}") from None
    cols = [np.array(c, dtype=np.int64 if k == "i" else float if k == "f" else object) if len(c) else
            np.zeros(0, dtype=np.int64 if k == "i" else float if k == "f" else object) for c, k in zip(out, kinds)]
    _check_sorted(path, cols, sorted_by, numbers)
    return cols


def _check_sorted(path, cols, sorted_by, numbers):
    if sorted_by is None or len(cols[sorted_by]) < 2:
        return
    bad = np.flatnonzero(np.diff(cols[sorted_by]) < 0)
    if len(bad):
        raise ParseError(path, numbers[int(bad[0]) + 1], "timestamps are not sorted")


def load_trajectory_csv(path) -> PoseStream:
    c = read_table(path, HEADERS["priors.csv"], "f" * 8)
    q = np.stack(c[1:5], axis=1)
    R = np.array([quat_to_rot(x) for x in q]).reshape(-1, 3, 3)
    return PoseStream(c[0], R, np.stack(c[5:8], axis=1))


def load_calibration(path) -> Calibration:
    path = Path(path)
    vals = {}
    for no, s in _data_lines(path):
        if "=" not in s:
            raise ParseError(path, no, "expected key=value")
        k, v = (x.strip() for x in s.split("=", 1))
        if k not in CALIB_KEYS:
            raise ParseError(path, no, f"unknown key {k!r}")
        try:
            vals[k] = float(v)
        except ValueError:
            raise ParseError(path, no, f"bad value {v!r} for {k}") from None
    missing = [k for k in CALIB_KEYS if k not in vals]
    if missing:
        raise ParseError(path, 0, f"missing keys: {', '.join(missing)}")
    R = quat_to_rot([vals["qw"], vals["qx"], vals["qy"], vals["qz"]])
    cam = Camera(vals["fx"], vals["fy"], vals["cx"], vals["cy"], int(vals["width"]), int(vals["height"]))
    return Calibration(Pose(R, [vals["tx"], vals["ty"], vals["tz"]]), cam)


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    c = read_table(d / "imu.csv", HEADERS["imu.csv"], "f" * 7)
    imu = ImuStream(c[0], np.stack(c[1:4], axis=1), np.stack(c[4:7], axis=1))
    c = read_table(d / "features.csv", HEADERS["features.csv"], "fiff")
    feats = FeatureStream(c[0], c[1], np.stack(c[2:4], axis=1))
    c = read_table(d / "ranges.csv", HEADERS["ranges.csv"], "fifi")
    if len(c[3]) and not np.all(np.isin(c[3], (0, 1))):
        raise ParseError(d / "ranges.csv", 0, "is_outlier_truth must be 0 or 1")
    ranges = RangeStream(c[0], c[1], c[2], c[3].astype(bool))
    priors = load_trajectory_csv(d / "priors.csv")
    gt = load_trajectory_csv(d / "groundtruth.csv")
    c = read_table(d / "anchors.csv", HEADERS["anchors.csv"], "ifffsf", sorted_by=None)
    anchors = {}
    for i, x, y, z, kind, sigma in zip(*c):
        try:
            anchors[int(i)] = Anchor(int(i), [x, y, z], str(kind), float(sigma))
        except ValueError as exc:
            raise ParseError(d / "anchors.csv", 0, f"anchor {i}: {exc}") from None
    c = read_table(d / "landmarks.csv", HEADERS["landmarks.csv"], "ifff", sorted_by=None)
    landmarks = {int(i): np.array([x, y, z]) for i, x, y, z in zip(*c)}
    calib = load_calibration(d / CALIB_FILE)
    unknown_a = set(ranges.anchor_id.tolist()) - set(anchors)
    if unknown_a:
        raise ParseError(d / "ranges.csv", 0, f"unknown anchor ids {sorted(unknown_a)}")
    unknown_l = set(feats.landmark_id.tolist()) - set(landmarks)
    if unknown_l:
        raise ParseError(d / "features.csv", 0, f"unknown landmark ids {sorted(unknown_l)[:5]}")
    return Dataset(imu, feats, ranges, priors, anchors, landmarks, gt, calib)
