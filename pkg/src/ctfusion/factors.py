"""Whitened residual factors evaluated against the spline at measurement times.

Two views of the same models live here. Scalar helpers (``imu_residual``,
``visual_residual`` ...) and small ``Factor`` objects are convenient for tests
and one-off checks. The batched ``*_block`` functions evaluate many
measurements at once and return analytic Jacobian blocks keyed by variable,
which is what the solver consumes.

Variables are addressed by ``(kind, index)``:
``"p"`` translation control, ``"R"`` rotation control (right perturbation
``R <- R Exp(d)``), ``"bg"`` / ``"ba"`` biases (index 0) and ``"X"``
landmark (index is the landmark id).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CheiralityError, DegenerateGeometry, InvalidArgument
from .geometry import Pose, hat_batch, right_jacobian_inv_batch, so3_exp, so3_log_batch
from .sim import Anchor, Calibration
from .spline import SplineTrajectory, _plain_basis

MIN_DEPTH = 1e-6


@dataclass(frozen=True)
class NoiseModel:
    sigma_gyro: float = 0.003
    sigma_accel: float = 0.03
    sigma_pixel: float = 1.0
    sigma_r: float = 0.10
    sigma_va: float = 0.20

    def __post_init__(self):
        for k, v in vars(self).items():
            if not (np.isfinite(v) and v > 0):
                raise InvalidArgument(f"{k} must be positive")

    @property
    def imu_sqrt_info(self) -> np.ndarray:
        return np.concatenate([np.full(3, 1.0 / self.sigma_gyro), np.full(3, 1.0 / self.sigma_accel)])

    def range_sigma(self, anchor: Anchor) -> float:
        return self.sigma_r if anchor.kind == "physical" else self.sigma_va


@dataclass
class Block:
    """Jacobian of ``n`` stacked residuals w.r.t. one 3-vector variable per row."""

    kind: str
    index: np.ndarray  # (n,) variable index per residual row-group
    jac: np.ndarray  # (n, d, 3)


@dataclass
class Evaluation:
    residual: np.ndarray  # (n, d)
    blocks: list


def _spline_ctx(traj: SplineTrajectory, t, jac: bool, rotation: bool = True):
    seg, u = traj.grid.segment(t)
    h = traj.grid.h
    b0, b1, b2 = _plain_basis(u)
    idx = seg[:, None] + np.arange(4)
    P = traj.translation_cps[idx]
    out = dict(seg=seg, idx=idx, beta=b0, beta1=b1 / h, beta2=b2 / h**2,
               p=np.einsum("nj,njk->nk", b0, P))
    if not rotation:
        return out
    rot = traj.rotation_terms(t, jac)
    out["R"], out["w"] = rot[0], rot[1]
    if jac:
        out["dR"], out["dW"] = rot[2], rot[3]
    return out


def _scalar_blocks(kind, idx, coeff, M):
    """Blocks for translation controls: d residual / d p_k = coeff_k * M."""
    return [Block(kind, idx[:, k], coeff[:, k, None, None] * M) for k in range(4)]


def _rot_blocks(idx, dRW, M):
    """Blocks for rotation controls: M (n,d,3) @ dRW[:, k] (n,3,3)."""
    return [Block("R", idx[:, k], M @ dRW[:, k]) for k in range(4)]


def imu_block(traj: SplineTrajectory, t, gyro, accel, noise: NoiseModel, jac: bool = True) -> Evaluation:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    gyro = np.asarray(gyro, dtype=float).reshape(-1, 3)
    accel = np.asarray(accel, dtype=float).reshape(-1, 3)
    c = _spline_ctx(traj, t, jac)
    P = traj.translation_cps[c["idx"]]
    acc = np.einsum("nj,njk->nk", c["beta2"], P)
    f_world = acc - traj.gravity
    Rt = np.swapaxes(c["R"], -1, -2)
    f_body = np.einsum("nij,nj->ni", Rt, f_world)
    sg, sa = 1.0 / noise.sigma_gyro, 1.0 / noise.sigma_accel
    res = np.concatenate([sg * (gyro - c["w"] - traj.gyro_bias), sa * (accel - f_body - traj.accel_bias)], axis=1)
    if not jac:
        return Evaluation(res, [])
    n = len(t)
    blocks = []
    for k in range(4):
        J = np.zeros((n, 6, 3))
        J[:, :3] = -sg * c["dW"][:, k]
        J[:, 3:] = -sa * hat_batch(f_body) @ c["dR"][:, k]
        blocks.append(Block("R", c["idx"][:, k], J))
    Ma = np.zeros((n, 6, 3))
    Ma[:, 3:] = -sa * Rt
    blocks += _scalar_blocks("p", c["idx"], c["beta2"], Ma)
    zero = np.zeros(n, dtype=np.int64)
    Jg = np.zeros((n, 6, 3))
    Jg[:, :3] = -sg * np.eye(3)
    Ja = np.zeros((n, 6, 3))
    Ja[:, 3:] = -sa * np.eye(3)
    blocks += [Block("bg", zero, Jg), Block("ba", zero, Ja)]
    return Evaluation(res, blocks)


def camera_points(traj_ctx, X, calib: Calibration):
    """Landmarks in body and camera frames for evaluated spline context."""
    Rt = np.swapaxes(traj_ctx["R"], -1, -2)
    X_I = np.einsum("nij,nj->ni", Rt, X - traj_ctx["p"])
    R_CI = calib.T_IC.rotation.T
    t_CI = -R_CI @ calib.T_IC.translation
    X_C = X_I @ R_CI.T + t_CI
    return Rt, X_I, X_C, R_CI


def visual_block(traj: SplineTrajectory, t, landmark_pos, landmark_idx, uv, calib: Calibration,
                 noise: NoiseModel, jac: bool = True, min_depth: float | None = None) -> Evaluation:
    """Reprojection residuals. Depths below ``min_depth`` raise unless clamped.

    With ``min_depth`` given, depths are clamped to it instead of raising,
    which keeps an iteration alive when a trial step pushes a point behind
    the camera.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    X = np.asarray(landmark_pos, dtype=float).reshape(-1, 3)
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    c = _spline_ctx(traj, t, jac)
    Rt, X_I, X_C, R_CI = camera_points(c, X, calib)
    z = X_C[:, 2]
    if min_depth is None:
        if np.any(z <= MIN_DEPTH):
            raise CheiralityError("landmark not in front of camera")
    else:
        z = np.maximum(z, min_depth)
    cam = calib.camera
    s = 1.0 / noise.sigma_pixel
    proj = np.stack([cam.fx * X_C[:, 0] / z + cam.cx, cam.fy * X_C[:, 1] / z + cam.cy], axis=1)
    res = s * (uv - proj)
    if not jac:
        return Evaluation(res, [])
    n = len(t)
    Jp = np.zeros((n, 2, 3))
    Jp[:, 0, 0] = cam.fx / z
    Jp[:, 0, 2] = -cam.fx * X_C[:, 0] / z**2
    Jp[:, 1, 1] = cam.fy / z
    Jp[:, 1, 2] = -cam.fy * X_C[:, 1] / z**2
    G = -s * Jp @ R_CI  # d residual / d X_I
    blocks = _rot_blocks(c["idx"], c["dR"], G @ hat_batch(X_I))
    blocks += _scalar_blocks("p", c["idx"], -c["beta"], G @ Rt)
    blocks.append(Block("X", np.asarray(landmark_idx, dtype=np.int64).reshape(-1), G @ Rt))
    return Evaluation(res, blocks)


def range_block(traj: SplineTrajectory, t, anchor_pos, ranges, sigma, jac: bool = True) -> Evaluation:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    B = np.asarray(anchor_pos, dtype=float).reshape(-1, 3)
    r = np.asarray(ranges, dtype=float).reshape(-1)
    s = 1.0 / np.broadcast_to(np.asarray(sigma, dtype=float), r.shape)
    c = _spline_ctx(traj, t, False, rotation=False)
    d = c["p"] - B
    rhat = np.linalg.norm(d, axis=1)
    if np.any(rhat < 1e-12):
        raise DegenerateGeometry("position coincides with anchor")
    res = (s * (r - rhat))[:, None]
    if not jac:
        return Evaluation(res, [])
    M = (-s / rhat)[:, None, None] * d[:, None, :]
    return Evaluation(res, _scalar_blocks("p", c["idx"], c["beta"], M))


def _sqrt_info6(weight):
    w = np.asarray(weight, dtype=float)
    if w.ndim == 0:
        return np.eye(6) * float(w)
    if w.shape == (6,):
        return np.diag(w)
    if w.shape == (6, 6):
        return w
    raise InvalidArgument("prior weight must be a scalar, a 6-vector or a 6x6 matrix")


def prior_block(traj: SplineTrajectory, t, R_prior, p_prior, weight, jac: bool = True) -> Evaluation:
    """Pose prior residual ``W^{1/2} [Log(R_prior^T R(t)); p(t) - p_prior]``."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    R_prior = np.asarray(R_prior, dtype=float).reshape(-1, 3, 3)
    p_prior = np.asarray(p_prior, dtype=float).reshape(-1, 3)
    W = _sqrt_info6(weight)
    c = _spline_ctx(traj, t, jac)
    phi = so3_log_batch(np.swapaxes(R_prior, -1, -2) @ c["R"])
    e = np.concatenate([phi, c["p"] - p_prior], axis=1)
    res = e @ W.T
    if not jac:
        return Evaluation(res, [])
    n = len(t)
    Mr = np.zeros((n, 6, 3))
    Mr[:, :3] = right_jacobian_inv_batch(phi)
    blocks = _rot_blocks(c["idx"], c["dR"], W @ Mr)
    Mp = np.zeros((n, 6, 3))
    Mp[:, 3:] = np.eye(3)
    blocks += _scalar_blocks("p", c["idx"], c["beta"], W @ Mp)
    return Evaluation(res, blocks)


# scalar conveniences ---------------------------------------------------

def imu_residual(traj, meas, noise: NoiseModel) -> np.ndarray:
    t, w, a = meas
    return imu_block(traj, t, w, a, noise, jac=False).residual[0]


def visual_residual(traj, landmark, obs, calib: Calibration, noise: NoiseModel) -> np.ndarray:
    t, uv = obs
    return visual_block(traj, t, landmark, [0], uv, calib, noise, jac=False).residual[0]


def range_residual(traj, anchor: Anchor, meas, noise: NoiseModel) -> float:
    t, r = meas
    return float(range_block(traj, t, anchor.position, r, noise.range_sigma(anchor), jac=False).residual[0, 0])


def prior_residual(traj, prior, weight=1.0) -> np.ndarray:
    t, pose = prior
    return prior_block(traj, t, pose.rotation, pose.translation, weight, jac=False).residual[0]


# factor objects --------------------------------------------------------

@dataclass(frozen=True)
class Factor:
    kind: str  # imu | visual | range | prior
    t: float
    payload: tuple

    def touched(self, traj: SplineTrajectory) -> set:
        seg, _ = traj.grid.segment(np.array([self.t]))
        ctrl = range(int(seg[0]), int(seg[0]) + 4)
        out = {("p", k) for k in ctrl}
        if self.kind in ("imu", "visual", "prior"):
            out |= {("R", k) for k in ctrl}
        if self.kind == "imu":
            out |= {("bg", 0), ("ba", 0)}
        if self.kind == "visual":
            out.add(("X", self.payload[0]))
        return out

    def evaluate(self, traj, landmarks=None, noise: NoiseModel | None = None, calib: Calibration | None = None,
                 jac: bool = False) -> Evaluation:
        noise = noise or NoiseModel()
        t = np.array([self.t])
        if self.kind == "imu":
            return imu_block(traj, t, self.payload[0], self.payload[1], noise, jac)
        if self.kind == "visual":
            lid, uv = self.payload
            return visual_block(traj, t, landmarks[lid], [lid], uv, calib or Calibration(), noise, jac)
        if self.kind == "range":
            anchor, r = self.payload
            return range_block(traj, t, anchor.position, r, noise.range_sigma(anchor), jac)
        if self.kind == "prior":
            pose, weight = self.payload
            return prior_block(traj, t, pose.rotation, pose.translation, weight, jac)
        raise InvalidArgument(f"unknown factor kind {self.kind!r}")

    def residual(self, traj, landmarks=None, noise=None, calib=None) -> np.ndarray:
        return self.evaluate(traj, landmarks, noise, calib).residual[0]

    def jacobian(self, traj, var, landmarks=None, noise=None, calib=None) -> np.ndarray:
        """Analytic Jacobian w.r.t. one variable (zero if not touched)."""
        ev = self.evaluate(traj, landmarks, noise, calib, jac=True)
        kind, index = var
        J = np.zeros((ev.residual.shape[1], 3))
        for b in ev.blocks:
            if b.kind == kind and int(b.index[0]) == index:
                J += b.jac[0]
        return J


def imu_factor(t, gyro, accel) -> Factor:
    return Factor("imu", float(t), (np.asarray(gyro, dtype=float), np.asarray(accel, dtype=float)))


def visual_factor(t, landmark_id, uv) -> Factor:
    return Factor("visual", float(t), (int(landmark_id), np.asarray(uv, dtype=float)))


def range_factor(t, anchor: Anchor, r) -> Factor:
    return Factor("range", float(t), (anchor, float(r)))


def prior_factor(t, pose: Pose, weight=1.0) -> Factor:
    return Factor("prior", float(t), (pose, weight))


def perturb(traj: SplineTrajectory, landmarks, var, delta):
    """Apply a 3-vector step to one variable; returns new (traj, landmarks)."""
    kind, index = var
    delta = np.asarray(delta, dtype=float)
    if kind == "p":
        P = traj.translation_cps.copy()
        P[index] += delta
        return traj.replace(translation_cps=P), landmarks
    if kind == "R":
        Rc = traj.rotation_cps.copy()
        Rc[index] = Rc[index] @ so3_exp(delta)
        return traj.replace(rotation_cps=Rc), landmarks
    if kind == "bg":
        return traj.replace(gyro_bias=traj.gyro_bias + delta), landmarks
    if kind == "ba":
        return traj.replace(accel_bias=traj.accel_bias + delta), landmarks
    if kind == "X":
        lm = dict(landmarks)
        lm[index] = np.asarray(lm[index], dtype=float) + delta
        return traj, lm
    raise InvalidArgument(f"unknown variable kind {kind!r}")


def numeric_jacobian(factor: Factor, traj, var, delta: float = 1e-6, landmarks=None, noise=None, calib=None) -> np.ndarray:
    """Central-difference Jacobian of ``factor`` w.r.t. one variable."""
    cols = []
    for k in range(3):
        e = np.zeros(3)
        e[k] = delta
        tp, lp = perturb(traj, landmarks, var, e)
        tm, lm = perturb(traj, landmarks, var, -e)
        rp = factor.residual(tp, lp, noise, calib)
        rm = factor.residual(tm, lm, noise, calib)
        cols.append((rp - rm) / (2 * delta))
    return np.stack(cols, axis=1)
