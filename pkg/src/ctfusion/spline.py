"""Uniform cubic B-spline trajectory on SE(3).

Translation uses the plain uniform cubic basis; rotation uses the cumulative
form on SO(3)::

    R(t) = Rc[i] * prod_{j=1..3} Exp(bc_j(u) * Log(Rc[i+j-1]^T Rc[i+j]))

where ``Rc`` are rotation control points. Segment ``i`` covers
``[t_i, t_{i+1})`` and touches control indices ``i .. i+3``, so a grid with
``M`` intervals carries ``M + 3`` control points.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solveh_banded
from scipy.sparse.linalg import spsolve
from scipy.spatial.transform import Rotation as _ScipyRotation
from scipy.spatial.transform import Slerp

from . import kernels
from ._so3spline_py import cumulative_basis
from .errors import InvalidArgument, OutOfRange, UnderConstrained
from .geometry import Pose, so3_log_batch

GRAVITY = np.array([0.0, 0.0, -9.81])
TIME_TOL = 1e-9


def _plain_basis(u):
    u = np.asarray(u, dtype=float)
    v = 1.0 - u
    u2 = u * u
    u3 = u2 * u
    b = np.stack([v**3 / 6.0,
                  (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
                  (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
                  u3 / 6.0], axis=-1)
    db = np.stack([-0.5 * v * v,
                   0.5 * (3.0 * u2 - 4.0 * u),
                   0.5 * (-3.0 * u2 + 2.0 * u + 1.0),
                   0.5 * u2], axis=-1)
    ddb = np.stack([v, 3.0 * u - 2.0, 1.0 - 3.0 * u, u], axis=-1)
    return b, db, ddb


def basis(u, cumulative: bool = False):
    """Cubic basis and its first two derivatives w.r.t. ``u``.

    With ``cumulative=True`` the entries are ``sum_{l>=j} beta_l`` (the first
    one is identically 1), which is what the rotation spline uses.
    """
    u_arr = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u_arr)) or np.any(u_arr < 0.0) or np.any(u_arr >= 1.0):
        raise InvalidArgument("normalised time u must lie in [0, 1)")
    b, db, ddb = _plain_basis(u_arr)
    if cumulative:
        b = np.flip(np.cumsum(np.flip(b, -1), -1), -1)
        db = np.flip(np.cumsum(np.flip(db, -1), -1), -1)
        ddb = np.flip(np.cumsum(np.flip(ddb, -1), -1), -1)
    return b, db, ddb


@dataclass(frozen=True)
class KnotGrid:
    t0: float
    h: float
    M: int

    def __post_init__(self):
        if not (self.h > 0 and math.isfinite(self.h)):
            raise InvalidArgument("knot spacing h must be positive")
        if self.M < 1:
            raise InvalidArgument("grid needs at least one interval")

    @property
    def t_max(self) -> float:
        return self.t0 + self.M * self.h

    @property
    def n_control(self) -> int:
        return self.M + 3

    @property
    def knots(self) -> np.ndarray:
        return self.t0 + self.h * np.arange(self.M + 1)

    def segment(self, t):
        """Return ``(segment index, u)`` arrays; raises :class:`OutOfRange`."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if np.any(~np.isfinite(t)) or np.any(t < self.t0 - TIME_TOL) or np.any(t > self.t_max + TIME_TOL):
            raise OutOfRange(f"time outside spline span [{self.t0}, {self.t_max}]")
        x = (t - self.t0) / self.h
        seg = np.clip(np.floor(x).astype(np.intp), 0, self.M - 1)
        u = np.clip(x - seg, 0.0, 1.0)
        return seg, u

    def controls_for_span(self, ts: float, te: float) -> tuple[int, int]:
        """Inclusive control-index range touched by times in ``[ts, te]``."""
        seg, _ = self.segment(np.array([ts, te]))
        return int(seg[0]), int(seg[1]) + 3

    def control_time(self, k) -> np.ndarray:
        """Time at which control ``k`` carries its largest weight."""
        return self.t0 + (np.asarray(k, dtype=float) - 1.0) * self.h


def make_grid(t0: float, t_end: float, h: float) -> KnotGrid:
    if not (h > 0 and math.isfinite(h)):
        raise InvalidArgument("knot spacing h must be positive")
    if not t_end > t0:
        raise InvalidArgument("t_end must exceed t0")
    M = max(1, math.ceil((t_end - t0) / h - 1e-9))
    return KnotGrid(float(t0), float(h), int(M))


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SplineTrajectory:
    """Spline state plus IMU biases and world gravity.

    Rotation control points are stored directly; ``rotation_base`` and
    ``rotation_increments`` expose the equivalent base-plus-increments view.
    """

    grid: KnotGrid
    translation_cps: np.ndarray
    rotation_cps: np.ndarray
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())

    def __post_init__(self):
        n = self.grid.n_control
        for name, shape in (("translation_cps", (n, 3)), ("rotation_cps", (n, 3, 3)),
                            ("gyro_bias", (3,)), ("accel_bias", (3,)), ("gravity", (3,))):
            a = _readonly(getattr(self, name))
            if a.shape != shape:
                raise InvalidArgument(f"{name} must have shape {shape}, got {a.shape}")
            object.__setattr__(self, name, a)

    @classmethod
    def constant(cls, grid: KnotGrid, pose: Pose | None = None, **kw) -> "SplineTrajectory":
        pose = pose or Pose()
        n = grid.n_control
        return cls(grid, np.tile(pose.translation, (n, 1)), np.tile(pose.rotation, (n, 1, 1)), **kw)

    def replace(self, **changes) -> "SplineTrajectory":
        return replace(self, **changes)

    @property
    def rotation_base(self) -> np.ndarray:
        return self.rotation_cps[0]

    @property
    def rotation_increments(self) -> np.ndarray:
        Rc = self.rotation_cps
        return so3_log_batch(np.swapaxes(Rc[:-1], -1, -2) @ Rc[1:])

    @property
    def t_span(self) -> tuple[float, float]:
        return self.grid.t0, self.grid.t_max

    # batched evaluation -------------------------------------------------
    def translation_terms(self, t, order: int = 0):
        """Position (or derivative of given order) at times ``t``, shape (n, 3)."""
        seg, u = self.grid.segment(t)
        b = _plain_basis(u)[order] * self.grid.h ** (-order)
        P = self.translation_cps
        idx = seg[:, None] + np.arange(4)
        return np.einsum("nj,njk->nk", b, P[idx])

    def rotation_terms(self, t, jac: bool = False):
        seg, u = self.grid.segment(t)
        return kernels.so3_spline_eval(self.rotation_cps, seg, u, 1.0 / self.grid.h, jac)

    def position(self, t):
        return _scalarise(t, self.translation_terms(t, 0))

    def velocity(self, t):
        return _scalarise(t, self.translation_terms(t, 1))

    def acceleration(self, t):
        return _scalarise(t, self.translation_terms(t, 2))

    def rotation(self, t):
        return _scalarise(t, self.rotation_terms(t)[0])

    def angular_velocity(self, t):
        return _scalarise(t, self.rotation_terms(t)[1])

    def pose(self, t: float) -> Pose:
        return Pose(self.rotation(t), self.position(t))


def _scalarise(t, out):
    return out[0] if np.ndim(t) == 0 else out


def eval_position(traj: SplineTrajectory, t):
    return traj.position(t)


def eval_velocity(traj: SplineTrajectory, t):
    return traj.velocity(t)


def eval_acceleration(traj: SplineTrajectory, t):
    return traj.acceleration(t)


def eval_rotation(traj: SplineTrajectory, t):
    return traj.rotation(t)


def body_angular_velocity(traj: SplineTrajectory, t):
    return traj.angular_velocity(t)


# fitting ---------------------------------------------------------------

_SMOOTH_WEIGHT = 1e-5


def fit_translation(grid: KnotGrid, times, positions, weight_smooth: float = _SMOOTH_WEIGHT) -> np.ndarray:
    """Least-squares translation control points through ``positions``.

    A tiny second-difference penalty keeps control points without direct
    support well defined; it is negligible wherever data determine the fit.
    """
    times = np.asarray(times, dtype=float)
    positions = np.asarray(positions, dtype=float)
    seg, u = grid.segment(times)
    b = _plain_basis(u)[0]
    n = grid.n_control
    # banded normal matrix (upper form, bandwidth 3)
    ab = np.zeros((4, n))
    rhs = np.zeros((n, 3))
    for j in range(4):
        np.add.at(rhs, seg + j, b[:, j, None] * positions)
        for k in range(j, 4):
            np.add.at(ab[3 - (k - j)], seg + k, b[:, j] * b[:, k])
    w2 = weight_smooth**2
    d2 = np.array([1.0, -2.0, 1.0])
    for k in range(n - 2):
        for a in range(3):
            for c in range(a, 3):
                ab[3 - (c - a), k + c] += w2 * d2[a] * d2[c]
    return solveh_banded(ab, rhs)


def init_from_prior(priors, grid: KnotGrid, gravity=GRAVITY, refine_iterations: int = 3) -> SplineTrajectory:
    """Initialise a spline from timestamped prior poses.

    ``priors`` is a sequence of ``(t, Pose)``. Translation control points are
    a linear least-squares fit; rotation control points start from slerped
    prior rotations and are refined with a few Gauss-Newton steps on the
    rotation misfit. Biases start at zero.
    """
    priors = sorted(priors, key=lambda tp: tp[0])
    if len(priors) < 4:
        raise UnderConstrained("need at least 4 prior poses to initialise a cubic spline")
    times = np.array([t for t, _ in priors], dtype=float)
    if times[0] > grid.t0 + grid.h or times[-1] < grid.t_max - grid.h:
        raise UnderConstrained("prior poses do not cover the spline span")
    positions = np.array([p.translation for _, p in priors])
    rotations = np.array([p.rotation for _, p in priors])
    inside = (times >= grid.t0 - TIME_TOL) & (times <= grid.t_max + TIME_TOL)
    times_in, pos_in, rot_in = times[inside], positions[inside], rotations[inside]
    if len(times_in) < 4:
        raise UnderConstrained("fewer than 4 prior poses inside the spline span")

    P = fit_translation(grid, times_in, pos_in)

    keyed = _dedupe_times(times, rotations)
    slerp = Slerp(keyed[0], _ScipyRotation.from_matrix(keyed[1]))
    tc = np.clip(grid.control_time(np.arange(grid.n_control)), keyed[0][0], keyed[0][-1])
    Rc = slerp(tc).as_matrix()
    Rc = refine_rotations(grid, Rc, times_in, rot_in, refine_iterations)
    return SplineTrajectory(grid, P, Rc, gravity=np.asarray(gravity, dtype=float))


def _dedupe_times(times, rotations):
    keep = np.concatenate([[True], np.diff(times) > 1e-12])
    return times[keep], rotations[keep]


def refine_rotations(grid: KnotGrid, Rc, times, rotations, iterations: int = 3, damping: float = 1e-9):
    """Gauss-Newton fit of rotation control points to sampled rotations."""
    from .geometry import right_jacobian_inv_batch, so3_exp_batch

    Rc = np.array(Rc, dtype=float)
    n = grid.n_control
    seg, u = grid.segment(times)
    Rt = np.swapaxes(np.asarray(rotations, dtype=float), -1, -2)
    for _ in range(iterations):
        R, _, dR, _ = kernels.so3_spline_eval(Rc, seg, u, 1.0 / grid.h, True)
        r = so3_log_batch(Rt @ R)
        Jl = right_jacobian_inv_batch(r)
        blocks = np.einsum("nij,nmjk->nmik", Jl, dR)  # (ns, 4, 3, 3)
        rows = np.repeat(np.arange(len(seg) * 3), 12)
        cols = ((seg[:, None, None, None] + np.arange(4)[None, :, None, None]) * 3
                + np.arange(3)[None, None, None, :])
        cols = np.broadcast_to(cols, blocks.shape).transpose(0, 2, 1, 3).reshape(-1)
        vals = blocks.transpose(0, 2, 1, 3).reshape(-1)
        J = sp.csr_matrix((vals, (rows, cols)), shape=(len(seg) * 3, n * 3))
        H = (J.T @ J).tocsc() + damping * sp.identity(n * 3, format="csc")
        g = J.T @ r.reshape(-1)
        delta = spsolve(H, -g).reshape(n, 3)
        Rc = Rc @ so3_exp_batch(delta)
        if np.max(np.abs(delta)) < 1e-12:
            break
    return Rc
