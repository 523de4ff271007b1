"""Sliding-window Levenberg-Marquardt estimator over the spline state.

A window problem stacks IMU, visual, range and pose-prior residuals plus
Gaussian priors on individual variables. Variables are translation and
rotation control points, the two biases and, optionally, landmarks.

Sliding uses freeze-and-diagonal-prior: variables that leave the window keep
their current values, and every retained variable touched by a dropped factor
receives a prior anchored at its current value with weights
``sqrt(diag(J_dropped^T J_dropped))``.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from . import kernels
from .errors import ConvergenceFailure, InvalidArgument, NumericalFailure, UnderConstrained
from .factors import Block, Evaluation, NoiseModel, imu_block, prior_block, range_block, visual_block
from .geometry import right_jacobian_inv_batch, so3_exp_batch, so3_log_batch
from .ranging import RejectionParams, VaLog, VaParams, build_virtual_anchors, label_ranges
from .sim import Calibration, Dataset, PoseStream, world_to_camera
from .spline import SplineTrajectory, init_from_prior, make_grid

log = logging.getLogger(__name__)

VAR_KINDS = ("p", "R", "bg", "ba", "X")


@dataclass(frozen=True)
class SolverParams:
    window_length: float = 4.0
    window_stride: float = 2.0
    max_iterations: int = 8
    initial_damping: float = 1e-4
    damping_up: float = 4.0
    damping_down: float = 1.0 / 3.0
    max_damping: float = 1e8
    cost_tolerance: float = 1e-8
    step_tolerance: float = 1e-10
    imu_decimation: int = 1
    prior_sigma_position: float = 1.0
    prior_sigma_rotation: float = 0.05
    bias_sigma_gyro: float = 0.01
    bias_sigma_accel: float = 0.1
    estimate_landmarks: bool = True
    min_landmark_obs: int = 3
    min_depth: float = 0.1
    max_reprojection: float = 5.0  # px, triangulation acceptance
    slide_prior: str = "marginal"  # or "dropped"

    def __post_init__(self):
        if not self.window_length > 0:
            raise InvalidArgument("window_length must be positive")
        if self.max_iterations < 1:
            raise InvalidArgument("max_iterations must be at least 1")
        if not 0 < self.window_stride <= self.window_length:
            raise InvalidArgument("window_stride must lie in (0, window_length]")
        if self.imu_decimation < 1:
            raise InvalidArgument("imu_decimation must be a positive integer")
        if not (self.initial_damping > 0 and self.damping_up > 1 and 0 < self.damping_down < 1):
            raise InvalidArgument("invalid damping schedule")

    @property
    def prior_weight(self) -> np.ndarray:
        return np.concatenate([np.full(3, 1.0 / self.prior_sigma_rotation), np.full(3, 1.0 / self.prior_sigma_position)])


# variable priors -------------------------------------------------------

@dataclass
class VarPriors:
    """Per-kind arrays of (variable index, anchor value, 3-vector sqrt weight)."""

    index: dict = field(default_factory=dict)
    value: dict = field(default_factory=dict)
    weight: dict = field(default_factory=dict)

    def add(self, kind, idx, value, weight):
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        shape = (len(idx), 3, 3) if kind == "R" else (len(idx), 3)
        value = np.asarray(value, dtype=float).reshape(shape)
        weight = np.asarray(weight, dtype=float).reshape(len(idx), 3)
        if kind in self.index:
            self.index[kind] = np.concatenate([self.index[kind], idx])
            self.value[kind] = np.concatenate([self.value[kind], value])
            self.weight[kind] = np.concatenate([self.weight[kind], weight])
        else:
            self.index[kind], self.value[kind], self.weight[kind] = idx, value, weight

    def count(self) -> int:
        return int(sum(len(v) for v in self.index.values()))

    def select(self, keep) -> "VarPriors":
        """Keep entries for which ``keep(kind, idx_array)`` is true."""
        out = VarPriors()
        for k, idx in self.index.items():
            m = keep(k, idx)
            if np.any(m):
                out.add(k, idx[m], self.value[k][m], self.weight[k][m])
        return out


# window problem --------------------------------------------------------

@dataclass
class FusionProblem:
    t_start: float
    t_end: float
    k0: int
    k1: int
    noise: NoiseModel
    calib: Calibration
    imu: tuple  # (t, gyro, accel)
    visual: tuple  # (t, landmark_id, uv)
    ranges: tuple  # (t, anchor_pos, r, sigma, anchor_id)
    priors: tuple  # (t, R, p)
    prior_weight: np.ndarray
    var_priors: VarPriors
    landmark_ids: np.ndarray  # estimated landmark ids, sorted
    fixed_landmarks: dict = field(default_factory=dict)
    min_depth: float = 0.1

    @property
    def n_control(self) -> int:
        return self.k1 - self.k0 + 1

    @property
    def n_vars(self) -> int:
        return 3 * (2 * self.n_control + 2 + len(self.landmark_ids))

    @property
    def n_residuals(self) -> int:
        return 6 * len(self.imu[0]) + 2 * len(self.visual[0]) + len(self.ranges[0]) + 6 * len(self.priors[0]) \
            + 3 * self.var_priors.count()

    def factor_counts(self) -> dict:
        return {"imu": len(self.imu[0]), "visual": len(self.visual[0]), "range": len(self.ranges[0]),
                "prior": len(self.priors[0]), "var_prior": self.var_priors.count()}

    def active_vars(self) -> set:
        s = {("p", k) for k in range(self.k0, self.k1 + 1)} | {("R", k) for k in range(self.k0, self.k1 + 1)}
        s |= {("bg", 0), ("ba", 0)}
        return s | {("X", int(i)) for i in self.landmark_ids}

    def columns(self, kind: str, idx) -> np.ndarray:
        """First column of each variable, -1 when the variable is not active."""
        idx = np.asarray(idx, dtype=np.int64)
        nc = self.n_control
        if kind in ("p", "R"):
            ok = (idx >= self.k0) & (idx <= self.k1)
            base = 0 if kind == "p" else 3 * nc
            return np.where(ok, base + 3 * (idx - self.k0), -1)
        if kind == "bg":
            return np.full(idx.shape, 6 * nc)
        if kind == "ba":
            return np.full(idx.shape, 6 * nc + 3)
        if kind == "X":
            ids = self.landmark_ids
            if len(ids) == 0:
                return np.full(idx.shape, -1)
            pos = np.minimum(np.searchsorted(ids, idx), len(ids) - 1)
            return np.where(ids[pos] == idx, 6 * nc + 6 + 3 * pos, -1)
        raise InvalidArgument(f"unknown variable kind {kind!r}")

    def _landmark_positions(self, landmarks, lids):
        return np.array([landmarks[i] if i in landmarks else self.fixed_landmarks[i] for i in lids]).reshape(-1, 3)

    def evaluations(self, traj: SplineTrajectory, landmarks: dict, jac: bool):
        ev = []
        t, g, a = self.imu
        if len(t):
            ev.append(imu_block(traj, t, g, a, self.noise, jac))
        t, lid, uv = self.visual
        if len(t):
            X = self._landmark_positions(landmarks, lid)
            ev.append(visual_block(traj, t, X, lid, uv, self.calib, self.noise, jac, min_depth=self.min_depth))
        t, B, r, s, _ = self.ranges
        if len(t):
            ev.append(range_block(traj, t, B, r, s, jac))
        t, R, p = self.priors
        if len(t):
            ev.append(prior_block(traj, t, R, p, self.prior_weight, jac))
        ev.extend(self._var_prior_evaluations(traj, landmarks, jac))
        return ev

    def _var_prior_evaluations(self, traj, landmarks, jac):
        out = []
        vp = self.var_priors
        for kind, idx in vp.index.items():
            w = vp.weight[kind]
            if kind == "p":
                cur = traj.translation_cps[idx]
            elif kind == "bg":
                cur = np.tile(traj.gyro_bias, (len(idx), 1))
            elif kind == "ba":
                cur = np.tile(traj.accel_bias, (len(idx), 1))
            elif kind == "X":
                cur = self._landmark_positions(landmarks, idx)
            if kind == "R":
                e = so3_log_batch(np.swapaxes(vp.value[kind], -1, -2) @ traj.rotation_cps[idx])
                J = w[:, :, None] * right_jacobian_inv_batch(e) if jac else None
            else:
                e = cur - vp.value[kind]
                J = w[:, :, None] * np.eye(3) if jac else None
            out.append(Evaluation(w * e, [Block(kind, idx, J)] if jac else []))
        return out

    def linearize(self, traj, landmarks):
        """Residual vector plus per-evaluation stacked Jacobian parts.

        Each part is ``(row0, cols (n, K), jac (n, d, K))`` where the K columns
        of a residual group are the concatenated 3-column blocks it touches;
        inactive variables get column -1 and zero entries.
        """
        evs = self.evaluations(traj, landmarks, True)
        res = np.concatenate([e.residual.reshape(-1) for e in evs]) if evs else np.zeros(0)
        parts = []
        base = 0
        off3 = np.arange(3)
        for e in evs:
            n, d = e.residual.shape
            first = [self.columns(b.kind, b.index)[:, None] for b in e.blocks]
            cols = np.concatenate([np.where(c < 0, -1, c + off3) for c in first], axis=1)
            J = np.concatenate([b.jac for b in e.blocks], axis=2)
            bad = cols < 0
            if np.any(bad):
                cols = np.where(bad, -1, cols)
                J = np.where(bad[:, None, :], 0.0, J)
            parts.append((base, cols, J))
            base += n * d
        return res, parts

    def evaluate(self, traj, landmarks, jac: bool = True):
        """Stacked residual vector and, with ``jac``, the sparse Jacobian (CSR)."""
        if not jac:
            evs = self.evaluations(traj, landmarks, False)
            res = np.concatenate([e.residual.reshape(-1) for e in evs]) if evs else np.zeros(0)
            return res, None
        res, parts = self.linearize(traj, landmarks)
        rows, cols, vals = [], [], []
        for base, c, J in parts:
            n, d, K = J.shape
            rr = np.broadcast_to((base + np.arange(n)[:, None] * d + np.arange(d))[:, :, None], (n, d, K))
            cc = np.broadcast_to(c[:, None, :], (n, d, K))
            ok = cc >= 0
            rows.append(rr[ok])
            cols.append(cc[ok])
            vals.append(J[ok])
        if rows:
            J = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(len(res), self.n_vars))
        else:
            J = sp.csr_matrix((len(res), self.n_vars))
        return res, J

    def normal_equations(self, traj, landmarks):
        """``(residual, J^T J, J^T r)`` assembled densely from the block parts."""
        res, parts = self.linearize(traj, landmarks)
        N = self.n_vars
        H = np.zeros((N, N))
        g = np.zeros(N)
        for base, c, J in parts:
            n, d, _ = J.shape
            kernels.accumulate_normal_equations(H, g, np.ascontiguousarray(c, dtype=np.int64),
                                                np.ascontiguousarray(J), res[base:base + n * d].reshape(n, d))
        return res, H, g

    def normal_blocks(self, traj, landmarks):
        """``(residual, A, B, C, g)``: the normal equations split at the landmark columns."""
        res, parts = self.linearize(traj, landmarks)
        m = self.n_vars - 3 * len(self.landmark_ids)
        L = len(self.landmark_ids)
        A = np.zeros((m, m))
        B = np.zeros((m, 3 * L))
        C = np.zeros((L, 3, 3))
        g = np.zeros(self.n_vars)
        for base, c, J in parts:
            n, d, _ = J.shape
            kernels.accumulate_schur_blocks(A, B, C, g, np.ascontiguousarray(c, dtype=np.int64),
                                            np.ascontiguousarray(J), res[base:base + n * d].reshape(n, d), m)
        return res, A, B, C, g

    def information_diagonal(self, traj, landmarks) -> np.ndarray:
        _, parts = self.linearize(traj, landmarks)
        out = np.zeros(self.n_vars)
        for _, c, J in parts:
            cc = np.where(c < 0, 0, c)
            out += np.bincount(cc.reshape(-1), weights=np.sum(J * J, axis=1).reshape(-1), minlength=self.n_vars)
        return out

    def cost(self, traj, landmarks) -> float:
        r, _ = self.evaluate(traj, landmarks, jac=False)
        return 0.5 * float(r @ r)

    def apply_step(self, traj: SplineTrajectory, landmarks: dict, dx: np.ndarray):
        nc = self.n_control
        sl = slice(self.k0, self.k1 + 1)
        P = traj.translation_cps.copy()
        P[sl] += dx[:3 * nc].reshape(nc, 3)
        Rc = traj.rotation_cps.copy()
        Rc[sl] = Rc[sl] @ so3_exp_batch(dx[3 * nc:6 * nc].reshape(nc, 3))
        o = 6 * nc
        new = traj.replace(translation_cps=P, rotation_cps=Rc,
                           gyro_bias=traj.gyro_bias + dx[o:o + 3], accel_bias=traj.accel_bias + dx[o + 3:o + 6])
        lm = dict(landmarks)
        if len(self.landmark_ids):
            D = dx[o + 6:].reshape(-1, 3)
            for i, lid in enumerate(self.landmark_ids):
                lm[int(lid)] = landmarks[int(lid)] + D[i]
        return new, lm

    def restricted(self, t_before: float) -> "FusionProblem":
        """Factors with timestamp before ``t_before`` plus every variable prior."""
        def cut(stream):
            m = stream[0] < t_before
            return tuple(x[m] for x in stream)
        return FusionProblem(self.t_start, min(self.t_end, t_before), self.k0, self.k1, self.noise, self.calib,
                             cut(self.imu), cut(self.visual), cut(self.ranges), cut(self.priors),
                             self.prior_weight, self.var_priors, self.landmark_ids, self.fixed_landmarks,
                             self.min_depth)


def _in_window(t, t_start, t_end, closed):
    t = np.asarray(t)
    return (t >= t_start) & ((t <= t_end) if closed else (t < t_end))


def build_window(dataset: Dataset, traj: SplineTrajectory, t_start: float, t_end: float, anchors: dict,
                 noise: NoiseModel, params: SolverParams, *, range_inlier=None, virtual_anchors=(),
                 landmarks: dict | None = None, var_priors: VarPriors | None = None, closed: bool = False,
                 use_ranges: bool = True, use_priors: bool = True):
    """Assemble the window problem over ``[t_start, t_end)`` (closed when ``closed``).

    Returns ``(problem, landmarks)`` where ``landmarks`` holds the initial
    estimates of the landmarks chosen as variables.
    """
    if not t_end > t_start:
        raise InvalidArgument("empty window")
    grid = traj.grid
    imu = dataset.imu
    m = _in_window(imu.t, t_start, t_end, closed)
    sel = np.flatnonzero(m)[::params.imu_decimation]
    imu_data = (imu.t[sel], imu.gyro[sel], imu.accel[sel])

    f = dataset.features
    m = _in_window(f.t, t_start, t_end, closed)
    ft, fl, fuv = f.t[m], f.landmark_id[m], f.uv[m]
    est = {}
    fixed = {}
    if params.estimate_landmarks:
        ids, counts = np.unique(fl, return_counts=True)
        cand = ids[counts >= params.min_landmark_obs]
        prev = landmarks or {}
        est = triangulate_landmarks(traj, ft, fl, fuv, cand, dataset.calibration, params, prev)
        keep = np.isin(fl, np.array(sorted(est), dtype=np.int64))
    else:
        fixed = {int(k): np.asarray(v, dtype=float) for k, v in dataset.landmarks.items()}
        keep = np.ones(len(ft), bool)
    ft, fl, fuv = ft[keep], fl[keep], fuv[keep]
    if len(ft):
        # drop observations already behind the camera
        lm_all = {**fixed, **est}
        X = np.array([lm_all[int(i)] for i in fl])
        R_CW, t_CW = world_to_camera(traj.rotation(ft).reshape(-1, 3, 3), traj.position(ft).reshape(-1, 3),
                                     dataset.calibration.T_IC)
        z = np.einsum("nij,nj->ni", R_CW, X)[:, 2] + t_CW[:, 2]
        ok = z > params.min_depth
        ft, fl, fuv = ft[ok], fl[ok], fuv[ok]
    lm_ids = np.array(sorted(set(int(i) for i in fl) & set(est)), dtype=np.int64)
    est = {int(i): est[int(i)] for i in lm_ids}
    vis_data = (ft, fl.astype(np.int64), fuv)

    rt, rpos, rr, rs, rid = [], [], [], [], []
    if use_ranges:
        rg = dataset.ranges
        m = _in_window(rg.t, t_start, t_end, closed) & np.isin(rg.anchor_id, list(anchors))
        if range_inlier is not None:
            m &= range_inlier
        idx = np.flatnonzero(m)
        if len(idx):
            rt.append(rg.t[idx])
            rpos.append(np.array([anchors[int(a)].position for a in rg.anchor_id[idx]]))
            rr.append(rg.range[idx])
            rs.append(np.full(len(idx), noise.sigma_r))
            rid.append(rg.anchor_id[idx])
        for va in virtual_anchors:
            mv = m & (rg.anchor_id == va.parent) & (rg.t >= va.t_start) & (rg.t <= va.t_end)
            iv = np.flatnonzero(mv)
            if len(iv):
                rt.append(rg.t[iv])
                rpos.append(np.tile(va.anchor.position, (len(iv), 1)))
                rr.append(rg.range[iv])
                rs.append(np.full(len(iv), noise.sigma_va))
                rid.append(np.full(len(iv), va.anchor.id))
    if rt:
        rng_data = (np.concatenate(rt), np.concatenate(rpos), np.concatenate(rr), np.concatenate(rs), np.concatenate(rid))
    else:
        rng_data = (np.zeros(0), np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros(0, dtype=np.int64))

    if use_priors:
        pr = dataset.priors
        m = _in_window(pr.t, t_start, t_end, closed)
        pri_data = (pr.t[m], pr.rotation[m], pr.position[m])
    else:
        pri_data = (np.zeros(0), np.zeros((0, 3, 3)), np.zeros((0, 3)))

    times = [x[0] for x in (imu_data, vis_data, rng_data, pri_data) if len(x[0])]
    if not times:
        raise InvalidArgument("window contains no measurements")
    lo = min(float(np.min(x)) for x in times)
    hi = max(float(np.max(x)) for x in times)
    k0 = int(grid.segment(np.array([lo]))[0][0])
    k1 = int(grid.segment(np.array([hi]))[0][0]) + 3
    vp = var_priors if var_priors is not None else VarPriors()
    lm_set = set(lm_ids.tolist())

    def keep_prior(kind, idx):
        if kind in ("p", "R"):
            return (idx >= k0) & (idx <= k1)
        if kind == "X":
            return np.isin(idx, list(lm_set)) if lm_set else np.zeros(len(idx), bool)
        return np.ones(len(idx), bool)

    vp = vp.select(keep_prior)
    problem = FusionProblem(t_start, t_end, k0, k1, noise, dataset.calibration, imu_data, vis_data, rng_data,
                            pri_data, params.prior_weight, vp, lm_ids, fixed, params.min_depth)
    return problem, est


def triangulate_landmarks(traj, t, lid, uv, candidates, calib: Calibration, params: SolverParams, previous=None):
    """Linear multi-view triangulation against the current trajectory.

    Landmarks with a previous estimate keep it. New points must lie in front
    of every observing camera and reproject within ``max_reprojection`` px.
    """
    previous = previous or {}
    out = {}
    if len(candidates) == 0:
        return out
    cam = calib.camera
    R_CW, t_CW = world_to_camera(traj.rotation(t).reshape(-1, 3, 3), traj.position(t).reshape(-1, 3), calib.T_IC)
    rays = np.stack([(uv[:, 0] - cam.cx) / cam.fx, (uv[:, 1] - cam.cy) / cam.fy, np.ones(len(t))], axis=1)
    order = np.argsort(lid, kind="stable")
    sorted_ids = lid[order]
    starts = np.searchsorted(sorted_ids, candidates, side="left")
    ends = np.searchsorted(sorted_ids, candidates, side="right")
    for c, s, e in zip(candidates, starts, ends):
        c = int(c)
        if c in previous:
            out[c] = np.asarray(previous[c], dtype=float).copy()
            continue
        rows = order[s:e]
        # [ray]_x (R X + t) = 0, two independent rows per view
        A = []
        b = []
        for k in rows:
            x, y = rays[k, 0], rays[k, 1]
            R, tt = R_CW[k], t_CW[k]
            A.append(R[0] - x * R[2])
            b.append(x * tt[2] - tt[0])
            A.append(R[1] - y * R[2])
            b.append(y * tt[2] - tt[1])
        A = np.array(A)
        b = np.array(b)
        sv = np.linalg.svd(A, compute_uv=False)
        if sv[-1] < 1e-6 * sv[0]:
            continue
        X = np.linalg.lstsq(A, b, rcond=None)[0]
        Xc = np.einsum("nij,j->ni", R_CW[rows], X) + t_CW[rows]
        if np.any(Xc[:, 2] <= params.min_depth):
            continue
        proj = np.stack([cam.fx * Xc[:, 0] / Xc[:, 2] + cam.cx, cam.fy * Xc[:, 1] / Xc[:, 2] + cam.cy], axis=1)
        if np.sqrt(np.mean(np.sum((proj - uv[rows]) ** 2, axis=1))) > params.max_reprojection:
            continue
        out[c] = X
    return out


# Levenberg-Marquardt ---------------------------------------------------

class _SchurSystem:
    """Factorisation of the normal equations with the 3x3 landmark blocks eliminated.

    ``A`` couples trajectory and bias columns, ``B`` couples those to the
    landmarks and ``C`` holds one 3x3 block per landmark. Landmarks never
    couple to each other, so their block inverts in closed form.
    """

    def __init__(self, A: np.ndarray, B: np.ndarray, C: np.ndarray):
        m = A.shape[0]
        self.m, self.L = m, C.shape[0]
        self.B = B
        if self.L:
            self.Cinv = np.linalg.inv(C)
            B3 = B.reshape(m, self.L, 3).transpose(1, 0, 2)
            self.BC = np.ascontiguousarray((B3 @ self.Cinv).transpose(1, 0, 2)).reshape(m, 3 * self.L)
            S = A - self.BC @ B.T
        else:
            S = A
        if not np.all(np.isfinite(S)):
            raise np.linalg.LinAlgError("non-finite reduced system")
        self.cf = scipy.linalg.cho_factor(S, lower=False, check_finite=False)

    @classmethod
    def from_dense(cls, H: np.ndarray, m: int) -> "_SchurSystem":
        L = (H.shape[0] - m) // 3
        idx = m + 3 * np.arange(L)[:, None] + np.arange(3)
        return cls(H[:m, :m], H[:m, m:], H[idx[:, :, None], idx[:, None, :]])

    def solve(self, g: np.ndarray) -> np.ndarray:
        m = self.m
        if not self.L:
            return scipy.linalg.cho_solve(self.cf, g, check_finite=False)
        gl = g[m:]
        x = scipy.linalg.cho_solve(self.cf, g[:m] - self.BC @ gl, check_finite=False)
        y = np.einsum("lij,lj->li", self.Cinv, (gl - self.B.T @ x).reshape(self.L, 3)).reshape(-1)
        return np.concatenate([x, y])

    def inverse_diagonal(self) -> np.ndarray:
        m = self.m
        Sinv = scipy.linalg.cho_solve(self.cf, np.eye(m), check_finite=False)
        d = np.diag(Sinv).copy()
        if not self.L:
            return d
        dl = np.einsum("lii->li", self.Cinv).reshape(-1) + np.sum(self.BC * (Sinv @ self.BC), axis=0)
        return np.concatenate([d, dl])


def _damped(A, C, lam):
    """Copies of ``A`` and ``C`` with Marquardt damping ``lam * diag``."""
    dA = np.diag(A).copy()
    dC = np.einsum("lii->li", C).copy()
    top = max(dA.max(initial=0.0), dC.max(initial=0.0), 1.0)
    A2 = A + lam * np.diag(np.maximum(dA, 1e-12 * top))
    C2 = C.copy()
    ar = np.arange(3)
    C2[:, ar, ar] += lam * np.maximum(dC, 1e-12 * top)
    return A2, C2


@dataclass
class SolveReport:
    iterations: int = 0
    accepted_steps: int = 0
    initial_cost: float = float("nan")
    final_cost: float = float("nan")
    cost_history: list = field(default_factory=list)
    termination: str = ""


def solve(problem: FusionProblem, traj: SplineTrajectory, landmarks: dict, params: SolverParams,
          damping: float | None = None):
    """Minimise the window cost; returns ``(traj, landmarks, report)``.

    Steps are accepted only when they lower the cost, so the accepted cost
    sequence is monotone.
    """
    if problem.n_residuals < problem.n_vars:
        raise UnderConstrained(f"{problem.n_residuals} residuals for {problem.n_vars} unknowns")
    landmarks = {int(k): np.asarray(v, dtype=float) for k, v in landmarks.items()}
    r, A, B, C, g = problem.normal_blocks(traj, landmarks)
    cost = 0.5 * float(r @ r)
    if not np.isfinite(cost):
        raise NumericalFailure("non-finite initial cost")
    rep = SolveReport(initial_cost=cost, final_cost=cost, cost_history=[cost])
    lam = params.initial_damping if damping is None else damping
    for it in range(params.max_iterations):
        rep.iterations = it + 1
        while True:
            try:
                A2, C2 = _damped(A, C, lam)
                system = _SchurSystem(A2, B, C2)
                break
            except np.linalg.LinAlgError:
                lam *= params.damping_up
                if lam > params.max_damping:
                    raise NumericalFailure("normal equations not positive definite")
        dx = -system.solve(g)
        if not np.all(np.isfinite(dx)):
            raise NumericalFailure("non-finite step")
        if np.linalg.norm(dx) < params.step_tolerance:
            rep.termination = "step"
            break
        cand_traj, cand_lm = problem.apply_step(traj, landmarks, dx)
        r_new, _ = problem.evaluate(cand_traj, cand_lm, jac=False)
        new_cost = 0.5 * float(r_new @ r_new)
        if np.isfinite(new_cost) and new_cost < cost:
            rel = (cost - new_cost) / max(cost, 1e-300)
            traj, landmarks, cost = cand_traj, cand_lm, new_cost
            rep.accepted_steps += 1
            rep.cost_history.append(cost)
            lam = max(lam * params.damping_down, 1e-12)
            if rel < params.cost_tolerance:
                rep.termination = "cost"
                break
            r, A, B, C, g = problem.normal_blocks(traj, landmarks)
        else:
            lam *= params.damping_up
            if lam > params.max_damping:
                rep.termination = "damping"
                break
    else:
        rep.termination = "max_iterations"
    rep.final_cost = cost
    return traj, landmarks, rep


def window_hessian(problem: FusionProblem, traj, landmarks) -> np.ndarray:
    return problem.normal_equations(traj, landmarks)[1]


def _marginal_weights(problem, traj, landmarks, cols):
    """``1 / sqrt(diag(H^-1))`` of the full window Hessian for selected columns."""
    _, A, B, C, _ = problem.normal_blocks(traj, landmarks)
    A2, C2 = _damped(A, C, 1e-9)
    var = _SchurSystem(A2, B, C2).inverse_diagonal()[cols]
    return 1.0 / np.sqrt(np.maximum(var, 1e-300))


def slide(problem: FusionProblem, traj: SplineTrajectory, landmarks: dict, next_start: float,
          mode: str = "marginal") -> VarPriors:
    """Priors for the next window from factors older than ``next_start``.

    Variables keep their current estimates; each retained variable touched by
    a dropped factor (or by an existing prior) gets a diagonal prior. With
    ``mode="dropped"`` its weights are ``sqrt(diag(J_d^T J_d))`` over the
    dropped factors; with ``mode="marginal"`` they are the inverse marginal
    standard deviations from the whole window Hessian, which stays honest
    about directions (such as a common shift of neighbouring controls) that
    the dropped factors alone barely constrain.
    """
    if mode not in ("marginal", "dropped"):
        raise InvalidArgument(f"unknown slide prior mode {mode!r}")
    if not next_start > problem.t_start:
        raise InvalidArgument("next window must start after the current one")
    if next_start > problem.t_end + 1e-9:
        raise InvalidArgument("windows do not overlap")
    k_next = int(traj.grid.segment(np.array([next_start]))[0][0])
    if k_next + 3 > problem.k1:
        raise InvalidArgument("windows must overlap by at least the cubic support")
    dropped = problem.restricted(next_start)
    info = dropped.information_diagonal(traj, landmarks)
    nc = problem.n_control
    if mode == "marginal":
        retained = np.ones(problem.n_vars, bool)
        retained[:3 * nc] = np.repeat(np.arange(problem.k0, problem.k1 + 1) >= k_next, 3)
        retained[3 * nc:6 * nc] = retained[:3 * nc]
        cols = np.flatnonzero(retained & (info > 0))
        if len(cols):
            info = np.zeros(problem.n_vars)
            info[cols] = _marginal_weights(problem, traj, landmarks, cols) ** 2
    out = VarPriors()
    ks = np.arange(problem.k0, problem.k1 + 1)
    for kind, base in (("p", 0), ("R", 3 * nc)):
        w = np.sqrt(info[base:base + 3 * nc].reshape(nc, 3))
        m = (ks >= k_next) & (w.max(axis=1) > 0)
        if np.any(m):
            val = traj.translation_cps[ks[m]] if kind == "p" else traj.rotation_cps[ks[m]]
            out.add(kind, ks[m], val, w[m])
    o = 6 * nc
    for kind, val, off in (("bg", traj.gyro_bias, o), ("ba", traj.accel_bias, o + 3)):
        w = np.sqrt(info[off:off + 3])
        if w.max() > 0:
            out.add(kind, [0], val, w)
    if len(problem.landmark_ids):
        w = np.sqrt(info[o + 6:].reshape(-1, 3))
        m = w.max(axis=1) > 0
        if np.any(m):
            ids = problem.landmark_ids[m]
            out.add("X", ids, np.array([landmarks[int(i)] for i in ids]), w[m])
    return out


# pipeline ---------------------------------------------------------------

@dataclass
class WindowReport:
    index: int
    t_start: float
    t_end: float
    initial_cost: float
    final_cost: float
    iterations: int
    accepted_steps: int
    termination: str
    factors: dict
    ranges_inlier: int
    ranges_outlier: int
    va: dict
    landmarks: int
    wall_time: float
    retries: int = 0
    cost_history: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class PipelineResult:
    trajectory: SplineTrajectory
    estimate: PoseStream
    reports: list
    virtual_anchors: list
    va_log: VaLog
    range_labels: np.ndarray  # inlier flag per dataset range (False where unused)
    range_used: np.ndarray  # ranges that took part in gating
    anchors: dict

    def outlier_scores(self, truth_flags) -> tuple[float, float, float]:
        """(precision, recall, false-positive rate) of the outlier gate."""
        return outlier_scores(~self.range_labels[self.range_used], np.asarray(truth_flags)[self.range_used])


def outlier_scores(flagged, truth) -> tuple[float, float, float]:
    flagged = np.asarray(flagged, bool)
    truth = np.asarray(truth, bool)
    tp = np.sum(flagged & truth)
    fp = np.sum(flagged & ~truth)
    fn = np.sum(~flagged & truth)
    tn = np.sum(~flagged & ~truth)
    precision = float(tp / (tp + fp)) if tp + fp else 1.0
    recall = float(tp / (tp + fn)) if tp + fn else 1.0
    fpr = float(fp / (fp + tn)) if fp + tn else 0.0
    return precision, recall, fpr


def window_bounds(t0: float, t_end: float, length: float, stride: float):
    out = []
    i = 0
    while True:
        ws = t0 + i * stride
        we = ws + length
        if we >= t_end - 1e-9:
            out.append((ws, t_end))
            break
        out.append((ws, we))
        i += 1
    return out


def _realign_tail(traj: SplineTrajectory, init: SplineTrajectory, k1: int) -> SplineTrajectory:
    """Carry the current correction at control ``k1`` onto later, untouched controls."""
    n = traj.grid.n_control
    if k1 >= n - 1:
        return traj
    Rk, Ik = traj.rotation_cps[k1], init.rotation_cps[k1]
    Rcorr = Rk @ Ik.T
    pcorr = traj.translation_cps[k1] - Rcorr @ init.translation_cps[k1]
    P = traj.translation_cps.copy()
    Rc = traj.rotation_cps.copy()
    P[k1 + 1:] = init.translation_cps[k1 + 1:] @ Rcorr.T + pcorr
    Rc[k1 + 1:] = Rcorr @ init.rotation_cps[k1 + 1:]
    return traj.replace(translation_cps=P, rotation_cps=Rc)


def sample_trajectory(traj: SplineTrajectory, rate: float, t0: float | None = None, t1: float | None = None) -> PoseStream:
    t0 = traj.grid.t0 if t0 is None else t0
    t1 = traj.grid.t_max if t1 is None else t1
    n = int(np.floor((t1 - t0) * rate + 1e-9)) + 1
    t = t0 + np.arange(n) / rate
    R, _ = traj.rotation_terms(t)
    return PoseStream(t, R, traj.translation_terms(t, 0))


def run_pipeline(dataset: Dataset, *, h: float = 0.05, solver: SolverParams | None = None,
                 rejection: RejectionParams | None = None, va: VaParams | None = None,
                 noise: NoiseModel | None = None, anchor_count: int | None = None, ranging: bool = True,
                 virtual_anchors: bool = True, prediction: str = "vio-then-spline", export_rate: float = 50.0,
                 report_sink=None) -> PipelineResult:
    """Initialise from priors, then gate, build, solve and slide window by window."""
    solver = solver or SolverParams()
    rejection = rejection or RejectionParams()
    va = va or VaParams()
    noise = noise or NoiseModel(sigma_r=va.sigma_r, sigma_va=va.sigma_va)
    if prediction not in ("vio-then-spline", "vio", "spline"):
        raise InvalidArgument(f"unknown prediction policy {prediction!r}")
    physical = sorted(k for k, a in dataset.anchors.items() if a.kind == "physical")
    if anchor_count is not None:
        if anchor_count > len(physical):
            raise InvalidArgument(f"dataset has {len(physical)} anchors, {anchor_count} requested")
        physical = physical[:anchor_count]
    anchors = {k: dataset.anchors[k] for k in physical}

    t0, t_end = dataset.t_span
    grid = make_grid(t0, t_end, h)
    init = init_from_prior(dataset.priors.poses(), grid)
    traj = init
    rg = dataset.ranges
    n_ranges = len(rg.t)
    labels = np.zeros(n_ranges, bool)
    used = np.zeros(n_ranges, bool)
    in_map = np.isin(rg.anchor_id, physical) if ranging and physical else np.zeros(n_ranges, bool)

    windows = window_bounds(t0, t_end, solver.window_length, solver.window_stride)
    landmarks: dict = {}
    priors = VarPriors()
    priors.add("bg", [0], np.zeros(3), np.full(3, 1.0 / solver.bias_sigma_gyro))
    priors.add("ba", [0], np.zeros(3), np.full(3, 1.0 / solver.bias_sigma_accel))
    vas: list = []
    va_total = VaLog()
    reports = []
    prev_end = t0
    for wi, (ws, we) in enumerate(windows):
        tic = time.perf_counter()
        closed = wi == len(windows) - 1
        use_vio = prediction == "vio" or (prediction == "vio-then-spline" and wi == 0)
        predict = dataset.priors.interpolate_position if use_vio else traj.position

        inlier_w = None
        va_w = VaLog()
        if ranging and physical:
            mwin = in_map & (rg.t >= ws - rejection.delta) & (rg.t <= we + rejection.delta)
            idx = np.flatnonzero(mwin)
            if len(idx):
                res = label_ranges(rg.t[idx], rg.anchor_id[idx], rg.range[idx], anchors,
                                   predict(rg.t[idx]).reshape(-1, 3), rejection, t_start=t0)
                core = _in_window(rg.t[idx], ws, we, closed)
                labels[idx[core]] = res.inlier[core]
                used[idx[core]] = True
                inlier_w = np.zeros(n_ranges, bool)
                inlier_w[idx] = res.inlier
                if virtual_anchors:
                    d = rejection.delta
                    first = np.ceil((max(prev_end, ws + d) - d - t0) / d - 1e-9)
                    cs = t0 + d * np.arange(first, np.floor((we - d - t0) / d + 1e-9) + 1)
                    if wi == 0:
                        cs = cs[cs - d >= ws - 1e-9]
                    else:
                        cs = cs[cs + d > prev_end + 1e-9]
                    if len(cs):
                        new, va_w = build_virtual_anchors(
                            rg.t[idx], rg.anchor_id[idx], rg.range[idx], res.inlier, res.innovation, anchors,
                            predict, rejection, va, centres=cs, next_id=1000 + len(vas))
                        vas.extend(new)
                        va_total.merge(va_w)
            else:
                inlier_w = np.zeros(n_ranges, bool)
        active_vas = [v for v in vas if v.t_end >= ws and v.t_start < we]
        problem, lm0 = build_window(dataset, traj, ws, we, anchors, noise, solver, range_inlier=inlier_w,
                                    virtual_anchors=active_vas, landmarks=landmarks, var_priors=priors,
                                    closed=closed, use_ranges=bool(ranging and physical))
        lm_in = {**landmarks, **lm0}
        retries = 0
        damping = solver.initial_damping
        while True:
            try:
                traj, lm_out, rep = solve(problem, traj, lm_in, solver, damping=damping)
                break
            except (NumericalFailure, np.linalg.LinAlgError) as exc:
                retries += 1
                if retries > 1:
                    raise ConvergenceFailure(f"window {wi} failed after retry: {exc}") from exc
                log.warning("window %d failed (%s); retrying with doubled damping", wi, exc)
                damping *= 2.0
        landmarks.update(lm_out)
        traj = _realign_tail(traj, init, problem.k1)
        if wi + 1 < len(windows):
            priors = slide(problem, traj, landmarks, windows[wi + 1][0], solver.slide_prior)
        n_in = int(np.sum(labels[used & _in_window(rg.t, ws, we, closed)]))
        n_used = int(np.sum(used & _in_window(rg.t, ws, we, closed)))
        wr = WindowReport(wi, ws, we, rep.initial_cost, rep.final_cost, rep.iterations, rep.accepted_steps,
                          rep.termination, problem.factor_counts(), n_in, n_used - n_in, va_w.as_dict(),
                          len(problem.landmark_ids), time.perf_counter() - tic, retries, rep.cost_history)
        reports.append(wr)
        if report_sink is not None:
            report_sink(wr)
        prev_end = we
    est = sample_trajectory(traj, export_rate, t0, t_end)
    return PipelineResult(traj, est, reports, vas, va_total, labels, used, anchors)
