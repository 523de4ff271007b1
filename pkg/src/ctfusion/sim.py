"""Deterministic synthetic world: ground truth, anchors and sensor streams.

Every random draw comes from a ``numpy.random.PCG64`` stream spawned from the
config seed through ``SeedSequence``, one child stream per sensor, so a given
``WorldConfig`` always produces the same dataset and changing one sensor's
settings leaves the other streams untouched.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateGeometry, InvalidArgument
from .geometry import Pose, so3_exp_batch
from .spline import GRAVITY, init_from_prior, make_grid

TRAJECTORY_KINDS = ("circle", "lissajous", "polyline")


@dataclass(frozen=True)
class Camera:
    fx: float = 400.0
    fy: float = 400.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def project(self, Xc: np.ndarray) -> np.ndarray:
        Xc = np.asarray(Xc, dtype=float)
        z = Xc[..., 2]
        return np.stack([self.fx * Xc[..., 0] / z + self.cx, self.fy * Xc[..., 1] / z + self.cy], axis=-1)

    def in_image(self, uv: np.ndarray) -> np.ndarray:
        return (uv[..., 0] >= 0) & (uv[..., 0] < self.width) & (uv[..., 1] >= 0) & (uv[..., 1] < self.height)


# camera looks along body +x; image x = -body y, image y = -body z
DEFAULT_R_IC = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


@dataclass(frozen=True)
class Calibration:
    T_IC: Pose = field(default_factory=lambda: Pose(DEFAULT_R_IC, np.array([0.05, 0.0, 0.02])))
    camera: Camera = field(default_factory=Camera)


@dataclass(frozen=True)
class Anchor:
    id: int
    position: np.ndarray
    kind: str = "physical"
    sigma: float = 0.10

    def __post_init__(self):
        if self.kind not in ("physical", "virtual"):
            raise InvalidArgument(f"anchor kind must be physical or virtual, got {self.kind!r}")
        if not self.sigma > 0:
            raise InvalidArgument("anchor sigma must be positive")
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))


@dataclass
class ImuStream:
    t: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray


@dataclass
class FeatureStream:
    t: np.ndarray
    landmark_id: np.ndarray
    uv: np.ndarray


@dataclass
class RangeStream:
    t: np.ndarray
    anchor_id: np.ndarray
    range: np.ndarray
    is_outlier_truth: np.ndarray

    def select(self, mask) -> "RangeStream":
        return RangeStream(self.t[mask], self.anchor_id[mask], self.range[mask], self.is_outlier_truth[mask])


@dataclass
class PoseStream:
    t: np.ndarray
    rotation: np.ndarray
    position: np.ndarray

    def poses(self):
        return [(float(t), Pose(R, p)) for t, R, p in zip(self.t, self.rotation, self.position)]

    def interpolate_position(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return np.stack([np.interp(t, self.t, self.position[:, k]) for k in range(3)], axis=-1)


@dataclass
class Dataset:
    imu: ImuStream
    features: FeatureStream
    ranges: RangeStream
    priors: PoseStream
    anchors: dict[int, Anchor]
    landmarks: dict[int, np.ndarray]
    ground_truth: PoseStream
    calibration: Calibration = field(default_factory=Calibration)

    @property
    def t_span(self) -> tuple[float, float]:
        starts = [s.t[0] for s in (self.imu, self.priors) if len(s.t)]
        ends = [s.t[-1] for s in (self.imu, self.priors) if len(s.t)]
        return min(starts), max(ends)


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    duration: float = 20.0
    trajectory: str = "lissajous"
    center: tuple = (0.0, 0.0, 1.2)
    radius: float = 2.0
    period: float = 10.0
    amplitude: tuple = (2.5, 2.0, 0.4)
    frequency: tuple = (0.45, 0.7, 0.55)
    yaw_rate: float = 0.25
    attitude_amplitude: float = 0.08
    waypoints: tuple = ((0.0, 0.0, 1.0), (4.0, 0.0, 1.0))
    speed: float = 1.0
    truth_knot_spacing: float = 0.0
    imu_rate: float = 200.0
    feature_rate: float = 20.0
    range_rate: float = 10.0
    gt_rate: float = 50.0
    landmark_count: int = 200
    landmark_margin: float = 3.0
    min_depth: float = 0.3
    track_length: float = 0.75  # s; > 0 re-identifies landmarks after each track, like a real tracker
    camera: Camera = field(default_factory=Camera)
    sigma_gyro: float = 0.003
    sigma_accel: float = 0.03
    sigma_pixel: float = 1.0
    sigma_range: float = 0.10
    gyro_bias: tuple = (0.002, -0.001, 0.0015)
    accel_bias: tuple = (0.03, -0.02, 0.04)
    outlier_prob: float = 0.05
    outlier_bias_range: tuple = (0.5, 3.0)
    anchor_count: int = 4
    anchor_height: float = 3.0
    anchor_perturbation: tuple = (0.0, 0.0, 0.0)
    prior_drift_rate: float = 0.01
    prior_yaw_drift_rate: float = 0.001
    prior_random_walk: float = 0.002
    prior_noise_position: float = 0.005
    prior_noise_rotation: float = 0.002
    gravity: tuple = tuple(GRAVITY)

    def __post_init__(self):
        for name in ("imu_rate", "feature_rate", "range_rate", "gt_rate", "duration"):
            if not getattr(self, name) > 0:
                raise InvalidArgument(f"{name} must be positive")
        if not self.track_length >= 0:
            raise InvalidArgument("track_length must be non-negative")
        if not 0.0 <= self.outlier_prob <= 1.0:
            raise InvalidArgument("outlier_prob must lie in [0, 1]")
        if not self.sigma_range > 0:
            raise InvalidArgument("sigma_range must be positive")
        lo, hi = self.outlier_bias_range
        if not 0 < lo <= hi:
            raise InvalidArgument("outlier_bias_range must be positive and ordered")
        if self.trajectory not in TRAJECTORY_KINDS:
            raise InvalidArgument(f"unknown trajectory kind {self.trajectory!r}")

    def noiseless(self) -> "WorldConfig":
        """Same world with every noise, bias, drift and outlier switched off."""
        return replace(self, sigma_gyro=0.0, sigma_accel=0.0, sigma_pixel=0.0, sigma_range=1e-12,
                       gyro_bias=(0.0, 0.0, 0.0), accel_bias=(0.0, 0.0, 0.0), outlier_prob=0.0,
                       prior_drift_rate=0.0, prior_yaw_drift_rate=0.0, prior_random_walk=0.0,
                       prior_noise_position=0.0, prior_noise_rotation=0.0)


# ground truth -----------------------------------------------------------

def _euler_zyx(yaw, pitch, roll):
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    R = np.empty(yaw.shape + (3, 3))
    R[..., 0, 0] = cy * cp
    R[..., 0, 1] = cy * sp * sr - sy * cr
    R[..., 0, 2] = cy * sp * cr + sy * sr
    R[..., 1, 0] = sy * cp
    R[..., 1, 1] = sy * sp * sr + cy * cr
    R[..., 1, 2] = sy * sp * cr - cy * sr
    R[..., 2, 0] = -sp
    R[..., 2, 1] = cp * sr
    R[..., 2, 2] = cp * cr
    return R


class AnalyticTrajectory:
    """Closed-form C-infinity (except polyline) trajectory.

    Attitude is ZYX Euler ``(yaw, pitch, roll)``; each angle is given with its
    time derivative so body angular velocity is exact.
    """

    def __init__(self, pos, vel, acc, attitude, kind, t_span=(0.0, 60.0)):
        self._pos, self._vel, self._acc, self._att = pos, vel, acc, attitude
        self.kind = kind
        self.t_span = (float(t_span[0]), float(t_span[1]))

    def position(self, t):
        return self._pos(np.asarray(t, dtype=float))

    def velocity(self, t):
        return self._vel(np.asarray(t, dtype=float))

    def acceleration(self, t):
        return self._acc(np.asarray(t, dtype=float))

    def rotation(self, t):
        (y, _), (p, _), (r, _) = self._att(np.asarray(t, dtype=float))
        return _euler_zyx(y, p, r)

    def angular_velocity(self, t):
        (_, dy), (p, dp), (r, dr) = self._att(np.asarray(t, dtype=float))
        return np.stack([dr - dy * np.sin(p),
                         dp * np.cos(r) + dy * np.sin(r) * np.cos(p),
                         -dp * np.sin(r) + dy * np.cos(r) * np.cos(p)], axis=-1)

    def pose(self, t) -> Pose:
        return Pose(self.rotation(float(t)), self.position(float(t)))


def _circle(cfg):
    c = np.asarray(cfg.center, dtype=float)
    r, w = cfg.radius, 2.0 * np.pi / cfg.period

    def pos(t):
        return c + np.stack([r * np.cos(w * t), r * np.sin(w * t), 0.0 * t], axis=-1)

    def vel(t):
        return np.stack([-r * w * np.sin(w * t), r * w * np.cos(w * t), 0.0 * t], axis=-1)

    def acc(t):
        return np.stack([-r * w * w * np.cos(w * t), -r * w * w * np.sin(w * t), 0.0 * t], axis=-1)

    def att(t):
        z = 0.0 * t
        return (w * t + np.pi / 2, w + z), (z, z), (z, z)

    return AnalyticTrajectory(pos, vel, acc, att, "circle")


def _lissajous(cfg):
    c = np.asarray(cfg.center, dtype=float)
    A = np.asarray(cfg.amplitude, dtype=float)
    w = np.asarray(cfg.frequency, dtype=float)
    ph = np.array([0.0, 0.4, 1.1])
    yr, aa = cfg.yaw_rate, cfg.attitude_amplitude

    def pos(t):
        return c + A * np.sin(np.multiply.outer(t, w) + ph)

    def vel(t):
        return A * w * np.cos(np.multiply.outer(t, w) + ph)

    def acc(t):
        return -A * w * w * np.sin(np.multiply.outer(t, w) + ph)

    def att(t):
        yaw = yr * t + 0.6 * np.sin(0.5 * t)
        dyaw = yr + 0.3 * np.cos(0.5 * t)
        pitch = aa * np.sin(1.1 * t + 0.3)
        dpitch = 1.1 * aa * np.cos(1.1 * t + 0.3)
        roll = aa * np.sin(1.3 * t)
        droll = 1.3 * aa * np.cos(1.3 * t)
        return (yaw, dyaw), (pitch, dpitch), (roll, droll)

    return AnalyticTrajectory(pos, vel, acc, att, "lissajous")


def _polyline(cfg):
    W = np.asarray(cfg.waypoints, dtype=float)
    if W.ndim != 2 or W.shape[1] != 3 or len(W) < 2:
        raise InvalidArgument("polyline needs at least two 3-D waypoints")
    seg_len = np.linalg.norm(np.diff(W, axis=0), axis=1)
    if np.any(seg_len <= 0) or not cfg.speed > 0:
        raise InvalidArgument("polyline waypoints must be distinct and speed positive")
    t_nodes = np.concatenate([[0.0], np.cumsum(seg_len / cfg.speed)])
    vels = np.diff(W, axis=0) / np.diff(t_nodes)[:, None]
    d0 = W[1] - W[0]
    yaw0 = np.arctan2(d0[1], d0[0])

    def _index(t):
        return np.clip(np.searchsorted(t_nodes, t, side="right") - 1, 0, len(vels) - 1)

    def pos(t):
        t_c = np.clip(t, 0.0, t_nodes[-1])
        k = _index(t_c)
        return W[k] + vels[k] * (t_c - t_nodes[k])[..., None]

    def vel(t):
        return vels[_index(np.clip(t, 0.0, t_nodes[-1]))]

    def acc(t):
        return np.zeros(np.shape(t) + (3,))

    def att(t):
        z = 0.0 * t
        return (z + yaw0, z), (z, z), (z, z)

    return AnalyticTrajectory(pos, vel, acc, att, "polyline")


def generate_truth(config: WorldConfig):
    """Ground-truth trajectory for ``config``.

    With ``truth_knot_spacing > 0`` the analytic path is replaced by a cubic
    spline fitted to it, so an estimator with the same knot grid can represent
    the truth exactly.
    """
    builders = {"circle": _circle, "lissajous": _lissajous, "polyline": _polyline}
    if config.trajectory not in builders:
        raise InvalidArgument(f"unknown trajectory kind {config.trajectory!r}")
    truth = builders[config.trajectory](config)
    truth.t_span = (0.0, float(config.duration))
    if config.truth_knot_spacing > 0:
        grid = make_grid(0.0, config.duration, config.truth_knot_spacing)
        ts = np.linspace(grid.t0, grid.t_max, 8 * grid.M + 1)
        samples = [(t, Pose(R, p)) for t, R, p in zip(ts, truth.rotation(ts), truth.position(ts))]
        truth = init_from_prior(samples, grid, gravity=config.gravity, refine_iterations=6)
    return truth


def _sample_times(rate, duration, offset=0.0):
    n = int(np.floor((duration - offset) * rate + 1e-9)) + 1
    return offset + np.arange(n) / rate


def place_anchors(truth, count: int = 4, height: float = 3.0, perturbation=(0.0, 0.0, 0.0),
                  duration: float | None = None, sigma: float = 0.10, rng=None) -> dict[int, Anchor]:
    """Anchors at the corners of the trajectory's horizontal bounding box.

    Corners are ordered (min,min), (max,min), (max,max), (min,max); a count
    below 4 drops trailing corners.
    """
    if count not in (2, 3, 4):
        raise InvalidArgument("anchor count must be 2, 3 or 4")
    if duration is None:
        t0, t1 = truth.t_span
    else:
        t0, t1 = 0.0, duration
    P = truth.position(np.linspace(t0, t1, 2001))
    lo, hi = P.min(axis=0), P.max(axis=0)
    if np.any(hi[:2] - lo[:2] < 1e-9):
        raise DegenerateGeometry("trajectory bounding box has zero horizontal extent")
    corners = np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]])
    pert = np.asarray(perturbation, dtype=float)
    anchors = {}
    for i in range(count):
        pos = np.array([corners[i, 0], corners[i, 1], height])
        if rng is not None and np.any(pert > 0):
            pos = pos + rng.normal(0.0, 1.0, 3) * pert
        anchors[i] = Anchor(i, pos, "physical", sigma)
    return anchors


def generate_landmarks(truth, config: WorldConfig, rng) -> dict[int, np.ndarray]:
    P = truth.position(np.linspace(0.0, config.duration, 2001))
    lo = P.min(axis=0) - config.landmark_margin
    hi = P.max(axis=0) + config.landmark_margin
    lo[2] = min(lo[2], 0.0)
    X = rng.uniform(lo, hi, size=(config.landmark_count, 3))
    return {i: X[i] for i in range(config.landmark_count)}


def simulate_imu(truth, config: WorldConfig, rng=None) -> ImuStream:
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    t = _sample_times(config.imu_rate, config.duration)
    R = truth.rotation(t)
    g = np.asarray(config.gravity, dtype=float)
    f = np.einsum("nji,nj->ni", R, truth.acceleration(t) - g)
    w = truth.angular_velocity(t)
    n = len(t)
    gyro = w + np.asarray(config.gyro_bias) + config.sigma_gyro * rng.standard_normal((n, 3))
    accel = f + np.asarray(config.accel_bias) + config.sigma_accel * rng.standard_normal((n, 3))
    return ImuStream(t, gyro, accel)


def world_to_camera(R_WI, p_WI, T_IC: Pose):
    """Rotation and translation of T_CW = T_IC^-1 T_WI^-1 for stacked poses."""
    R_CI = T_IC.rotation.T
    t_CI = -R_CI @ T_IC.translation
    R_IW = np.swapaxes(R_WI, -1, -2)
    R_CW = R_CI @ R_IW
    t_CW = -np.einsum("...ij,...j->...i", R_CW, p_WI) + t_CI
    return R_CW, t_CW


def simulate_features(truth, landmarks: dict, config: WorldConfig, calib: Calibration, rng=None) -> FeatureStream:
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    t = _sample_times(config.feature_rate, config.duration)
    ids = np.array(sorted(landmarks), dtype=np.int64)
    X = np.array([landmarks[i] for i in ids]).reshape(-1, 3)
    R_CW, t_CW = world_to_camera(truth.rotation(t), truth.position(t), calib.T_IC)
    Xc = np.einsum("fij,lj->fli", R_CW, X) + t_CW[:, None, :]
    front = Xc[..., 2] > config.min_depth
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = calib.camera.project(Xc)
    visible = front & calib.camera.in_image(uv)
    fi, li = np.nonzero(visible)
    uv_obs = uv[fi, li] + config.sigma_pixel * rng.standard_normal((len(fi), 2))
    obs_ids = ids[li]
    if config.track_length > 0 and len(ids):
        # each track gets a fresh id; id % stride recovers the physical landmark
        phase = rng.uniform(0.0, config.track_length, len(ids))
        track = np.floor((t[fi] + phase[li]) / config.track_length).astype(np.int64)
        obs_ids = obs_ids + track_id_stride(landmarks) * track
    return FeatureStream(t[fi], obs_ids, uv_obs)


def track_id_stride(landmarks: dict) -> int:
    return int(max(landmarks, default=-1)) + 1


def expand_track_landmarks(landmarks: dict, feature_ids) -> dict:
    """Landmark table keyed by track id for every id seen in ``feature_ids``."""
    stride = track_id_stride(landmarks)
    return {int(i): landmarks[int(i) % stride] for i in np.unique(feature_ids)} | dict(landmarks)


def simulate_ranges(truth, anchors: dict, config: WorldConfig, rng=None) -> RangeStream:
    """Time-multiplexed ranging: anchor ``k`` of ``A`` fires at ``(j + k/A)/rate``."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    ids = sorted(a for a in anchors if anchors[a].kind == "physical")
    ts, aid = [], []
    for k, a in enumerate(ids):
        tk = _sample_times(config.range_rate, config.duration, k / (len(ids) * config.range_rate))
        ts.append(tk)
        aid.append(np.full(len(tk), a, dtype=np.int64))
    if not ids:
        e = np.zeros(0)
        return RangeStream(e, np.zeros(0, dtype=np.int64), e.copy(), np.zeros(0, dtype=bool))
    t = np.concatenate(ts)
    a = np.concatenate(aid)
    order = np.argsort(t, kind="stable")
    t, a = t[order], a[order]
    B = np.array([anchors[i].position for i in a])
    r = np.linalg.norm(truth.position(t) - B, axis=1)
    r = r + config.sigma_range * rng.standard_normal(len(t))
    out = rng.random(len(t)) < config.outlier_prob
    lo, hi = config.outlier_bias_range
    r = r + np.where(out, rng.uniform(lo, hi, len(t)), 0.0)
    return RangeStream(t, a, r, out)


def simulate_priors(truth, config: WorldConfig, rng=None) -> PoseStream:
    """VIO-like pose priors: linear drift, random walk and white noise.

    Position error is ``v_d * t + random walk + white``, where ``v_d`` has a
    random direction and magnitude ``prior_drift_rate``; attitude error is a
    yaw drift at ``prior_yaw_drift_rate`` plus white noise. Timestamps follow
    the camera rate.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    t = _sample_times(config.feature_rate, config.duration)
    n = len(t)
    d = rng.standard_normal(3)
    d /= np.linalg.norm(d)
    dt = np.diff(t, prepend=t[0])
    walk = np.cumsum(config.prior_random_walk * np.sqrt(dt)[:, None] * rng.standard_normal((n, 3)), axis=0)
    white_p = config.prior_noise_position * rng.standard_normal((n, 3))
    yaw_sign = 1.0 if rng.random() < 0.5 else -1.0
    rot_err = config.prior_noise_rotation * rng.standard_normal((n, 3))
    rot_err[:, 2] += yaw_sign * config.prior_yaw_drift_rate * t
    P = truth.position(t) + config.prior_drift_rate * np.outer(t, d) + walk + white_p
    R = so3_exp_batch(rot_err) @ truth.rotation(t)
    return PoseStream(t, R, P)


def sample_ground_truth(truth, config: WorldConfig) -> PoseStream:
    t = _sample_times(config.gt_rate, config.duration)
    return PoseStream(t, truth.rotation(t), truth.position(t))


def simulate(config: WorldConfig, calibration: Calibration | None = None) -> Dataset:
    calib = calibration or Calibration(camera=config.camera)
    seq = np.random.SeedSequence(config.seed)
    streams = [np.random.Generator(np.random.PCG64(s)) for s in seq.spawn(6)]
    truth = generate_truth(config)
    anchors = place_anchors(truth, config.anchor_count, config.anchor_height,
                            config.anchor_perturbation, duration=config.duration,
                            sigma=config.sigma_range if config.sigma_range > 1e-9 else 0.10,
                            rng=streams[5])
    landmarks = generate_landmarks(truth, config, streams[0])
    features = simulate_features(truth, landmarks, config, calib, streams[2])
    if config.track_length > 0:
        landmarks = expand_track_landmarks(landmarks, features.landmark_id)
    return Dataset(
        imu=simulate_imu(truth, config, streams[1]),
        features=features,
        ranges=simulate_ranges(truth, anchors, config, streams[3]),
        priors=simulate_priors(truth, config, streams[4]),
        anchors=anchors,
        landmarks=landmarks,
        ground_truth=sample_ground_truth(truth, config),
        calibration=calib,
    )
