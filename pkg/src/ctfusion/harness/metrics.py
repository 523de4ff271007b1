"""Trajectory error metrics: rigid alignment, ATE RMSE and gate scoring."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import DegenerateGeometry, InvalidArgument


def align_umeyama(est, gt) -> tuple[np.ndarray, np.ndarray]:
    """Rotation ``R`` and translation ``t`` minimising ``sum |R est + t - gt|^2`` (no scale)."""
    est = np.asarray(est, dtype=float).reshape(-1, 3)
    gt = np.asarray(gt, dtype=float).reshape(-1, 3)
    if len(est) != len(gt):
        raise InvalidArgument("point sets must have the same length")
    if len(est) < 3:
        raise DegenerateGeometry("alignment needs at least three correspondences")
    mu_e, mu_g = est.mean(axis=0), gt.mean(axis=0)
    E, G = est - mu_e, gt - mu_g
    sv = np.linalg.svd(E, compute_uv=False)
    if sv[1] < 1e-9 * max(sv[0], 1.0):
        raise DegenerateGeometry("points are collinear")
    U, _, Vt = np.linalg.svd(G.T @ E)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return R, mu_g - R @ mu_e


def associate(t_est, t_gt, tolerance: float):
    """Index pairs matching each ground-truth time to the nearest estimate within ``tolerance``."""
    t_est = np.asarray(t_est, dtype=float)
    t_gt = np.asarray(t_gt, dtype=float)
    if len(t_est) == 0 or len(t_gt) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    j = np.clip(np.searchsorted(t_est, t_gt), 1, len(t_est) - 1) if len(t_est) > 1 else np.zeros(len(t_gt), np.int64)
    if len(t_est) > 1:
        left = j - 1
        j = np.where(np.abs(t_est[left] - t_gt) <= np.abs(t_est[j] - t_gt), left, j)
    ok = np.abs(t_est[j] - t_gt) <= tolerance
    return j[ok], np.flatnonzero(ok)


@dataclass
class EvalReport:
    ate_rmse: float
    rmse_xyz: list
    alignment_rotation: list
    alignment_translation: list
    n_associated: int
    outlier_precision: float | None = None
    outlier_recall: float | None = None
    outlier_fpr: float | None = None
    va_accepted: int | None = None
    va_rejected: dict | None = None
    window_wall_time: list = field(default_factory=list)
    tags: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.ate_rmse >= 0:
            raise InvalidArgument("ate_rmse must be non-negative")
        for v in (self.outlier_precision, self.outlier_recall, self.outlier_fpr):
            if v is not None and not 0.0 <= v <= 1.0:
                raise InvalidArgument("rates must lie in [0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def ate_rmse(est_t, est_p, gt_t, gt_p, tolerance: float = 0.01, align: bool = True) -> EvalReport:
    """ATE RMSE after nearest-timestamp association and optional rigid alignment."""
    ie, ig = associate(est_t, gt_t, tolerance)
    if len(ie) == 0:
        raise InvalidArgument("no timestamp associations within tolerance")
    E = np.asarray(est_p, dtype=float)[ie]
    G = np.asarray(gt_p, dtype=float)[ig]
    if align:
        R, t = align_umeyama(E, G)
    else:
        R, t = np.eye(3), np.zeros(3)
    err = E @ R.T + t - G
    return EvalReport(
        ate_rmse=float(np.sqrt(np.mean(np.sum(err**2, axis=1)))),
        rmse_xyz=[float(x) for x in np.sqrt(np.mean(err**2, axis=0))],
        alignment_rotation=R.tolist(),
        alignment_translation=t.tolist(),
        n_associated=int(len(ie)),
    )


def median_ate(reports) -> float:
    """Median ATE over repeated runs."""
    vals = [r.ate_rmse if isinstance(r, EvalReport) else float(r) for r in reports]
    if not vals:
        raise InvalidArgument("no reports to aggregate")
    return float(np.median(vals))
