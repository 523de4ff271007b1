"""Range preprocessing: robust innovation gating and virtual-anchor construction.

The gate works per anchor on short windows of half-width ``delta``: the
innovation of each range against a predicted position is normalised by the
window's median and median absolute deviation, and anything beyond ``gamma``
is flagged. Surviving ranges can be summarised into a virtual anchor, a
static beacon fitted by weighted least squares and kept only if it adds
enough information and angular diversity to the anchors already in use.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceFailure, DegenerateGeometry, InvalidArgument
from .sim import Anchor

_GEOM_TOL = 1e-12


@dataclass(frozen=True)
class RejectionParams:
    delta: float = 0.5
    gamma: float = 3.5
    epsilon: float = 1e-3

    def __post_init__(self):
        if not (self.delta > 0 and self.gamma > 0 and self.epsilon > 0):
            raise InvalidArgument("delta, gamma and epsilon must be positive")


@dataclass(frozen=True)
class VaParams:
    tau_lambda: float = 0.05
    theta_0: float = 15.0  # degrees
    sigma_r: float = 0.10
    sigma_va: float = 0.20
    c: float | None = None  # weighting constant, defaults to 3 sigma_r
    epsilon: float = 1e-3
    min_samples: int = 4
    max_iterations: int = 30

    def __post_init__(self):
        if not (self.tau_lambda > 0 and self.theta_0 > 0 and self.sigma_r > 0 and self.sigma_va > 0):
            raise InvalidArgument("virtual-anchor parameters must be positive")
        if self.sigma_va < self.sigma_r:
            raise InvalidArgument("sigma_va must be at least sigma_r")
        if self.c is not None and not self.c > 0:
            raise InvalidArgument("weighting constant c must be positive")

    @property
    def weight_constant(self) -> float:
        return 3.0 * self.sigma_r if self.c is None else self.c


def _directions(p, b):
    d = np.asarray(p, dtype=float) - np.asarray(b, dtype=float)
    n = np.linalg.norm(d, axis=-1)
    if np.any(n < _GEOM_TOL):
        raise DegenerateGeometry("position coincides with anchor")
    return d, n


def innovation(p_pr, b, r):
    """Predicted range ``|p_pr - b|`` and innovation ``r - predicted``; broadcasts."""
    _, rhat = _directions(p_pr, b)
    nu = np.asarray(r, dtype=float) - rhat
    if np.ndim(rhat) == 0:
        return float(rhat), float(nu)
    return rhat, nu


def range_jacobian(p, b) -> np.ndarray:
    """Unit row ``(p - b)^T / |p - b|``; stacked rows for stacked inputs."""
    d, n = _directions(p, b)
    return d / n[..., None] if np.ndim(n) else d / n


def robust_zscores(nu, epsilon: float) -> np.ndarray:
    nu = np.asarray(nu, dtype=float)
    if nu.size == 0:
        raise InvalidArgument("empty window")
    med = np.median(nu)
    dev = np.abs(nu - med)
    return dev / (np.median(dev) + epsilon)


@dataclass
class RejectionResult:
    inlier: np.ndarray
    z: np.ndarray
    innovation: np.ndarray


def reject_outliers(times, ranges, anchor_position, predictions, params: RejectionParams) -> RejectionResult:
    """Gate one anchor's ranges from a single window.

    ``predictions`` is either an (n, 3) array aligned with ``times`` or a
    callable mapping times to positions.
    """
    times = np.asarray(times, dtype=float)
    ranges = np.asarray(ranges, dtype=float)
    if times.size == 0:
        raise InvalidArgument("empty window")
    P = predictions(times) if callable(predictions) else np.asarray(predictions, dtype=float)
    _, nu = innovation(P.reshape(-1, 3), anchor_position, ranges)
    z = robust_zscores(nu, params.epsilon)
    return RejectionResult(z <= params.gamma, z, nu)


def window_centres(t_start: float, t_end: float, delta: float) -> np.ndarray:
    n = int(np.floor((t_end - t_start) / delta + 1e-9)) + 1
    return t_start + delta * np.arange(n)


def label_ranges(times, anchor_ids, ranges, anchors: dict, predictions, params: RejectionParams,
                 t_start: float | None = None, t_end: float | None = None) -> RejectionResult:
    """Tile each anchor's stream with windows ``[c - delta, c + delta]``, stride ``delta``.

    A measurement covered by several windows takes its label from the one
    whose centre is nearest.
    """
    times = np.asarray(times, dtype=float)
    anchor_ids = np.asarray(anchor_ids)
    ranges = np.asarray(ranges, dtype=float)
    n = len(times)
    inlier = np.zeros(n, dtype=bool)
    z = np.zeros(n)
    nu = np.zeros(n)
    if n == 0:
        return RejectionResult(inlier, z, nu)
    t_start = times.min() if t_start is None else t_start
    t_end = times.max() if t_end is None else t_end
    P = predictions(times) if callable(predictions) else np.asarray(predictions, dtype=float)
    d = params.delta
    nearest = np.rint((times - t_start) / d).astype(np.int64)
    for a in np.unique(anchor_ids):
        sel = np.flatnonzero(anchor_ids == a)
        ta = times[sel]
        b = anchors[int(a)].position
        for j in np.unique(nearest[sel]):
            c = t_start + j * d
            w = sel[(ta >= c - d - 1e-12) & (ta <= c + d + 1e-12)]
            res = reject_outliers(times[w], ranges[w], b, P[w], params)
            own = nearest[w] == j
            inlier[w[own]] = res.inlier[own]
            z[w[own]] = res.z[own]
            nu[w[own]] = res.innovation[own]
    return RejectionResult(inlier, z, nu)


@dataclass
class VaFit:
    position: np.ndarray
    rms: float
    iterations: int


def _check_spread(P):
    if len(P) < 2:
        raise DegenerateGeometry("need at least two distinct positions")
    s = np.linalg.svd(P - P.mean(axis=0), compute_uv=False)
    if s[0] < 1e-9 or s[1] < 1e-6 * max(1.0, s[0]):
        raise DegenerateGeometry("sample positions are collinear")


def _va_cost(P, r, w, b):
    return float(np.sum(w * (r - np.linalg.norm(P - b, axis=1)) ** 2))


def fit_virtual_anchor(positions, ranges, innovations, params: VaParams, initial_guess) -> VaFit:
    """Weighted Gauss-Newton fit of a static beacon to (position, range) pairs.

    Weights are ``min(1, c / (|innovation| + epsilon))`` and stay fixed for the
    solve; each step is backtracked until the weighted cost decreases.
    """
    P = np.asarray(positions, dtype=float).reshape(-1, 3)
    r = np.asarray(ranges, dtype=float).reshape(-1)
    nu = np.asarray(innovations, dtype=float).reshape(-1)
    if len(P) < params.min_samples:
        raise InvalidArgument(f"need at least {params.min_samples} samples, got {len(P)}")
    if not (len(r) == len(P) == len(nu)):
        raise InvalidArgument("positions, ranges and innovations must align")
    _check_spread(P)
    w = np.minimum(1.0, params.weight_constant / (np.abs(nu) + params.epsilon))
    b = np.asarray(initial_guess, dtype=float).reshape(3).copy()
    cost = _va_cost(P, r, w, b)
    for it in range(1, params.max_iterations + 1):
        d = b - P
        rhat = np.linalg.norm(d, axis=1)
        if np.any(rhat < _GEOM_TOL):
            raise DegenerateGeometry("anchor estimate coincides with a sample position")
        J = d / rhat[:, None]  # derivative of |p - b| w.r.t. b
        e = r - rhat
        H = J.T @ (w[:, None] * J)
        g = J.T @ (w * e)
        ev = np.linalg.eigvalsh(H)
        if ev[0] <= 1e-12 * max(ev[-1], 1e-300):
            raise DegenerateGeometry("range geometry does not constrain the anchor")
        step = np.linalg.solve(H, g)
        alpha = 1.0
        while True:
            cand = b + alpha * step
            new_cost = _va_cost(P, r, w, cand)
            if new_cost <= cost:
                break
            alpha *= 0.5
            if alpha < 1e-3:
                # no descent left along the Gauss-Newton direction
                return VaFit(b, float(np.sqrt(cost / w.sum())), it)
        b, old = cand, cost
        cost = new_cost
        if np.linalg.norm(alpha * step) < 1e-8 * (1.0 + np.linalg.norm(b)) or old - cost <= 1e-12 * max(old, 1e-300):
            return VaFit(b, float(np.sqrt(cost / w.sum())), it)
    raise ConvergenceFailure(f"virtual-anchor fit did not converge in {params.max_iterations} iterations")


def fisher_information(anchor_positions, window_positions, sigma_r: float) -> np.ndarray:
    """Sum over positions and anchors of ``J^T J / sigma_r^2``."""
    if not sigma_r > 0:
        raise InvalidArgument("sigma_r must be positive")
    B = np.asarray(anchor_positions, dtype=float).reshape(-1, 3)
    P = np.asarray(window_positions, dtype=float).reshape(-1, 3)
    if len(B) == 0 or len(P) == 0:
        return np.zeros((3, 3))
    U = range_jacobian(P[:, None, :], B[None, :, :]).reshape(-1, 3)
    F = U.T @ U / sigma_r**2
    return 0.5 * (F + F.T)


@dataclass
class Screening:
    accepted: bool
    reason: str | None
    lambda_min: float
    theta_min: float | None  # degrees; None when there is nothing to compare against


def screen_candidate(candidate, existing_anchors, window_positions, params: VaParams) -> Screening:
    """Information gain and angular-diversity tests for a candidate beacon.

    When both tests fail the information reason is reported.
    """
    P = np.asarray(window_positions, dtype=float).reshape(-1, 3)
    if len(P) == 0:
        raise InvalidArgument("empty window")
    b = np.asarray(candidate, dtype=float).reshape(3)
    B = np.asarray(existing_anchors, dtype=float).reshape(-1, 3)
    dF = fisher_information(np.vstack([B, b]), P, params.sigma_r) - fisher_information(B, P, params.sigma_r)
    lam = float(np.linalg.eigvalsh(0.5 * (dF + dF.T))[0])
    theta = None
    if len(B):
        pbar = P.mean(axis=0)
        u = b - pbar
        V = B - pbar
        nu_, nv = np.linalg.norm(u), np.linalg.norm(V, axis=1)
        if nu_ < _GEOM_TOL or np.any(nv < _GEOM_TOL):
            raise DegenerateGeometry("anchor coincides with the window's mean position")
        c = np.clip(V @ u / (nv * nu_), -1.0, 1.0)
        theta = float(np.degrees(np.arccos(c)).min())
    if not lam > params.tau_lambda:
        return Screening(False, "information", lam, theta)
    if theta is not None and theta < params.theta_0:
        return Screening(False, "angular", lam, theta)
    return Screening(True, None, lam, theta)


@dataclass(frozen=True)
class VirtualAnchor:
    """An accepted beacon plus the parent anchor and time span it summarises."""

    anchor: Anchor
    parent: int
    t_start: float
    t_end: float


@dataclass
class VaLog:
    candidates: int = 0
    accepted: int = 0
    rejected: dict = field(default_factory=lambda: {"information": 0, "angular": 0, "degenerate": 0, "samples": 0, "convergence": 0})

    def merge(self, other: "VaLog"):
        self.candidates += other.candidates
        self.accepted += other.accepted
        for k, v in other.rejected.items():
            self.rejected[k] = self.rejected.get(k, 0) + v

    def as_dict(self):
        return {"candidates": self.candidates, "accepted": self.accepted, "rejected": dict(self.rejected)}


def build_virtual_anchors(times, anchor_ids, ranges, inlier, innovations, anchors: dict, predictions,
                          rejection: RejectionParams, params: VaParams, centres=None,
                          next_id: int = 1000, existing=()) -> tuple[list[VirtualAnchor], VaLog]:
    """Fit and screen one candidate per (physical anchor, window) from inlier ranges.

    ``centres`` selects which windows ``[c - delta, c + delta]`` to process
    (default: tile the stream). The existing set used for screening holds the
    other physical anchors plus virtual anchors accepted so far; the parent
    anchor is excluded since every candidate is fitted from its ranges.
    """
    times = np.asarray(times, dtype=float)
    anchor_ids = np.asarray(anchor_ids)
    ranges = np.asarray(ranges, dtype=float)
    inlier = np.asarray(inlier, dtype=bool)
    innovations = np.asarray(innovations, dtype=float)
    log = VaLog()
    out: list[VirtualAnchor] = []
    if len(times) == 0 or not inlier.any():
        return out, log
    d = rejection.delta
    if centres is None:
        centres = window_centres(times.min(), times.max(), d)
    physical = sorted(k for k, a in anchors.items() if a.kind == "physical")
    accepted_pos = [va.anchor.position for va in existing]
    vid = next_id
    for c in centres:
        in_win = inlier & (times >= c - d - 1e-12) & (times <= c + d + 1e-12)
        for a in physical:
            sel = np.flatnonzero(in_win & (anchor_ids == a))
            if len(sel) == 0:
                continue
            log.candidates += 1
            if len(sel) < params.min_samples:
                log.rejected["samples"] += 1
                continue
            P = predictions(times[sel]) if callable(predictions) else np.asarray(predictions)[sel]
            try:
                fit = fit_virtual_anchor(P, ranges[sel], innovations[sel], params, anchors[a].position)
                others = [anchors[k].position for k in physical if k != a] + accepted_pos
                scr = screen_candidate(fit.position, np.array(others).reshape(-1, 3), P, params)
            except DegenerateGeometry:
                log.rejected["degenerate"] += 1
                continue
            except ConvergenceFailure:
                log.rejected["convergence"] += 1
                continue
            if not scr.accepted:
                log.rejected[scr.reason] += 1
                continue
            va = VirtualAnchor(Anchor(vid, fit.position.copy(), "virtual", params.sigma_va), a,
                               float(times[sel].min()), float(times[sel].max()))
            out.append(va)
            accepted_pos.append(va.anchor.position)
            log.accepted += 1
            vid += 1
    return out, log
