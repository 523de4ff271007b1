"""Vectorised numpy implementation of the cumulative SO(3) spline kernel.

Same contract as the compiled ``_so3spline`` extension; selected by
:mod:`ctfusion.kernels` when the extension is unavailable.

For samples ``s`` with segment index ``seg[s]`` and normalised time ``u[s]``::

    R(u) = Rc[i] * Exp(b1 d1) * Exp(b2 d2) * Exp(b3 d3),  dj = Log(Rc[i+j-1]^T Rc[i+j])

with the cumulative cubic basis ``b1, b2, b3``. Jacobians are taken w.r.t. a
right perturbation ``Rc[i+m] <- Rc[i+m] Exp(delta_m)`` and expressed as the
induced right perturbation of ``R`` (``dR``) and the change of body angular
velocity (``dW``).
"""
import numpy as np

from .geometry import (
    hat_batch,
    right_jacobian_batch,
    right_jacobian_inv_batch,
    so3_exp_batch,
    so3_log_batch,
)


def cumulative_basis(u):
    u = np.asarray(u, dtype=float)
    u2 = u * u
    u3 = u2 * u
    b = np.stack([(5.0 + 3.0 * u - 3.0 * u2 + u3) / 6.0,
                  (1.0 + 3.0 * u + 3.0 * u2 - 2.0 * u3) / 6.0,
                  u3 / 6.0], axis=-1)
    db = np.stack([0.5 * (1.0 - u) ** 2,
                   0.5 * (1.0 + 2.0 * u - 2.0 * u2),
                   0.5 * u2], axis=-1)
    return b, db


def _T(M):
    return np.swapaxes(M, -1, -2)


def _mv(M, v):
    return np.einsum("nij,nj->ni", M, v)


def so3_spline_eval(Rc, seg, u, inv_h, jac=False):
    Rc = np.asarray(Rc, dtype=float)
    seg = np.asarray(seg, dtype=np.intp)
    u = np.asarray(u, dtype=float)
    n = seg.shape[0]
    Rk = [Rc[seg + j] for j in range(4)]
    Q = [None] + [_T(Rk[j - 1]) @ Rk[j] for j in range(1, 4)]
    d = [None] + [so3_log_batch(Q[j]) for j in range(1, 4)]
    b, db = cumulative_basis(u)
    bd = [None] + [b[:, j - 1, None] * d[j] for j in range(1, 4)]
    A = [None] + [so3_exp_batch(bd[j]) for j in range(1, 4)]

    R = Rk[0] @ A[1] @ A[2] @ A[3]
    w_prev = [None] * 4
    w = np.zeros((n, 3))
    for j in range(1, 4):
        w_prev[j] = w
        w = _mv(_T(A[j]), w) + (db[:, j - 1, None] * inv_h) * d[j]
    omega = w
    if not jac:
        return R, omega

    eye = np.eye(3)
    S = [None] * 4
    S[3] = np.broadcast_to(eye, (n, 3, 3))
    S[2] = A[3]
    S[1] = A[2] @ A[3]
    S[0] = A[1] @ S[1]
    E = [None] * 4
    H = [None] * 4
    Da = [None] * 4
    Db = [None] * 4
    for j in range(1, 4):
        Jr = right_jacobian_batch(bd[j]) * b[:, j - 1, None, None]
        St = _T(S[j])
        E[j] = St @ Jr
        H[j] = St @ (hat_batch(_mv(_T(A[j]), w_prev[j])) @ Jr
                     + (db[:, j - 1] * inv_h)[:, None, None] * eye)
        Jinv = right_jacobian_inv_batch(d[j])
        Db[j] = Jinv
        Da[j] = -Jinv @ _T(Q[j])

    dR = np.empty((n, 4, 3, 3))
    dW = np.empty((n, 4, 3, 3))
    dR[:, 0] = _T(S[0]) + E[1] @ Da[1]
    dW[:, 0] = H[1] @ Da[1]
    for m in (1, 2):
        dR[:, m] = E[m] @ Db[m] + E[m + 1] @ Da[m + 1]
        dW[:, m] = H[m] @ Db[m] + H[m + 1] @ Da[m + 1]
    dR[:, 3] = E[3] @ Db[3]
    dW[:, 3] = H[3] @ Db[3]
    return R, omega, dR, dW


def accumulate_normal_equations(H, g, cols, J, r):
    """H += sum_i J_i^T J_i and g += sum_i J_i^T r_i, scattered by ``cols``; -1 skips."""
    n, d, K = J.shape
    N = H.shape[0]
    ok = cols >= 0
    Jm = np.where(ok[:, None, :], J, 0.0)
    cc = np.where(ok, cols, 0)
    M = np.matmul(np.swapaxes(Jm, 1, 2), Jm)
    H += np.bincount((cc[:, :, None] * N + cc[:, None, :]).reshape(-1), weights=M.reshape(-1),
                     minlength=N * N).reshape(N, N)
    g += np.bincount(cc.reshape(-1), weights=np.einsum("nda,nd->na", Jm, r).reshape(-1), minlength=N)


def accumulate_schur_blocks(A, B, C, g, cols, J, r, m):
    """Like ``accumulate_normal_equations`` with ``H`` split at column ``m``.

    ``A`` is the leading ``m x m`` block, ``B`` the ``m x (N - m)`` coupling
    and ``C[l]`` the 3x3 diagonal block of trailing point ``l``. A row block
    coupling two different trailing points raises ``ValueError``.
    """
    n, d, K = J.shape
    ok = cols >= 0
    Jm = np.where(ok[:, None, :], J, 0.0)
    cc = np.where(ok, cols, 0)
    M = np.matmul(np.swapaxes(Jm, 1, 2), Jm).reshape(-1)
    ra = np.broadcast_to(cc[:, :, None], (n, K, K)).reshape(-1)
    cb = np.broadcast_to(cc[:, None, :], (n, K, K)).reshape(-1)
    valid = (np.broadcast_to(ok[:, :, None], (n, K, K)) & np.broadcast_to(ok[:, None, :], (n, K, K))).reshape(-1)
    ra, cb, M = ra[valid], cb[valid], M[valid]
    a_m = (ra < m) & (cb < m)
    A += np.bincount(ra[a_m] * m + cb[a_m], weights=M[a_m], minlength=m * m).reshape(m, m)
    nl = B.shape[1]
    b_m = (ra < m) & (cb >= m)
    B += np.bincount(ra[b_m] * nl + (cb[b_m] - m), weights=M[b_m], minlength=m * nl).reshape(m, nl)
    c_m = (ra >= m) & (cb >= m)
    la, lb = (ra[c_m] - m) // 3, (cb[c_m] - m) // 3
    if np.any(la != lb):
        raise ValueError("row block couples two trailing 3-blocks")
    L = C.shape[0]
    C += np.bincount(la * 9 + ((ra[c_m] - m) % 3) * 3 + (cb[c_m] - m) % 3, weights=M[c_m],
                     minlength=L * 9).reshape(L, 3, 3)
    g += np.bincount(cc.reshape(-1), weights=np.einsum("nda,nd->na", Jm, r).reshape(-1), minlength=len(g))
