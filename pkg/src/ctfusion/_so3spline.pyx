# Compiled cumulative SO(3) spline kernel; contract identical to _so3spline_py.
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, sin, cos, atan2, M_PI

cnp.import_array()

cdef double SMALL_EXP = 1e-8
cdef double SMALL_JAC = 1e-5
cdef double LOG_MARGIN = 1e-6


cdef inline void mm(const double* a, const double* b, double* o) noexcept nogil:
    cdef int i, j
    for i in range(3):
        for j in range(3):
            o[3 * i + j] = a[3 * i] * b[j] + a[3 * i + 1] * b[3 + j] + a[3 * i + 2] * b[6 + j]


cdef inline void mtm(const double* a, const double* b, double* o) noexcept nogil:
    # o = a^T b
    cdef int i, j
    for i in range(3):
        for j in range(3):
            o[3 * i + j] = a[i] * b[j] + a[3 + i] * b[3 + j] + a[6 + i] * b[6 + j]


cdef inline void mmt(const double* a, const double* b, double* o) noexcept nogil:
    # o = a b^T
    cdef int i, j
    for i in range(3):
        for j in range(3):
            o[3 * i + j] = a[3 * i] * b[3 * j] + a[3 * i + 1] * b[3 * j + 1] + a[3 * i + 2] * b[3 * j + 2]


cdef inline void mtv(const double* a, const double* v, double* o) noexcept nogil:
    cdef int i
    for i in range(3):
        o[i] = a[i] * v[0] + a[3 + i] * v[1] + a[6 + i] * v[2]


cdef inline void transpose(const double* a, double* o) noexcept nogil:
    cdef int i, j
    for i in range(3):
        for j in range(3):
            o[3 * i + j] = a[3 * j + i]


cdef inline void set_identity(double* o) noexcept nogil:
    cdef int i
    for i in range(9):
        o[i] = 0.0
    o[0] = 1.0
    o[4] = 1.0
    o[8] = 1.0


cdef inline void hat(const double* v, double* o) noexcept nogil:
    o[0] = 0.0
    o[1] = -v[2]
    o[2] = v[1]
    o[3] = v[2]
    o[4] = 0.0
    o[5] = -v[0]
    o[6] = -v[1]
    o[7] = v[0]
    o[8] = 0.0


cdef inline void compose_series(const double* v, double alpha, double beta, double* o) noexcept nogil:
    # o = I + alpha * hat(v) + beta * hat(v)^2, using hat(v)^2 = v v^T - |v|^2 I
    cdef double th2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
    cdef int i, j
    for i in range(3):
        for j in range(3):
            o[3 * i + j] = beta * v[i] * v[j]
        o[4 * i] += 1.0 - beta * th2
    o[1] -= alpha * v[2]
    o[2] += alpha * v[1]
    o[3] += alpha * v[2]
    o[5] -= alpha * v[0]
    o[6] -= alpha * v[1]
    o[7] += alpha * v[0]


cdef inline void so3exp(const double* v, double* o) noexcept nogil:
    cdef double th2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
    cdef double th = sqrt(th2)
    cdef double a, b
    if th < SMALL_EXP:
        a = 1.0 - th2 / 6.0
        b = 0.5 - th2 / 24.0
    else:
        a = sin(th) / th
        b = (1.0 - cos(th)) / th2
    compose_series(v, a, b, o)


cdef inline int so3log(const double* R, double* o) noexcept nogil:
    cdef double w0 = 0.5 * (R[7] - R[5])
    cdef double w1 = 0.5 * (R[2] - R[6])
    cdef double w2 = 0.5 * (R[3] - R[1])
    cdef double s = sqrt(w0 * w0 + w1 * w1 + w2 * w2)
    cdef double c = 0.5 * (R[0] + R[4] + R[8] - 1.0)
    cdef double th = atan2(s, c)
    cdef double scale
    if th > M_PI - LOG_MARGIN:
        return 1
    if s < SMALL_EXP:
        scale = 1.0 + th * th / 6.0
    else:
        scale = th / s
    o[0] = w0 * scale
    o[1] = w1 * scale
    o[2] = w2 * scale
    return 0


cdef inline void jr(const double* v, double* o) noexcept nogil:
    cdef double th2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
    cdef double th = sqrt(th2)
    cdef double a, b
    if th < SMALL_JAC:
        a = 0.5 - th2 / 24.0
        b = 1.0 / 6.0 - th2 / 120.0
    else:
        a = (1.0 - cos(th)) / th2
        b = (th - sin(th)) / (th2 * th)
    compose_series(v, -a, b, o)


cdef inline void jrinv(const double* v, double* o) noexcept nogil:
    cdef double th2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
    cdef double th = sqrt(th2)
    cdef double c
    if th < SMALL_JAC:
        c = 1.0 / 12.0 + th2 / 720.0
    else:
        c = 1.0 / th2 - (1.0 + cos(th)) / (2.0 * th * sin(th))
    compose_series(v, 0.5, c, o)


def so3_spline_eval(Rc, seg, u, double inv_h, bint jac=False):
    cdef const double[:, :, ::1] Rcv = np.ascontiguousarray(Rc, dtype=np.float64)
    cdef const cnp.intp_t[::1] segv = np.ascontiguousarray(seg, dtype=np.intp)
    cdef const double[::1] uv = np.ascontiguousarray(u, dtype=np.float64)
    cdef Py_ssize_t n = segv.shape[0]
    cdef Py_ssize_t ncp = Rcv.shape[0]

    R_out = np.empty((n, 3, 3))
    W_out = np.empty((n, 3))
    cdef double[:, :, ::1] Ro = R_out
    cdef double[:, ::1] Wo = W_out
    cdef double[:, :, :, ::1] dRo
    cdef double[:, :, :, ::1] dWo
    if jac:
        dR_out = np.empty((n, 4, 3, 3))
        dW_out = np.empty((n, 4, 3, 3))
        dRo = dR_out
        dWo = dW_out

    cdef double Q[4][9]
    cdef double d[4][3]
    cdef double bd[4][3]
    cdef double A[4][9]
    cdef double S[4][9]
    cdef double E[4][9]
    cdef double H[4][9]
    cdef double Da[4][9]
    cdef double Db[4][9]
    cdef double wp[4][3]
    cdef double b[4]
    cdef double db[4]
    cdef double T1[9]
    cdef double T2[9]
    cdef double T3[9]
    cdef double w[3]
    cdef double v[3]
    cdef double uu, u2, u3, cj
    cdef Py_ssize_t s, i, k, m
    cdef int j, bad = 0, oob = 0
    cdef const double* R0

    with nogil:
        for s in range(n):
            i = segv[s]
            if i < 0 or i + 3 >= ncp:
                oob = 1
                break
            uu = uv[s]
            u2 = uu * uu
            u3 = u2 * uu
            b[1] = (5.0 + 3.0 * uu - 3.0 * u2 + u3) / 6.0
            b[2] = (1.0 + 3.0 * uu + 3.0 * u2 - 2.0 * u3) / 6.0
            b[3] = u3 / 6.0
            db[1] = 0.5 * (1.0 - uu) * (1.0 - uu) * inv_h
            db[2] = 0.5 * (1.0 + 2.0 * uu - 2.0 * u2) * inv_h
            db[3] = 0.5 * u2 * inv_h
            R0 = &Rcv[i, 0, 0]
            for j in range(1, 4):
                mtm(&Rcv[i + j - 1, 0, 0], &Rcv[i + j, 0, 0], Q[j])
                if so3log(Q[j], d[j]):
                    bad = 1
                for k in range(3):
                    bd[j][k] = b[j] * d[j][k]
                so3exp(bd[j], A[j])
            if bad:
                break
            # R = R0 A1 A2 A3, suffix products S_j = A_{j+1}..A_3
            set_identity(S[3])
            for k in range(9):
                S[2][k] = A[3][k]
            mm(A[2], A[3], S[1])
            mm(A[1], S[1], S[0])
            mm(R0, S[0], &Ro[s, 0, 0])
            w[0] = 0.0
            w[1] = 0.0
            w[2] = 0.0
            for j in range(1, 4):
                for k in range(3):
                    wp[j][k] = w[k]
                mtv(A[j], wp[j], w)
                for k in range(3):
                    w[k] += db[j] * d[j][k]
            for k in range(3):
                Wo[s, k] = w[k]
            if not jac:
                continue
            for j in range(1, 4):
                jr(bd[j], T1)
                for k in range(9):
                    T1[k] *= b[j]
                mtm(S[j], T1, E[j])
                mtv(A[j], wp[j], v)
                hat(v, T2)
                mm(T2, T1, T3)
                T3[0] += db[j]
                T3[4] += db[j]
                T3[8] += db[j]
                mtm(S[j], T3, H[j])
                jrinv(d[j], Db[j])
                mmt(Db[j], Q[j], Da[j])
                for k in range(9):
                    Da[j][k] = -Da[j][k]
            # control 0
            mm(E[1], Da[1], T1)
            transpose(S[0], T2)
            for k in range(9):
                dRo[s, 0, k // 3, k % 3] = T2[k] + T1[k]
            mm(H[1], Da[1], T1)
            for k in range(9):
                dWo[s, 0, k // 3, k % 3] = T1[k]
            # controls 1, 2
            for m in range(1, 3):
                mm(E[m], Db[m], T1)
                mm(E[m + 1], Da[m + 1], T2)
                for k in range(9):
                    dRo[s, m, k // 3, k % 3] = T1[k] + T2[k]
                mm(H[m], Db[m], T1)
                mm(H[m + 1], Da[m + 1], T2)
                for k in range(9):
                    dWo[s, m, k // 3, k % 3] = T1[k] + T2[k]
            # control 3
            mm(E[3], Db[3], T1)
            mm(H[3], Db[3], T2)
            for k in range(9):
                dRo[s, 3, k // 3, k % 3] = T1[k]
                dWo[s, 3, k // 3, k % 3] = T2[k]

    if oob:
        raise IndexError("segment index outside control-point range")
    if bad:
        from .errors import NearSingularLog
        raise NearSingularLog("consecutive control rotations differ by ~pi")
    if jac:
        return R_out, W_out, dR_out, dW_out
    return R_out, W_out


def accumulate_normal_equations(double[:, ::1] H, double[::1] g, const cnp.int64_t[:, ::1] cols,
                                const double[:, :, ::1] J, const double[:, ::1] r):
    """H += sum_i J_i^T J_i and g += sum_i J_i^T r_i, scattered by ``cols``; -1 skips."""
    cdef Py_ssize_t n = J.shape[0], d = J.shape[1], K = J.shape[2]
    cdef Py_ssize_t i, a, b, k
    cdef cnp.int64_t ca, cb
    cdef double s
    if cols.shape[0] != n or cols.shape[1] != K or r.shape[0] != n or r.shape[1] != d:
        raise ValueError("shape mismatch between cols, J and r")
    with nogil:
        for i in range(n):
            for a in range(K):
                ca = cols[i, a]
                if ca < 0:
                    continue
                s = 0.0
                for k in range(d):
                    s = s + J[i, k, a] * r[i, k]
                g[ca] += s
                for b in range(a, K):
                    cb = cols[i, b]
                    if cb < 0:
                        continue
                    s = 0.0
                    for k in range(d):
                        s = s + J[i, k, a] * J[i, k, b]
                    H[ca, cb] += s
                    if b != a:
                        H[cb, ca] += s


def accumulate_schur_blocks(double[:, ::1] A, double[:, ::1] B, double[:, :, ::1] C, double[::1] g,
                            const cnp.int64_t[:, ::1] cols, const double[:, :, ::1] J,
                            const double[:, ::1] r, Py_ssize_t m):
    """Like ``accumulate_normal_equations`` with ``H`` split at column ``m``.

    ``A`` is the leading ``m x m`` block, ``B`` the ``m x (N - m)`` coupling
    and ``C[l]`` the 3x3 diagonal block of trailing point ``l``. A row block
    coupling two different trailing points raises ``ValueError``.
    """
    cdef Py_ssize_t n = J.shape[0], d = J.shape[1], K = J.shape[2]
    cdef Py_ssize_t i, a, b, k
    cdef cnp.int64_t ca, cb, lo, hi
    cdef double s
    cdef int bad = 0
    if cols.shape[0] != n or cols.shape[1] != K or r.shape[0] != n or r.shape[1] != d:
        raise ValueError("shape mismatch between cols, J and r")
    with nogil:
        for i in range(n):
            for a in range(K):
                ca = cols[i, a]
                if ca < 0:
                    continue
                s = 0.0
                for k in range(d):
                    s = s + J[i, k, a] * r[i, k]
                g[ca] += s
                for b in range(a, K):
                    cb = cols[i, b]
                    if cb < 0:
                        continue
                    s = 0.0
                    for k in range(d):
                        s = s + J[i, k, a] * J[i, k, b]
                    lo = ca if ca < cb else cb
                    hi = cb if ca < cb else ca
                    if hi < m:
                        A[ca, cb] += s
                        if b != a:
                            A[cb, ca] += s
                    elif lo < m:
                        B[lo, hi - m] += s
                    elif (lo - m) // 3 == (hi - m) // 3:
                        C[(lo - m) // 3, (ca - m) % 3, (cb - m) % 3] += s
                        if b != a:
                            C[(lo - m) // 3, (cb - m) % 3, (ca - m) % 3] += s
                    else:
                        bad = 1
    if bad:
        raise ValueError("row block couples two trailing 3-blocks")
