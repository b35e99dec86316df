# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled closed-loop path kernel; same arithmetic as mvgame._pykernels.run_paths."""
import numpy as np
cimport numpy as cnp
from libc.math cimport isfinite

from .errors import SimulationDivergedError

cnp.import_array()


cdef inline double _dot(const double* a, const double* b, Py_ssize_t n) noexcept nogil:
    cdef double s = 0.0
    cdef Py_ssize_t i
    for i in range(n):
        s += a[i] * b[i]
    return s


def _c(a, dtype=np.float64):
    return np.ascontiguousarray(a, dtype=dtype)


def _tm(a, dtype, P, N, M):
    return np.ascontiguousarray(np.asarray(a, dtype=dtype).reshape(P, N, M).transpose(1, 0, 2))


def run_paths(kin, dW, c1, c2, oc1, oc2, u1_full=None, u1_exo=None, u2_full=None,
              int record=0, Py_ssize_t path_offset=0):
    cdef Py_ssize_t P = dW.shape[0], N = dW.shape[1]
    cdef Py_ssize_t n = kin.n, m = kin.m
    cdef double dt = kin.dt
    cdef Py_ssize_t M1 = kin.D1.shape[0], M2 = kin.D2.shape[0]

    cdef const double[:, :, ::1] A = _c(kin.A[:N])
    cdef const double[:, :, ::1] B1 = _c(kin.B1[:N])
    cdef const double[:, :, ::1] B2 = _c(kin.B2[:N])
    cdef const double[:, ::1] C1 = _c(kin.C1[:N])
    cdef const double[:, ::1] C2 = _c(kin.C2[:N])
    cdef const double[:, ::1] H1 = _c(kin.H1[:N])
    cdef const double[:, ::1] h11 = _c(kin.h11[:N])
    cdef const double[:, ::1] h12 = _c(kin.h12[:N])
    cdef const double[::1] K1 = _c(kin.K1[:N])
    cdef const double[:, ::1] H2 = _c(kin.H2[:N])
    cdef const double[:, ::1] h2 = _c(kin.h2[:N])
    cdef const double[::1] K2 = _c(kin.K2[:N])
    cdef const double[:, :, ::1] R1 = _c(kin.R1[:N])
    cdef const double[:, :, ::1] R2 = _c(kin.R2[:N])
    cdef const double[:, :, ::1] K1x = _c(kin.K1x[:N])
    cdef const double[:, :, ::1] K1c = _c(kin.K1c[:N])
    cdef const double[:, :, ::1] K1h = _c(kin.K1h[:N])
    cdef const double[:, ::1] k1o = _c(kin.k1o[:N])
    cdef const double[:, :, ::1] K2c = _c(kin.K2c[:N])
    cdef const double[:, :, ::1] K2h = _c(kin.K2h[:N])
    cdef const double[:, ::1] k2o = _c(kin.k2o[:N])
    cdef const double[:, :, ::1] Mc = _c(kin.Mc[:N])
    cdef const double[:, :, ::1] Mh = _c(kin.Mh[:N])
    cdef const double[:, ::1] mo = _c(kin.mo[:N])
    cdef const double[:, ::1] gf = _c(kin.gain_f[:N])
    cdef const double[:, ::1] gl = _c(kin.gain_l[:N])
    D1_arr = _c(kin.D1).reshape(M1, n)
    D2_arr = _c(kin.D2).reshape(M2, n)
    cdef const double[:, ::1] D1 = D1_arr
    cdef const double[:, ::1] D2 = D2_arr
    cdef const double[::1] f1 = _c(kin.f1)
    cdef const double[::1] f2 = _c(kin.f2)
    nu1_arr = _c(kin.nu1)
    nu2_arr = _c(kin.nu2)
    cdef const double[::1] x0 = _c(kin.x0)
    # Time-major copies keep the inner loop over paths contiguous.
    cdef const double[:, :, ::1] W = _tm(dW, np.float64, P, N, 2)
    cdef const int[:, :, ::1] J1 = _tm(c1, np.int32, P, N, M1)
    cdef const int[:, :, ::1] J2 = _tm(c2, np.int32, P, N, M2)
    cdef const int[:, :, ::1] O1 = _tm(oc1, np.int32, P, N, M1)
    cdef const int[:, :, ::1] O2 = _tm(oc2, np.int32, P, N, M2)

    # Compensators are time constant.
    comp_x_arr = dt * (nu1_arr @ D1_arr + nu2_arr @ D2_arr) if (M1 + M2) else np.zeros(n)
    comp_d1_arr = dt * (nu1_arr @ D1_arr) if M1 else np.zeros(n)
    comp_d2_arr = dt * (nu2_arr @ D2_arr) if M2 else np.zeros(n)
    cdef const double[::1] comp_x = _c(comp_x_arr)
    cdef const double[::1] comp_d1 = _c(comp_d1_arr)
    cdef const double[::1] comp_d2 = _c(comp_d2_arr)
    cdef double comp_y1 = dt * float(nu1_arr @ _c(kin.f1)) if M1 else 0.0
    cdef double comp_y2 = dt * float(nu2_arr @ _c(kin.f2)) if M2 else 0.0

    cdef bint has_u1 = u1_full is not None
    cdef bint has_exo = u1_exo is not None
    cdef bint has_u2 = u2_full is not None
    empty = np.zeros((1, 1, 1))
    cdef const double[:, :, ::1] U1F = _tm(u1_full, np.float64, P, N, m) if has_u1 else empty
    cdef const double[:, :, ::1] U1E = _tm(u1_exo, np.float64, P, N, m) if has_exo else empty
    cdef const double[:, :, ::1] U2F = _tm(u2_full, np.float64, P, N, m) if has_u2 else empty

    out = {name: np.zeros((P, n)) for name in ("X_T", "Xhat_T", "Xcheck_T", "h_T")}
    out.update({name: np.zeros(P) for name in ("Y1_T", "Y2_T", "run1", "run2", "V_T", "U_T",
                                               "qv_V", "qv_U")})
    cdef double[::1] oY1 = out["Y1_T"]
    cdef double[::1] oY2 = out["Y2_T"]
    cdef double[::1] orun1 = out["run1"]
    cdef double[::1] orun2 = out["run2"]
    cdef double[::1] oVT = out["V_T"]
    cdef double[::1] oUT = out["U_T"]
    cdef double[::1] oqvV = out["qv_V"]
    cdef double[::1] oqvU = out["qv_U"]

    csz = (1, 1, 1)
    fsz = (1, 1, 1)
    ysz = (1, 1)
    isz = (1, 1)
    if record >= 1:
        csz = (P, N, m)
    if record >= 2:
        fsz = (P, N + 1, n)
        ysz = (P, N + 1)
        isz = (P, N)
    ru1 = np.zeros(csz); rexo = np.zeros(csz); ru2 = np.zeros(csz)
    rX = np.zeros(fsz); rXh = np.zeros(fsz); rXc = np.zeros(fsz); rh = np.zeros(fsz)
    rY1 = np.zeros(ysz); rY2 = np.zeros(ysz); rdV = np.zeros(isz); rdU = np.zeros(isz)
    cdef double[:, :, ::1] vu1 = ru1
    cdef double[:, :, ::1] vexo = rexo
    cdef double[:, :, ::1] vu2 = ru2
    cdef double[:, :, ::1] vX = rX
    cdef double[:, :, ::1] vXh = rXh
    cdef double[:, :, ::1] vXc = rXc
    cdef double[:, :, ::1] vh = rh
    cdef double[:, ::1] vY1 = rY1
    cdef double[:, ::1] vY2 = rY2
    cdef double[:, ::1] vdV = rdV
    cdef double[:, ::1] vdU = rdU

    state = np.zeros((4, P, n))
    state[:3] = np.asarray(kin.x0, dtype=float)
    cdef double[:, :, ::1] st = state
    work = np.zeros((8, max(n, m)))
    cdef double[:, ::1] wk = work
    cdef double* X
    cdef double* Xh
    cdef double* Xc
    cdef double* h
    cdef double* Xn = &wk[0, 0]
    cdef double* Xhn = &wk[1, 0]
    cdef double* Xcn = &wk[2, 0]
    cdef double* hn = &wk[3, 0]
    cdef double* u1 = &wk[4, 0]
    cdef double* u1l = &wk[5, 0]
    cdef double* u2 = &wk[6, 0]
    cdef double* exo = &wk[7, 0]
    cdef Py_ssize_t p, k, i, e
    cdef double dw1, dw2, dy1, dy2, dv, du, s, s2, s3
    cdef Py_ssize_t bad_path = -1, bad_step = -1
    cdef int full = record >= 2, ctl = record >= 1
    cdef const double *pA
    cdef const double *pK1c
    cdef const double *pK1h
    cdef const double *pK1x
    cdef const double *pK2c
    cdef const double *pK2h
    cdef const double *pMc
    cdef const double *pMh
    cdef const double *pB1
    cdef const double *pB2
    cdef const double *pR1
    cdef const double *pR2
    cdef const double *pH1
    cdef const double *ph11
    cdef const double *ph12
    cdef const double *pH2
    cdef const double *ph2
    cdef const double *pk1o
    cdef const double *pk2o
    cdef const double *pmo
    cdef const double *pC1
    cdef const double *pC2
    cdef const double *pgf
    cdef const double *pgl
    cdef const double *pW
    cdef const double *pU1E = NULL
    cdef const double *pU1F = NULL
    cdef const double *pU2F = NULL
    cdef const int *pJ1
    cdef const int *pJ2
    cdef const int *pO1
    cdef const int *pO2

    with nogil:
        if full:
            for p in range(P):
                for i in range(n):
                    vX[p, 0, i] = st[0, p, i]; vXh[p, 0, i] = st[1, p, i]
                    vXc[p, 0, i] = st[2, p, i]; vh[p, 0, i] = 0.0
                vY1[p, 0] = 0.0; vY2[p, 0] = 0.0
        for k in range(N):
            pA = &A[k, 0, 0]
            pK1c = &K1c[k, 0, 0]
            pK1h = &K1h[k, 0, 0]
            pK1x = &K1x[k, 0, 0]
            pK2c = &K2c[k, 0, 0]
            pK2h = &K2h[k, 0, 0]
            pMc = &Mc[k, 0, 0]
            pMh = &Mh[k, 0, 0]
            pB1 = &B1[k, 0, 0]
            pB2 = &B2[k, 0, 0]
            pR1 = &R1[k, 0, 0]
            pR2 = &R2[k, 0, 0]
            pH1 = &H1[k, 0]
            ph11 = &h11[k, 0]
            ph12 = &h12[k, 0]
            pH2 = &H2[k, 0]
            ph2 = &h2[k, 0]
            pk1o = &k1o[k, 0]
            pk2o = &k2o[k, 0]
            pmo = &mo[k, 0]
            pC1 = &C1[k, 0]
            pC2 = &C2[k, 0]
            pgf = &gf[k, 0]
            pgl = &gl[k, 0]
            pW = &W[k, 0, 0]
            pJ1 = &J1[k, 0, 0]
            pJ2 = &J2[k, 0, 0]
            pO1 = &O1[k, 0, 0]
            pO2 = &O2[k, 0, 0]
            if has_exo:
                pU1E = &U1E[k, 0, 0]
            if has_u1:
                pU1F = &U1F[k, 0, 0]
            if has_u2:
                pU2F = &U2F[k, 0, 0]
            for p in range(P):
                X = &st[0, p, 0]; Xh = &st[1, p, 0]; Xc = &st[2, p, 0]; h = &st[3, p, 0]
                # controls
                for i in range(m):
                    if has_exo:
                        exo[i] = pU1E[p * m + i]
                    else:
                        exo[i] = _dot(&pK1c[i * n], Xc, n) + _dot(&pK1h[i * n], h, n) + pk1o[i]
                    if has_u1:
                        u1[i] = pU1F[p * m + i]
                    else:
                        u1[i] = _dot(&pK1x[i * n], Xh, n) + exo[i]
                    u1l[i] = _dot(&pK1x[i * n], Xc, n) + exo[i]
                    if has_u2:
                        u2[i] = pU2F[p * m + i]
                    else:
                        u2[i] = _dot(&pK2c[i * n], Xc, n) + _dot(&pK2h[i * n], h, n) + pk2o[i]
                dw1 = pW[2 * p]
                dw2 = pW[2 * p + 1]
                # observations
                dy1 = (_dot(pH1, X, n) + _dot(ph11, u1, m) + _dot(ph12, u2, m)) * dt + K1[k] * dw1 - comp_y1
                for e in range(M1):
                    dy1 = dy1 + pJ1[p * M1 + e] * f1[e]
                dy2 = (_dot(pH2, X, n) + _dot(ph2, u2, m)) * dt + K2[k] * dw2 - comp_y2
                for e in range(M2):
                    dy2 = dy2 + pJ2[p * M2 + e] * f2[e]
                # innovations from the continuous parts
                s = dy1 + comp_y1
                for e in range(M1):
                    s = s - pO1[p * M1 + e] * f1[e]
                dv = (s - (_dot(pH1, Xh, n) + _dot(ph11, u1, m) + _dot(ph12, u2, m)) * dt) / K1[k]
                s = dy2 + comp_y2
                for e in range(M2):
                    s = s - pO2[p * M2 + e] * f2[e]
                du = (s - (_dot(pH2, Xc, n) + _dot(ph2, u2, m)) * dt) / K2[k]
                for i in range(n):
                    s = _dot(&pA[i * n], X, n) + _dot(&pB1[i * m], u1, m) + _dot(&pB2[i * m], u2, m)
                    Xn[i] = X[i] + s * dt + dw1 * pC1[i] + dw2 * pC2[i] - comp_x[i]
                    for e in range(M1):
                        Xn[i] = Xn[i] + pJ1[p * M1 + e] * D1[e, i]
                    for e in range(M2):
                        Xn[i] = Xn[i] + pJ2[p * M2 + e] * D2[e, i]
                    if not isfinite(Xn[i]) and bad_path < 0:
                        bad_path = p
                        bad_step = k + 1
                    s2 = _dot(&pA[i * n], Xh, n) + _dot(&pB1[i * m], u1, m) + _dot(&pB2[i * m], u2, m)
                    Xhn[i] = Xh[i] + s2 * dt + dv * pgf[i] - comp_d1[i]
                    for e in range(M1):
                        Xhn[i] = Xhn[i] + pO1[p * M1 + e] * D1[e, i]
                    s3 = _dot(&pA[i * n], Xc, n) + _dot(&pB1[i * m], u1l, m) + _dot(&pB2[i * m], u2, m)
                    Xcn[i] = Xc[i] + s3 * dt + du * pgl[i] - comp_d2[i]
                    for e in range(M2):
                        Xcn[i] = Xcn[i] + pO2[p * M2 + e] * D2[e, i]
                    hn[i] = h[i] + (_dot(&pMc[i * n], Xc, n) + _dot(&pMh[i * n], h, n) + pmo[i]) * dt
                # running costs
                s = 0.0
                s2 = 0.0
                for i in range(m):
                    s = s + u1[i] * _dot(&pR1[i * m], u1, m)
                    s2 = s2 + u2[i] * _dot(&pR2[i * m], u2, m)
                orun1[p] += 0.5 * dt * s
                orun2[p] += 0.5 * dt * s2
                oVT[p] += dv
                oUT[p] += du
                oqvV[p] += dv * dv
                oqvU[p] += du * du
                oY1[p] += dy1
                oY2[p] += dy2
                for i in range(n):
                    X[i] = Xn[i]; Xh[i] = Xhn[i]; Xc[i] = Xcn[i]; h[i] = hn[i]
                if ctl:
                    for i in range(m):
                        vu1[p, k, i] = u1[i]; vexo[p, k, i] = exo[i]; vu2[p, k, i] = u2[i]
                if full:
                    for i in range(n):
                        vX[p, k + 1, i] = X[i]; vXh[p, k + 1, i] = Xh[i]
                        vXc[p, k + 1, i] = Xc[i]; vh[p, k + 1, i] = h[i]
                    vY1[p, k + 1] = oY1[p]; vY2[p, k + 1] = oY2[p]
                    vdV[p, k] = dv; vdU[p, k] = du
            if bad_path >= 0:
                break

    if bad_path >= 0:
        raise SimulationDivergedError(
            f"non-finite state on path {path_offset + bad_path} at step {bad_step}",
            path=path_offset + bad_path, step=bad_step)
    out["X_T"][:] = state[0]
    out["Xhat_T"][:] = state[1]
    out["Xcheck_T"][:] = state[2]
    out["h_T"][:] = state[3]
    if record >= 1:
        out.update(u1=ru1, u1exo=rexo, u2=ru2)
    if record >= 2:
        out.update(X=rX, Xhat=rXh, Xcheck=rXc, h=rh, Y1=rY1, Y2=rY2, dV=rdV, dU=rdU)
    return out
