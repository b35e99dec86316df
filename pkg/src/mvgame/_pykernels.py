"""Pure numpy kernels. Reference implementation and fallback backend."""
from __future__ import annotations

import numpy as np

from .errors import SimulationDivergedError

RECORD_TERMINAL, RECORD_CONTROLS, RECORD_FULL = 0, 1, 2


def mv(X, M):
    """Row-wise product X @ M.T for a batch X of shape (P, a) and M (b, a)."""
    return np.einsum("pa,ba->pb", X, M)


def follower_update(xhat, u1, u2, dy1, oc1, dt, A, B1, B2, H1, h11, h12, K1, gain, D1, f1, nu1):
    """One Euler step of the follower filter. Returns (new estimate, innovation increment)."""
    jf = oc1 @ f1 if f1.size else 0.0
    dy1c = dy1 - jf + dt * float(nu1 @ f1)
    pred = xhat @ H1 + u1 @ h11 + u2 @ h12
    dv = (dy1c - pred * dt) / K1
    jd = oc1 @ D1 if D1.size else 0.0
    out = (xhat + (mv(xhat, A) + mv(u1, B1) + mv(u2, B2)) * dt
           + dv[:, None] * gain + jd - dt * (nu1 @ D1))
    return out, dv


def leader_update(xchk, u1l, u2, dy2, oc2, dt, A, B1, B2, H2, h2, K2, gain, D2, f2, nu2):
    """One Euler step of the leader filter; ``u1l`` is the leader's model of u1."""
    jf = oc2 @ f2 if f2.size else 0.0
    dy2c = dy2 - jf + dt * float(nu2 @ f2)
    pred = xchk @ H2 + u2 @ h2
    du = (dy2c - pred * dt) / K2
    jd = oc2 @ D2 if D2.size else 0.0
    out = (xchk + (mv(xchk, A) + mv(u1l, B1) + mv(u2, B2)) * dt
           + du[:, None] * gain + jd - dt * (nu2 @ D2))
    return out, du


def _quad(u, R):
    return np.einsum("pi,ij,pj->p", u, R, u)


def run_paths(kin, dW, c1, c2, oc1, oc2, u1_full=None, u1_exo=None, u2_full=None,
              record=RECORD_TERMINAL, path_offset=0):
    """Closed-loop Euler simulation of a batch of paths.

    ``kin`` is a :class:`KernelInputs`; ``dW`` has shape (P, N, 2); ``c1``,
    ``c2`` are true jump counts (P, N, M) and ``oc1``, ``oc2`` the counts
    identified from the observations.
    """
    P, N = dW.shape[0], dW.shape[1]
    n, m, dt = kin.n, kin.m, kin.dt
    X = np.tile(kin.x0, (P, 1))
    Xh = X.copy()
    Xc = X.copy()
    h = np.zeros((P, n))
    Y1 = np.zeros(P)
    Y2 = np.zeros(P)
    run1 = np.zeros(P)
    run2 = np.zeros(P)
    VT = np.zeros(P)
    UT = np.zeros(P)
    qvV = np.zeros(P)
    qvU = np.zeros(P)
    c1f = c1.astype(float)
    c2f = c2.astype(float)
    oc1f = oc1.astype(float)
    oc2f = oc2.astype(float)
    D1, f1, nu1, D2, f2, nu2 = kin.D1, kin.f1, kin.nu1, kin.D2, kin.f2, kin.nu2
    comp_x = dt * (nu1 @ D1 + nu2 @ D2)
    comp_y1 = dt * float(nu1 @ f1)
    comp_y2 = dt * float(nu2 @ f2)

    rec = {}
    if record >= RECORD_CONTROLS:
        for name in ("u1", "u1exo", "u2"):
            rec[name] = np.empty((P, N, m))
    if record >= RECORD_FULL:
        for name in ("X", "Xhat", "Xcheck", "h"):
            rec[name] = np.empty((P, N + 1, n))
        for name in ("Y1", "Y2"):
            rec[name] = np.empty((P, N + 1))
        for name in ("dV", "dU"):
            rec[name] = np.empty((P, N))
        rec["X"][:, 0] = X
        rec["Xhat"][:, 0] = Xh
        rec["Xcheck"][:, 0] = Xc
        rec["h"][:, 0] = h
        rec["Y1"][:, 0] = 0.0
        rec["Y2"][:, 0] = 0.0

    for k in range(N):
        A, B1, B2 = kin.A[k], kin.B1[k], kin.B2[k]
        if u1_exo is not None:
            exo = u1_exo[:, k]
        else:
            exo = mv(Xc, kin.K1c[k]) + mv(h, kin.K1h[k]) + kin.k1o[k]
        u1 = u1_full[:, k] if u1_full is not None else mv(Xh, kin.K1x[k]) + exo
        u1l = mv(Xc, kin.K1x[k]) + exo
        if u2_full is not None:
            u2 = u2_full[:, k]
        else:
            u2 = mv(Xc, kin.K2c[k]) + mv(h, kin.K2h[k]) + kin.k2o[k]
        dw1 = dW[:, k, 0]
        dw2 = dW[:, k, 1]
        j1 = c1f[:, k]
        j2 = c2f[:, k]
        Xn = (X + (mv(X, A) + mv(u1, B1) + mv(u2, B2)) * dt
              + dw1[:, None] * kin.C1[k] + dw2[:, None] * kin.C2[k]
              + j1 @ D1 + j2 @ D2 - comp_x)
        dy1 = ((X @ kin.H1[k] + u1 @ kin.h11[k] + u2 @ kin.h12[k]) * dt + kin.K1[k] * dw1
               + j1 @ f1 - comp_y1)
        dy2 = (X @ kin.H2[k] + u2 @ kin.h2[k]) * dt + kin.K2[k] * dw2 + j2 @ f2 - comp_y2
        Xhn, dv = follower_update(Xh, u1, u2, dy1, oc1f[:, k], dt, A, B1, B2, kin.H1[k],
                                  kin.h11[k], kin.h12[k], kin.K1[k], kin.gain_f[k], D1, f1, nu1)
        Xcn, du = leader_update(Xc, u1l, u2, dy2, oc2f[:, k], dt, A, B1, B2, kin.H2[k],
                                kin.h2[k], kin.K2[k], kin.gain_l[k], D2, f2, nu2)
        hn = h + (mv(Xc, kin.Mc[k]) + mv(h, kin.Mh[k]) + kin.mo[k]) * dt
        run1 += 0.5 * dt * _quad(u1, kin.R1[k])
        run2 += 0.5 * dt * _quad(u2, kin.R2[k])
        VT += dv
        UT += du
        qvV += dv * dv
        qvU += du * du
        Y1 = Y1 + dy1
        Y2 = Y2 + dy2
        bad = ~np.isfinite(Xn).all(axis=1)
        if bad.any():
            p = int(np.argmax(bad))
            raise SimulationDivergedError(
                f"non-finite state on path {path_offset + p} at step {k + 1}",
                path=path_offset + p, step=k + 1)
        X, Xh, Xc, h = Xn, Xhn, Xcn, hn
        if record >= RECORD_CONTROLS:
            rec["u1"][:, k] = u1
            rec["u1exo"][:, k] = exo
            rec["u2"][:, k] = u2
        if record >= RECORD_FULL:
            rec["X"][:, k + 1] = X
            rec["Xhat"][:, k + 1] = Xh
            rec["Xcheck"][:, k + 1] = Xc
            rec["h"][:, k + 1] = h
            rec["Y1"][:, k + 1] = Y1
            rec["Y2"][:, k + 1] = Y2
            rec["dV"][:, k] = dv
            rec["dU"][:, k] = du

    out = {"X_T": X, "Xhat_T": Xh, "Xcheck_T": Xc, "h_T": h, "Y1_T": Y1, "Y2_T": Y2,
           "run1": run1, "run2": run2, "V_T": VT, "U_T": UT, "qv_V": qvV, "qv_U": qvU}
    out.update(rec)
    return out
