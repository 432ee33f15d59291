# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled fused kernel: composite-loss gradient + AdamW over K steps.

Twin of ``autoft._kernels._fallback.finetune_linear``; the weight vector uses
the canonical term order (cross-entropy, hinge, contrastive, entropy,
confidence-min, l1-norm, l2-norm, l1-init, l2-init).
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport M_PI, cos, exp, fabs, isfinite, log, pow, sqrt

cnp.import_array()

ctypedef cnp.int64_t i64

DEF BETA1 = 0.9
DEF BETA2 = 0.999
DEF EPS = 1e-8


cdef inline double _sign(double x) nogil:
    if x > 0.0:
        return 1.0
    if x < 0.0:
        return -1.0
    return 0.0


def finetune_linear(double[::1] theta, const double[::1] theta0,
                    const double[:, ::1] X, const i64[::1] y,
                    const double[::1] w,
                    double eta, double delta, double tau,
                    const i64[:, ::1] batch_idx, long t0, long t_total,
                    double[::1] m, double[::1] v, long n_classes):
    """Run batch_idx.shape[0] AdamW steps in place; 0 on success, 1 on non-finite."""
    cdef long C = n_classes
    cdef long d = X.shape[1]
    cdef long P = C * d + C
    cdef long K = batch_idx.shape[0]
    cdef long B = batch_idx.shape[1]
    if theta.shape[0] != P or theta0.shape[0] != P or m.shape[0] != P or v.shape[0] != P:
        raise ValueError("parameter/moment vectors do not match C*d + C")
    if w.shape[0] != 9:
        raise ValueError("expected 9 loss weights")
    if t_total < 1 or t0 < 0 or t0 + K > t_total:
        raise ValueError("step window outside the schedule")

    g_arr = np.zeros(P)
    S_arr = np.empty((B, C)); LP_arr = np.empty((B, C)); PR_arr = np.empty((B, C))
    dS_arr = np.empty((B, C)); T_arr = np.empty((B, C)); TL_arr = np.empty((B, C))
    dT_arr = np.empty((B, C))
    Xh_arr = np.empty((B, d)); Mh_arr = np.empty((C, d))
    mn_arr = np.empty(C); kcount_arr = np.zeros(C, dtype=np.int64)
    yb_arr = np.empty(B, dtype=np.int64)

    cdef double[::1] g = g_arr
    cdef double[:, ::1] S = S_arr, LP = LP_arr, PR = PR_arr, dS = dS_arr
    cdef double[:, ::1] T = T_arr, TL = TL_arr, dT = dT_arr
    cdef double[:, ::1] Xh = Xh_arr, Mh = Mh_arr
    cdef double[::1] mn = mn_arr
    cdef i64[::1] kcount = kcount_arr
    cdef i64[::1] yb = yb_arr

    cdef long k, i, c, j, p, t, t1, bi, yi, jb, cs, n_present
    cdef double lr, total, acc, mx, se, lse, val, coef, margin, best
    cdef double H, ps, xn, dot, scale, lossA, lossB, lp, gp, mh, vh, th
    cdef double bc1, bc2, gsum
    cdef bint need_logits = w[0] > 0.0 or w[1] > 0.0 or w[3] > 0.0 or w[4] > 0.0

    for k in range(K):
        t = t0 + k
        lr = eta * 0.5 * (1.0 + cos(M_PI * t / t_total))
        total = 0.0
        for p in range(P):
            g[p] = 0.0
        for i in range(B):
            yb[i] = y[batch_idx[k, i]]

        if need_logits:
            for i in range(B):
                bi = batch_idx[k, i]
                for c in range(C):
                    acc = theta[C * d + c]
                    for j in range(d):
                        acc += theta[c * d + j] * X[bi, j]
                    S[i, c] = acc
            for i in range(B):
                mx = S[i, 0]
                for c in range(1, C):
                    if S[i, c] > mx:
                        mx = S[i, c]
                se = 0.0
                for c in range(C):
                    se += exp(S[i, c] - mx)
                lse = log(se) + mx
                for c in range(C):
                    LP[i, c] = S[i, c] - lse
                    PR[i, c] = exp(LP[i, c])
            for i in range(B):
                for c in range(C):
                    dS[i, c] = 0.0

            if w[0] > 0.0:  # cross-entropy
                val = 0.0
                coef = w[0] / B
                for i in range(B):
                    yi = yb[i]
                    val += -LP[i, yi]
                    for c in range(C):
                        dS[i, c] += coef * PR[i, c]
                    dS[i, yi] -= coef
                total += w[0] * (val / B)

            if w[1] > 0.0:  # hinge (max margin, subgradient 0 at the kink)
                val = 0.0
                coef = w[1] / B
                for i in range(B):
                    yi = yb[i]
                    best = -1e308
                    jb = -1
                    for c in range(C):
                        if c != yi and S[i, c] > best:
                            best = S[i, c]
                            jb = c
                    margin = 1.0 + best - S[i, yi]
                    if margin > 0.0:
                        val += margin
                        dS[i, jb] += coef
                        dS[i, yi] -= coef
                total += w[1] * (val / B)

            if w[3] > 0.0:  # entropy
                val = 0.0
                coef = w[3] / B
                for i in range(B):
                    H = 0.0
                    for c in range(C):
                        H -= PR[i, c] * LP[i, c]
                    val += H
                    for c in range(C):
                        dS[i, c] += coef * (-(PR[i, c] * (LP[i, c] + H)))
                total += w[3] * (val / B)

            if w[4] > 0.0:  # confidence minimization (mean max probability)
                val = 0.0
                coef = w[4] / B
                for i in range(B):
                    cs = 0
                    for c in range(1, C):
                        if S[i, c] > S[i, cs]:
                            cs = c
                    ps = PR[i, cs]
                    val += ps
                    for c in range(C):
                        dS[i, c] += coef * (ps * ((1.0 if c == cs else 0.0) - PR[i, c]))
                total += w[4] * (val / B)

            for i in range(B):
                bi = batch_idx[k, i]
                for c in range(C):
                    if dS[i, c] != 0.0:
                        for j in range(d):
                            g[c * d + j] += dS[i, c] * X[bi, j]
                        g[C * d + c] += dS[i, c]

        if w[2] > 0.0:  # contrastive
            for c in range(C):
                acc = 0.0
                for j in range(d):
                    acc += theta[c * d + j] * theta[c * d + j]
                mn[c] = sqrt(acc)
                if mn[c] == 0.0:
                    return 1
                for j in range(d):
                    Mh[c, j] = theta[c * d + j] / mn[c]
            for i in range(B):
                bi = batch_idx[k, i]
                acc = 0.0
                for j in range(d):
                    acc += X[bi, j] * X[bi, j]
                xn = sqrt(acc)
                if xn == 0.0:
                    return 1
                for j in range(d):
                    Xh[i, j] = X[bi, j] / xn
            for i in range(B):
                for c in range(C):
                    acc = 0.0
                    for j in range(d):
                        acc += Xh[i, j] * Mh[c, j]
                    T[i, c] = acc / tau

            lossA = 0.0
            for i in range(B):
                mx = T[i, 0]
                for c in range(1, C):
                    if T[i, c] > mx:
                        mx = T[i, c]
                se = 0.0
                for c in range(C):
                    se += exp(T[i, c] - mx)
                lse = log(se) + mx
                for c in range(C):
                    TL[i, c] = T[i, c] - lse
                lossA += -TL[i, yb[i]]
                for c in range(C):
                    dT[i, c] = (exp(TL[i, c]) - (1.0 if c == yb[i] else 0.0)) / B
            lossA /= B

            for c in range(C):
                kcount[c] = 0
            for i in range(B):
                kcount[yb[i]] += 1
            n_present = 0
            for c in range(C):
                if kcount[c] > 0:
                    n_present += 1
            lossB = 0.0
            for c in range(C):
                if kcount[c] == 0:
                    continue
                mx = T[0, c]
                for i in range(1, B):
                    if T[i, c] > mx:
                        mx = T[i, c]
                se = 0.0
                for i in range(B):
                    se += exp(T[i, c] - mx)
                lse = log(se) + mx
                val = 0.0
                for i in range(B):
                    lp = T[i, c] - lse
                    if yb[i] == c:
                        val += -lp
                    dT[i, c] += (exp(lp) - ((1.0 / kcount[c]) if yb[i] == c else 0.0)) / n_present
                lossB += val / kcount[c]
            lossB /= n_present

            total += w[2] * (0.5 * (lossA + lossB))
            # dMh[c,j] = sum_i dT[i,c] * Xh[i,j]; project out the radial component
            scale = w[2] * 0.5 / tau
            for c in range(C):
                dot = 0.0
                for j in range(d):
                    acc = 0.0
                    for i in range(B):
                        acc += dT[i, c] * Xh[i, j]
                    dot += acc * Mh[c, j]
                for j in range(d):
                    acc = 0.0
                    for i in range(B):
                        acc += dT[i, c] * Xh[i, j]
                    g[c * d + j] += scale * (acc - dot * Mh[c, j]) / mn[c]

        if w[5] > 0.0:  # l1 norm
            val = 0.0
            coef = w[5] / P
            for p in range(P):
                val += fabs(theta[p])
                g[p] += coef * _sign(theta[p])
            total += w[5] * (val / P)
        if w[6] > 0.0:  # l2 norm
            val = 0.0
            coef = w[6] * 2.0 / P
            for p in range(P):
                val += theta[p] * theta[p]
                g[p] += coef * theta[p]
            total += w[6] * (val / P)
        if w[7] > 0.0:  # l1 distance to init
            val = 0.0
            coef = w[7] / P
            for p in range(P):
                val += fabs(theta[p] - theta0[p])
                g[p] += coef * _sign(theta[p] - theta0[p])
            total += w[7] * (val / P)
        if w[8] > 0.0:  # l2 distance to init
            val = 0.0
            coef = w[8] * 2.0 / P
            for p in range(P):
                val += (theta[p] - theta0[p]) * (theta[p] - theta0[p])
                g[p] += coef * (theta[p] - theta0[p])
            total += w[8] * (val / P)

        gsum = 0.0
        for p in range(P):
            gsum += g[p]
        if not isfinite(total) or not isfinite(gsum):
            return 1

        t1 = t + 1
        bc1 = 1.0 - pow(BETA1, <double> t1)
        bc2 = 1.0 - pow(BETA2, <double> t1)
        for p in range(P):
            gp = g[p]
            m[p] = BETA1 * m[p] + (1.0 - BETA1) * gp
            v[p] = BETA2 * v[p] + (1.0 - BETA2) * gp * gp
            mh = m[p] / bc1
            vh = v[p] / bc2
            th = theta[p]
            theta[p] = th - lr * (mh / (sqrt(vh) + EPS)) - lr * delta * th

    for p in range(P):
        if not isfinite(theta[p]):
            return 1
    return 0
