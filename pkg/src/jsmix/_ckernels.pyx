# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: batched forward filtering, backward sampling, tallies.

Mirrors ``_pykernels`` operation for operation so both paths agree to
round-off and produce identical state draws from the same uniforms.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport log

cnp.import_array()

cdef double LOG_ZERO = -1.0e300


def forward_filter(const unsigned char[:, ::1] Y, const double[:, ::1] rho,
                   const double[:, ::1] phic, const double[:, ::1] p):
    cdef Py_ssize_t U = Y.shape[0], T = Y.shape[1], G = rho.shape[0]
    cdef Py_ssize_t u, g, t
    cdef double a0, a1, a2, n0, n1, n2, s, ll, r, f
    cdef bint dead
    loglik_arr = np.zeros((U, G))
    filt_arr = np.zeros((U, G, T, 3))
    cdef double[:, ::1] loglik = loglik_arr
    cdef double[:, :, :, ::1] filt = filt_arr
    for u in range(U):
        for g in range(G):
            a0 = 1.0 - rho[g, 0]
            a1 = rho[g, 0]
            a2 = 0.0
            ll = 0.0
            dead = False
            for t in range(T):
                if t > 0:
                    r = rho[g, t]
                    f = phic[g, t]
                    n0 = a0 * (1.0 - r)
                    n1 = a0 * r + a1 * f
                    n2 = a1 * (1.0 - f) + a2
                    a0 = n0
                    a1 = n1
                    a2 = n2
                if Y[u, t]:
                    a0 = 0.0
                    a1 = a1 * p[g, t]
                    a2 = 0.0
                else:
                    a1 = a1 * (1.0 - p[g, t])
                s = a0 + a1 + a2
                if s <= 0.0:
                    dead = True
                    a0 = 1.0 / 3.0
                    a1 = 1.0 / 3.0
                    a2 = 1.0 / 3.0
                else:
                    ll += log(s)
                    a0 = a0 / s
                    a1 = a1 / s
                    a2 = a2 / s
                filt[u, g, t, 0] = a0
                filt[u, g, t, 1] = a1
                filt[u, g, t, 2] = a2
            loglik[u, g] = LOG_ZERO if dead else ll
    return loglik_arr, filt_arr


def backward_sample(const double[:, :, :, ::1] filt, const cnp.intp_t[::1] uidx,
                    const cnp.intp_t[::1] c, const double[:, ::1] rho,
                    const double[:, ::1] phic, const double[:, ::1] u):
    cdef Py_ssize_t M = u.shape[0], T = u.shape[1]
    cdef Py_ssize_t i, t, k, g
    cdef double w0, w1, w2, tot, x, r, ph, f0, f1, f2
    cdef int s, nxt
    cdef long failures = 0
    states_arr = np.zeros((M, T), dtype=np.int8)
    cdef signed char[:, ::1] states = states_arr
    for i in range(M):
        k = uidx[i]
        g = c[i]
        nxt = 0
        for t in range(T - 1, -1, -1):
            f0 = filt[k, g, t, 0]
            f1 = filt[k, g, t, 1]
            f2 = filt[k, g, t, 2]
            if t == T - 1:
                w0 = f0
                w1 = f1
                w2 = f2
            else:
                r = rho[g, t + 1]
                ph = phic[g, t + 1]
                if nxt == 0:
                    w0 = f0 * (1.0 - r)
                    w1 = 0.0
                    w2 = 0.0
                elif nxt == 1:
                    w0 = f0 * r
                    w1 = f1 * ph
                    w2 = 0.0
                else:
                    w0 = 0.0
                    w1 = f1 * (1.0 - ph)
                    w2 = f2
            tot = w0 + w1 + w2
            if tot <= 0.0:
                failures += 1
            x = u[i, t] * tot
            if x < w0:
                s = 0
            elif x < w0 + w1:
                s = 1
            else:
                s = 2
            if s == 2 and w2 <= 0.0:
                s = 1 if w1 > 0.0 else 0
            if s == 1 and w1 <= 0.0:
                s = 0
            states[i, t] = s
            nxt = s
    return states_arr, failures


def tally(const signed char[:, ::1] states, const cnp.intp_t[::1] c,
          const unsigned char[:, ::1] y, const unsigned char[:, ::1] expo, int G):
    cdef Py_ssize_t M = states.shape[0], T = states.shape[1]
    cdef Py_ssize_t i, t, g
    cdef int prev, cur
    out_arr = np.zeros((6, G, T), dtype=np.int64)
    cdef cnp.int64_t[:, :, ::1] out = out_arr
    for i in range(M):
        g = c[i]
        prev = 0
        for t in range(T):
            cur = states[i, t]
            if prev == 0:
                out[0, g, t] += 1
                if cur == 1:
                    out[1, g, t] += 1
            elif prev == 1 and t > 0:
                out[2, g, t] += 1
                if cur == 1:
                    out[3, g, t] += 1
            if expo[i, t]:
                out[4, g, t] += 1
                if y[i, t]:
                    out[5, g, t] += 1
            prev = cur
    return out_arr
