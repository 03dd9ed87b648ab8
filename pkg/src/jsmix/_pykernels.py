"""Pure-numpy reference kernels.

Same signatures and arithmetic order as the compiled ``_ckernels`` module;
vectorised over rows instead of looping. Used when the extension is absent
or ``JSMIX_PURE_PYTHON=1``.
"""
import numpy as np

LOG_ZERO = -1.0e300


def forward_filter(Y, rho, phic, p):
    """Scaled forward pass for every (unique history, group) pair.

    Parameters
    ----------
    Y : uint8 array (U, T)
    rho, phic, p : float arrays (G, T)
        Recruitment, compounded survival and capture probabilities.

    Returns
    -------
    loglik : (U, G) log P(y_u | group g), ``LOG_ZERO`` when impossible
    filt : (U, G, T, 3) normalised filtered state probabilities
    """
    Y = np.asarray(Y, dtype=np.uint8)
    U, T = Y.shape
    G = rho.shape[0]
    loglik = np.zeros((U, G))
    filt = np.zeros((U, G, T, 3))
    dead = np.zeros((U, G), dtype=bool)
    a0 = np.broadcast_to(1.0 - rho[:, 0], (U, G)).copy()
    a1 = np.broadcast_to(rho[:, 0], (U, G)).copy()
    a2 = np.zeros((U, G))
    for t in range(T):
        if t > 0:
            r = rho[:, t]
            f = phic[:, t]
            n0 = a0 * (1.0 - r)
            n1 = a0 * r + a1 * f
            n2 = a1 * (1.0 - f) + a2
            a0, a1, a2 = n0, n1, n2
        caught = Y[:, t:t + 1].astype(bool)
        a0 = np.where(caught, 0.0, a0)
        a1 = np.where(caught, a1 * p[:, t], a1 * (1.0 - p[:, t]))
        a2 = np.where(caught, 0.0, a2)
        s = a0 + a1 + a2
        bad = s <= 0.0
        dead |= bad
        s = np.where(bad, 1.0, s)
        with np.errstate(divide="ignore"):
            loglik += np.log(s)
        a0 = np.where(bad, 1.0 / 3.0, a0 / s)
        a1 = np.where(bad, 1.0 / 3.0, a1 / s)
        a2 = np.where(bad, 1.0 / 3.0, a2 / s)
        filt[:, :, t, 0] = a0
        filt[:, :, t, 1] = a1
        filt[:, :, t, 2] = a2
    loglik[dead] = LOG_ZERO
    return loglik, filt


def backward_sample(filt, uidx, c, rho, phic, u):
    """Draw state paths backwards given filtered probabilities.

    ``u`` holds one uniform per (row, occasion). Returns int8 states (M, T)
    and the number of rows whose conditional had zero mass.
    """
    M, T = u.shape
    states = np.zeros((M, T), dtype=np.int8)
    f = filt[uidx, c]  # (M, T, 3)
    w0, w1, w2 = f[:, T - 1, 0], f[:, T - 1, 1], f[:, T - 1, 2]
    failures = 0
    for t in range(T - 1, -1, -1):
        if t < T - 1:
            nxt = states[:, t + 1]
            r = rho[c, t + 1]
            ph = phic[c, t + 1]
            f0, f1, f2 = f[:, t, 0], f[:, t, 1], f[:, t, 2]
            w0 = np.where(nxt == 0, f0 * (1.0 - r), np.where(nxt == 1, f0 * r, 0.0))
            w1 = np.where(nxt == 1, f1 * ph, np.where(nxt == 2, f1 * (1.0 - ph), 0.0))
            w2 = np.where(nxt == 2, f2, 0.0)
        tot = w0 + w1 + w2
        failures += int(np.count_nonzero(tot <= 0.0))
        x = u[:, t] * tot
        s = np.where(x < w0, 0, np.where(x < w0 + w1, 1, 2))
        # never pick a zero-weight state through round-off at the upper end
        s = np.where((s == 2) & (w2 <= 0.0), np.where(w1 > 0.0, 1, 0), s)
        s = np.where((s == 1) & (w1 <= 0.0), 0, s)
        states[:, t] = s
    return states, failures


def tally(states, c, y, expo, G):
    """Sufficient statistics per (group, occasion).

    Returns int64 array (6, G, T) with rows: at-risk, recruits, alive at
    previous occasion, survivors, exposed, captured.
    """
    M, T = states.shape
    out = np.zeros((6, G, T), dtype=np.int64)
    prev_out = np.zeros((M, T), dtype=bool)
    prev_out[:, 0] = True
    prev_out[:, 1:] = states[:, :-1] == 0
    prev_alive = np.zeros((M, T), dtype=bool)
    prev_alive[:, 1:] = states[:, :-1] == 1
    alive = states == 1
    ex = expo.astype(bool)
    caught = y.astype(bool) & ex
    for g in range(G):
        m = c == g
        out[0, g] = prev_out[m].sum(axis=0)
        out[1, g] = (prev_out[m] & alive[m]).sum(axis=0)
        out[2, g] = prev_alive[m].sum(axis=0)
        out[3, g] = (prev_alive[m] & alive[m]).sum(axis=0)
        out[4, g] = ex[m].sum(axis=0)
        out[5, g] = caught[m].sum(axis=0)
    return out
