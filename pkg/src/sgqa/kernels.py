"""Compiled inner loops for the fused recurrent tape nodes.

Only the sequential parts live here; everything that can be expressed as
one matrix product over all time steps stays in numpy at the call site.
Gate layout of the stacked input projection ``GX`` is ``[z | r | h]``.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _sigmoid_inplace(x):
    for i in range(x.shape[0]):
        v = x[i]
        if v >= 0:
            x[i] = 1.0 / (1.0 + np.exp(-v))
        else:
            e = np.exp(v)
            x[i] = e / (1.0 + e)


@njit(cache=True)
def _step(gx, h, Uzr, Uh, z, r, hh, out):
    d = h.shape[0]
    a = gx[:2 * d] + Uzr @ h
    _sigmoid_inplace(a)
    z[:] = a[:d]
    r[:] = a[d:]
    pre = gx[2 * d:] + Uh @ (r * h)
    hh[:] = np.tanh(pre)
    out[:] = (1.0 - z) * h + z * hh


@njit(cache=True)
def _step_backward(dh_new, hp, z, r, hh, UzrT, UhT, dgx):
    d = hp.shape[0]
    dz = dh_new * (hh - hp)
    dah = dh_new * z * (1.0 - hh * hh)
    dh = dh_new * (1.0 - z)
    drh = UhT @ dah
    dh += drh * r
    dgx[:d] = dz * z * (1.0 - z)
    dgx[d:2 * d] = drh * hp * r * (1.0 - r)
    dgx[2 * d:] = dah
    dh += UzrT @ dgx[:2 * d]
    return dh


@njit(cache=True)
def gru_forward(GX, Uzr, Uh, reverse):
    """Hidden states (T x d) plus per-step caches (z, r, hh, h_prev)."""
    n = GX.shape[0]
    d = Uh.shape[0]
    H = np.empty((n, d))
    Z = np.empty((n, d))
    R = np.empty((n, d))
    HH = np.empty((n, d))
    HP = np.empty((n, d))
    h = np.zeros(d)
    for k in range(n):
        t = n - 1 - k if reverse else k
        HP[t] = h
        _step(GX[t], h, Uzr, Uh, Z[t], R[t], HH[t], H[t])
        h = H[t].copy()
    return H, Z, R, HH, HP


@njit(cache=True)
def gru_backward(G, Uzr, Uh, reverse, Z, R, HH, HP):
    """Gradient with respect to the stacked input projections, T x 3d."""
    n = G.shape[0]
    d = Uh.shape[0]
    UzrT = np.ascontiguousarray(Uzr.T)
    UhT = np.ascontiguousarray(Uh.T)
    dGX = np.empty((n, 3 * d))
    dh = np.zeros(d)
    for k in range(n):
        t = k if reverse else n - 1 - k
        dh = _step_backward(G[t] + dh, HP[t], Z[t], R[t], HH[t], UzrT, UhT, dGX[t])
    return dGX


@njit(cache=True)
def match_forward(PU, GXU, Q, Wr, Wc, Uzr, Uh, reverse):
    """Recurrent attention over question rows ``Q`` feeding a GRU.

    a_t = PU[t] + Wr h;  alpha_t = softmax(Q a_t);  c_t = alpha_t Q;
    gx_t = GXU[t] + Wc c_t;  h_t = GRU(gx_t, h).
    """
    n = PU.shape[0]
    nq = Q.shape[0]
    w = PU.shape[1]
    d = Uh.shape[0]
    H = np.empty((n, d))
    A = np.empty((n, nq))
    AV = np.empty((n, w))
    C = np.empty((n, w))
    Z = np.empty((n, d))
    R = np.empty((n, d))
    HH = np.empty((n, d))
    HP = np.empty((n, d))
    h = np.zeros(d)
    for k in range(n):
        t = n - 1 - k if reverse else k
        a = PU[t] + Wr @ h
        s = Q @ a
        e = np.exp(s - s.max())
        alpha = e / e.sum()
        c = alpha @ Q
        HP[t] = h
        _step(GXU[t] + Wc @ c, h, Uzr, Uh, Z[t], R[t], HH[t], H[t])
        h = H[t].copy()
        A[t] = alpha
        AV[t] = a
        C[t] = c
    return H, A, AV, C, Z, R, HH, HP


@njit(cache=True)
def match_backward(G, Q, Wr, Wc, Uzr, Uh, reverse, A, Z, R, HH, HP):
    """Per-step gradients: (dGX, dA pre-attention vector, d scores, d summary)."""
    n = G.shape[0]
    nq = Q.shape[0]
    w = Q.shape[1]
    d = Uh.shape[0]
    dGX = np.empty((n, 3 * d))
    DA = np.empty((n, w))
    DS = np.empty((n, nq))
    DC = np.empty((n, w))
    UzrT = np.ascontiguousarray(Uzr.T)
    UhT = np.ascontiguousarray(Uh.T)
    WcT = np.ascontiguousarray(Wc.T)
    WrT = np.ascontiguousarray(Wr.T)
    QT = np.ascontiguousarray(Q.T)
    dh = np.zeros(d)
    for k in range(n):
        t = k if reverse else n - 1 - k
        dh = _step_backward(G[t] + dh, HP[t], Z[t], R[t], HH[t], UzrT, UhT, dGX[t])
        dc = WcT @ dGX[t]
        alpha = A[t]
        dalpha = Q @ dc
        ds = alpha * (dalpha - np.dot(alpha, dalpha))
        da = QT @ ds
        dh += WrT @ da
        DA[t] = da
        DS[t] = ds
        DC[t] = dc
    return dGX, DA, DS, DC
