"""NumPy implementations of the hot kernels.

Same signatures and semantics as the compiled ``_ckernels`` module. Width
convolutions are lowered to a banded (Toeplitz) matrix product so BLAS does
the heavy lifting; width-1 kernels contract directly with einsum.
"""

import numpy as np


def _toeplitz_index(opg, cpg, kw, ow, wp):
    o = np.arange(opg)[:, None, None, None]
    c = np.arange(cpg)[None, :, None, None]
    k = np.arange(kw)[None, None, :, None]
    t = np.arange(ow)[None, None, None, :]
    rows = np.broadcast_to(c * wp + t + k, (opg, cpg, kw, ow))
    cols = np.broadcast_to(o * ow + t, (opg, cpg, kw, ow))
    return rows, cols


def _rows(x, oh, kh):
    # (B, C, H, W) slab -> (B*OH, C*W)
    b, c, _, w = x.shape
    return x[:, :, kh:kh + oh, :].transpose(0, 2, 1, 3).reshape(b * oh, c * w)


def conv2d_forward(xp, w, groups):
    B, C, HP, WP = xp.shape
    O, CPG, KH, KW = w.shape
    OH, OW = HP - KH + 1, WP - KW + 1
    OPG = O // groups
    out = np.zeros((B, O, OH, OW))
    if KW == 1:
        for g in range(groups):
            xs = xp[:, g * CPG:(g + 1) * CPG]
            ws = w[g * OPG:(g + 1) * OPG, :, :, 0]
            acc = out[:, g * OPG:(g + 1) * OPG]
            for kh in range(KH):
                acc += np.einsum("bchw,oc->bohw", xs[:, :, kh:kh + OH, :], ws[:, :, kh])
        return out
    rows, cols = _toeplitz_index(OPG, CPG, KW, OW, WP)
    for g in range(groups):
        xs = xp[:, g * CPG:(g + 1) * CPG]
        for kh in range(KH):
            T = np.zeros((CPG * WP, OPG * OW))
            T[rows, cols] = w[g * OPG:(g + 1) * OPG, :, kh, :, None]
            y = _rows(xs, OH, kh) @ T
            out[:, g * OPG:(g + 1) * OPG] += y.reshape(B, OH, OPG, OW).transpose(0, 2, 1, 3)
    return out


def conv2d_grad_input(g, w, groups, HP, WP):
    B, O, OH, OW = g.shape
    _, CPG, KH, KW = w.shape
    OPG = O // groups
    gx = np.zeros((B, CPG * groups, HP, WP))
    if KW == 1:
        for grp in range(groups):
            gs = g[:, grp * OPG:(grp + 1) * OPG]
            ws = w[grp * OPG:(grp + 1) * OPG, :, :, 0]
            acc = gx[:, grp * CPG:(grp + 1) * CPG]
            for kh in range(KH):
                acc[:, :, kh:kh + OH, :] += np.einsum("bohw,oc->bchw", gs, ws[:, :, kh])
        return gx
    rows, cols = _toeplitz_index(OPG, CPG, KW, OW, WP)
    for grp in range(groups):
        gs = _rows(g[:, grp * OPG:(grp + 1) * OPG], OH, 0)
        acc = gx[:, grp * CPG:(grp + 1) * CPG]
        for kh in range(KH):
            T = np.zeros((CPG * WP, OPG * OW))
            T[rows, cols] = w[grp * OPG:(grp + 1) * OPG, :, kh, :, None]
            y = (gs @ T.T).reshape(B, OH, CPG, WP).transpose(0, 2, 1, 3)
            acc[:, :, kh:kh + OH, :] += y
    return gx


def conv2d_grad_weight(g, xp, groups, KH, KW):
    B, O, OH, OW = g.shape
    C, WP = xp.shape[1], xp.shape[3]
    CPG, OPG = C // groups, O // groups
    gw = np.zeros((O, CPG, KH, KW))
    if KW == 1:
        for grp in range(groups):
            gs = g[:, grp * OPG:(grp + 1) * OPG]
            xs = xp[:, grp * CPG:(grp + 1) * CPG]
            for kh in range(KH):
                gw[grp * OPG:(grp + 1) * OPG, :, kh, 0] = np.einsum(
                    "bohw,bchw->oc", gs, xs[:, :, kh:kh + OH, :])
        return gw
    rows, cols = _toeplitz_index(OPG, CPG, KW, OW, WP)
    for grp in range(groups):
        gs = _rows(g[:, grp * OPG:(grp + 1) * OPG], OH, 0)
        xs = xp[:, grp * CPG:(grp + 1) * CPG]
        for kh in range(KH):
            GT = _rows(xs, OH, kh).T @ gs
            gw[grp * OPG:(grp + 1) * OPG, :, kh, :] = GT[rows, cols].sum(axis=-1)
    return gw


def batchnorm_forward(x, gamma, beta, eps):
    mean = x.mean(axis=(0, 2))
    var = x.var(axis=(0, 2))
    xhat = (x - mean[None, :, None]) / np.sqrt(var + eps)[None, :, None]
    y = gamma[None, :, None] * xhat + beta[None, :, None]
    return y, xhat, mean, var


def batchnorm_backward(g, xhat, gamma, var, eps):
    n = g.shape[0] * g.shape[2]
    dbeta = g.sum(axis=(0, 2))
    dgamma = (g * xhat).sum(axis=(0, 2))
    k = gamma / np.sqrt(var + eps)
    dx = k[None, :, None] * (g - (dbeta / n)[None, :, None] - xhat * (dgamma / n)[None, :, None])
    return dx, dgamma, dbeta
