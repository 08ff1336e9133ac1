"""Compiled per-ray forward/adjoint loops used by training and depth extraction.

Every ray in a batch is processed independently and writes only to its own
output slots; the trilinear scatter into the shared gradient buffer runs as a
separate serial pass in ray order. Results therefore do not depend on thread
count or scheduling.

Projector parameters are packed in a float64 vector ``prj`` of length 16:
``R^T`` row-major (9), projector center (3), fx, fy, cx, cy.
"""

from __future__ import annotations

import math

import numba
import numpy as np
from numba import njit

SOFTPLUS_CUT = 30.0


def pack_projector(proj) -> np.ndarray:
    k = proj.intrinsics
    return np.concatenate(
        [proj.rotation.T.ravel(), proj.center, [k.fx, k.fy, k.cx, k.cy]]
    ).astype(np.float64)


@njit(cache=True, inline="always")
def _softplus(x):
    if x > SOFTPLUS_CUT:
        return x
    if x < -SOFTPLUS_CUT:
        return math.exp(x)
    return math.log1p(math.exp(x))


@njit(cache=True, inline="always")
def _sigmoid(x):
    return 0.5 * (1.0 + math.tanh(0.5 * x))


@njit(cache=True, inline="always")
def _axis(c, n):
    # lattice coordinate of NDC value c on an axis with n nodes -> (lower index, fraction)
    if c < -1.0:
        c = -1.0
    elif c > 1.0:
        c = 1.0
    g = (c + 1.0) * 0.5 * (n - 1)
    i0 = int(math.floor(g))
    if i0 > n - 2:
        i0 = n - 2
    return i0, g - i0


@njit(cache=True, inline="always")
def _project(prj, X, Y, Z):
    dx = X - prj[9]
    dy = Y - prj[10]
    dz = Z - prj[11]
    px = prj[0] * dx + prj[1] * dy + prj[2] * dz
    py = prj[3] * dx + prj[4] * dy + prj[5] * dz
    pz = prj[6] * dx + prj[7] * dy + prj[8] * dz
    return px, py, -pz


@njit(cache=True, inline="always")
def _texel(h, w, u, v):
    """Bilinear stencil for texel centers at half-integers.

    Returns (inside, u0, v0, fu, fv, du_ok, dv_ok); derivatives vanish where
    the coordinate is clamped to the border texels.
    """
    if not (u >= 0.0 and u < w and v >= 0.0 and v < h):
        return False, 0, 0, 0.0, 0.0, False, False
    gu = u - 0.5
    gv = v - 0.5
    cu = min(max(gu, 0.0), w - 1.0)
    cv = min(max(gv, 0.0), h - 1.0)
    u0 = min(int(math.floor(cu)), w - 2)
    v0 = min(int(math.floor(cv)), h - 2)
    return True, u0, v0, cu - u0, cv - v0, gu > 0.0 and gu < w - 1.0, gv > 0.0 and gv < h - 1.0


@njit(cache=True, inline="always")
def _raw_at(raw, ix, fx, iy, fy, iz, fz):
    acc = 0.0
    for a in range(2):
        wa = fx if a else 1.0 - fx
        for b in range(2):
            wb = fy if b else 1.0 - fy
            for c in range(2):
                wc = fz if c else 1.0 - fz
                acc += wa * wb * wc * raw[ix + a, iy + b, iz + c]
    return acc


@njit(cache=True, inline="always")
def _sample_patterns(pats, u, v, out, base, scale):
    """out[j] = base + scale * P_j(u, v) for all patterns (pats laid out H x W x N)."""
    h, w, n = pats.shape
    inside, u0, v0, fu, fv, _, _ = _texel(h, w, u, v)
    if not inside:
        for j in range(n):
            out[j] = base
        return
    w00 = (1.0 - fu) * (1.0 - fv)
    w01 = fu * (1.0 - fv)
    w10 = (1.0 - fu) * fv
    w11 = fu * fv
    for j in range(n):
        val = (w00 * pats[v0, u0, j] + w01 * pats[v0, u0 + 1, j]
               + w10 * pats[v0 + 1, u0, j] + w11 * pats[v0 + 1, u0 + 1, j])
        out[j] = base + scale * val


@njit(cache=True, nogil=True)
def batch_forward_backward(
    raw, bias, xs, ys, s, jit, r_ndc, t_ndc, near, prj, pats, B, F, I,
    lam_d, lam_s, normalize, inv_mn, inv_m, need_grad, t_stop,
    out_terms, out_gsamp, out_z,
):
    """Per-ray loss terms and d(total loss)/d(raw at sample) for a ray batch.

    ``out_terms[m] = (sum_j photo residual^2, distortion, sum_j surface residual^2)``
    (unnormalized); ``out_gsamp[m, i]`` is the adjoint of the interpolated raw
    value at sample ``i`` and ``out_z[m, i]`` its NDC depth. ``pats`` is
    H x W x N, ``jit[m, i]`` the in-interval sample offset (0.5 = midpoint).
    Marching stops once transmittance falls below ``t_stop`` (0 disables);
    skipped samples get zero weight and zero adjoint.
    """
    M = xs.shape[0]
    K = s.shape[0] - 1
    ph, pw, N = pats.shape
    nx, ny, nz = raw.shape
    w = np.empty(K)
    Tn = np.empty(K)  # transmittance after each sample
    dsig = np.empty(K)
    cols = np.empty((K, N))
    Xw = np.empty((K, 3))
    render = np.empty(N)
    g = np.empty(K)
    for m in range(M):
        ix, fxw = _axis(xs[m], nx)
        iy, fyw = _axis(ys[m], ny)
        render[:] = 0.0
        S0 = 0.0
        S1 = 0.0
        S2 = 0.0
        T = 1.0
        wsum = 0.0
        Ke = K
        for i in range(K):
            if T < t_stop:
                Ke = i
                break
            d = s[i + 1] - s[i]
            z = s[i] + jit[m, i] * d
            out_z[m, i] = z
            iz, fzw = _axis(z, nz)
            r = _raw_at(raw, ix, fxw, iy, fyw, iz, fzw) + bias
            sig = _softplus(r)
            # sigmoid(r) == 1 - exp(-softplus(r))
            dsig[i] = -math.expm1(-sig) * d if r < SOFTPLUS_CUT else d
            keep = math.exp(-sig * d)
            w[i] = T * (1.0 - keep)
            T = T * keep
            Tn[i] = T
            wsum += w[i]
            X = 2.0 * r_ndc * xs[m] / (1.0 - z)
            Y = 2.0 * t_ndc * ys[m] / (1.0 - z)
            Z = 2.0 * near / (z - 1.0)
            Xw[i, 0] = X
            Xw[i, 1] = Y
            Xw[i, 2] = Z
            S0 += w[i] * X
            S1 += w[i] * Y
            S2 += w[i] * Z
            px, py, pd = _project(prj, X, Y, Z)
            ci = cols[i]
            if pd > 0.0:
                _sample_patterns(pats, prj[12] * px / pd + prj[14], prj[13] * py / pd + prj[15],
                                 ci, B[m], F[m])
            else:
                ci[:] = B[m]
            for j in range(N):
                render[j] += w[i] * ci[j]

        photo = 0.0
        for j in range(N):
            e = render[j] - I[m, j]
            photo += e * e

        # distortion loss via prefix sums over interval midpoints
        dist = 0.0
        wb = 0.0
        wmb = 0.0
        for i in range(Ke):
            mid = 0.5 * (s[i] + s[i + 1])
            dist += 2.0 * w[i] * (mid * wb - wmb) + w[i] * w[i] * (s[i + 1] - s[i]) / 3.0
            wb += w[i]
            wmb += w[i] * mid

        # surface point and its color
        if normalize and wsum > 0.0:
            Sx, Sy, Sz = S0 / wsum, S1 / wsum, S2 / wsum
        else:
            Sx, Sy, Sz = S0, S1, S2
        surf = 0.0
        gS0 = 0.0
        gS1 = 0.0
        gS2 = 0.0
        px, py, pd = _project(prj, Sx, Sy, Sz)
        inside = False
        if pd > 0.0:
            su = prj[12] * px / pd + prj[14]
            sv = prj[13] * py / pd + prj[15]
            inside, u0, v0, fu, fv, du_ok, dv_ok = _texel(ph, pw, su, sv)
        gpu = 0.0
        gpv = 0.0
        for j in range(N):
            val = 0.0
            if inside:
                p00 = pats[v0, u0, j]
                p01 = pats[v0, u0 + 1, j]
                p10 = pats[v0 + 1, u0, j]
                p11 = pats[v0 + 1, u0 + 1, j]
                val = (1.0 - fv) * ((1.0 - fu) * p00 + fu * p01) + fv * ((1.0 - fu) * p10 + fu * p11)
            e = B[m] + F[m] * val - I[m, j]
            surf += e * e
            if need_grad and inside:
                coef = 2.0 * e * F[m]
                if du_ok:
                    gpu += coef * ((1.0 - fv) * (p01 - p00) + fv * (p11 - p10))
                if dv_ok:
                    gpv += coef * ((1.0 - fu) * (p10 - p00) + fu * (p11 - p01))

        out_terms[m, 0] = photo
        out_terms[m, 1] = dist
        out_terms[m, 2] = surf
        if not need_grad:
            continue

        if gpu != 0.0 or gpv != 0.0:
            # chain d(u, v)/d(projector-frame p) then p = R^T (x - c)
            gpu *= lam_s * inv_mn
            gpv *= lam_s * inv_mn
            gpx = prj[12] * gpu / pd
            gpy = prj[13] * gpv / pd
            gpz = (prj[12] * px * gpu + prj[13] * py * gpv) / (pd * pd)
            gS0 = gpx * prj[0] + gpy * prj[3] + gpz * prj[6]
            gS1 = gpx * prj[1] + gpy * prj[4] + gpz * prj[7]
            gS2 = gpx * prj[2] + gpy * prj[5] + gpz * prj[8]

        # dL/dw_i
        wtot = wb
        wmtot = wmb
        wb = 0.0
        wmb = 0.0
        for i in range(Ke):
            gi = 0.0
            for j in range(N):
                gi += (render[j] - I[m, j]) * cols[i, j]
            gi *= 2.0 * inv_mn
            if lam_d != 0.0:
                mid = 0.5 * (s[i] + s[i + 1])
                wa = wtot - wb - w[i]
                wma = wmtot - wmb - w[i] * mid
                sabs = mid * wb - wmb + wma - mid * wa
                gi += lam_d * inv_m * (2.0 * sabs + 2.0 * w[i] * (s[i + 1] - s[i]) / 3.0)
                wb += w[i]
                wmb += w[i] * mid
            if normalize:
                if wsum > 0.0:
                    gi += (gS0 * (Xw[i, 0] - Sx) + gS1 * (Xw[i, 1] - Sy) + gS2 * (Xw[i, 2] - Sz)) / wsum
            else:
                gi += gS0 * Xw[i, 0] + gS1 * Xw[i, 1] + gS2 * Xw[i, 2]
            g[i] = gi

        # dL/dtau_k = g_k T_{k+1} - sum_{i>k} g_i w_i, then chain to raw
        for k in range(Ke, K):
            out_gsamp[m, k] = 0.0
        tail = 0.0
        for k in range(Ke - 1, -1, -1):
            out_gsamp[m, k] = (g[k] * Tn[k] - tail) * dsig[k]
            tail += g[k] * w[k]


@njit(cache=True)
def scatter_samples(grad, xs, ys, zs, gsamp):
    """Serial trilinear scatter of per-sample adjoints into ``grad`` (ray order)."""
    nx, ny, nz = grad.shape
    M, K = gsamp.shape
    for m in range(M):
        ix, fx = _axis(xs[m], nx)
        iy, fy = _axis(ys[m], ny)
        for i in range(K):
            gv = gsamp[m, i]
            if gv == 0.0:
                continue
            iz, fz = _axis(zs[m, i], nz)
            for a in range(2):
                wa = fx if a else 1.0 - fx
                for b in range(2):
                    wb = fy if b else 1.0 - fy
                    for c in range(2):
                        wc = fz if c else 1.0 - fz
                        grad[ix + a, iy + b, iz + c] += gv * wa * wb * wc


@njit(cache=True, nogil=True)
def render_depth_rays(raw, bias, xs, ys, s, r_ndc, t_ndc, near, normalize, out_pts, out_acc):
    """Surface point (world, mm) and accumulated weight for each ray, midpoint samples."""
    M = xs.shape[0]
    K = s.shape[0] - 1
    nx, ny, nz = raw.shape
    for m in range(M):
        ix, fxw = _axis(xs[m], nx)
        iy, fyw = _axis(ys[m], ny)
        acc_tau = 0.0
        S0 = 0.0
        S1 = 0.0
        S2 = 0.0
        wsum = 0.0
        for i in range(K):
            d = s[i + 1] - s[i]
            z = 0.5 * (s[i] + s[i + 1])
            iz, fzw = _axis(z, nz)
            sig = _softplus(_raw_at(raw, ix, fxw, iy, fyw, iz, fzw) + bias)
            tau = sig * d
            wi = math.exp(-acc_tau) * (-math.expm1(-tau))
            acc_tau += tau
            wsum += wi
            S0 += wi * 2.0 * r_ndc * xs[m] / (1.0 - z)
            S1 += wi * 2.0 * t_ndc * ys[m] / (1.0 - z)
            S2 += wi * 2.0 * near / (z - 1.0)
        if normalize and wsum > 0.0:
            S0 /= wsum
            S1 /= wsum
            S2 /= wsum
        out_pts[m, 0] = S0
        out_pts[m, 1] = S1
        out_pts[m, 2] = S2
        out_acc[m] = wsum


@njit(cache=True)
def sparse_adam(raw, grad, m1, m2, counts, lr, beta1, beta2, eps):
    """Adam on voxels with nonzero gradient; bias correction uses each voxel's own step count."""
    flat_raw = raw.reshape(-1)
    flat_g = grad.reshape(-1)
    fm1 = m1.reshape(-1)
    fm2 = m2.reshape(-1)
    fc = counts.reshape(-1)
    touched = 0
    for k in range(flat_g.shape[0]):
        g = flat_g[k]
        if g == 0.0:
            continue
        touched += 1
        fc[k] += 1
        n = fc[k]
        fm1[k] = beta1 * fm1[k] + (1.0 - beta1) * g
        fm2[k] = beta2 * fm2[k] + (1.0 - beta2) * g * g
        mhat = fm1[k] / (1.0 - beta1**n)
        vhat = fm2[k] / (1.0 - beta2**n)
        flat_raw[k] -= lr * mhat / (math.sqrt(vhat) + eps)
    return touched


def set_threads(n: int | None) -> None:
    if n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
