"""Compiled inner loops.

Everything here works on plain arrays so the numba signatures stay simple.
Neighbor tables use -1 padding; ``counts`` holds the valid prefix length.
"""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def _chol_inplace(A, k):
    # Lower Cholesky of the leading k x k block; returns False if not PD.
    for c in range(k):
        s = A[c, c]
        for p in range(c):
            s -= A[c, p] * A[c, p]
        if s <= 0.0 or not np.isfinite(s):
            return False
        d = math.sqrt(s)
        A[c, c] = d
        for r in range(c + 1, k):
            s = A[r, c]
            for p in range(c):
                s -= A[r, p] * A[c, p]
            A[r, c] = s / d
    return True


@njit(cache=True)
def _chol_solve(L, b, k, out):
    # Solves (L L^T) x = b for the leading k block.
    for r in range(k):
        s = b[r]
        for p in range(r):
            s -= L[r, p] * out[p]
        out[r] = s / L[r, r]
    for r in range(k - 1, -1, -1):
        s = out[r]
        for p in range(r + 1, k):
            s -= L[p, r] * out[p]
        out[r] = s / L[r, r]


@njit(cache=True)
def neighbor_distances(coords, nbr, counts):
    """Distances site-to-neighbors (n, m) and among neighbors (n, m, m)."""
    n, m = nbr.shape
    d_site = np.zeros((n, m))
    d_block = np.zeros((n, m, m))
    for i in range(n):
        k = counts[i]
        for a in range(k):
            ia = nbr[i, a]
            dx = coords[i, 0] - coords[ia, 0]
            dy = coords[i, 1] - coords[ia, 1]
            d_site[i, a] = math.sqrt(dx * dx + dy * dy)
            for b in range(a):
                ib = nbr[i, b]
                dx = coords[ia, 0] - coords[ib, 0]
                dy = coords[ia, 1] - coords[ib, 1]
                v = math.sqrt(dx * dx + dy * dy)
                d_block[i, a, b] = v
                d_block[i, b, a] = v
    return d_site, d_block


@njit(cache=True)
def nngp_coeffs(d_site, d_block, counts, g, jitter):
    """B (n, m) and F (n,) for an exponential kernel of range ``g``.

    Returns ``ok=False`` on the first neighbor block that fails to factor.
    """
    n, m = d_site.shape
    B = np.zeros((n, m))
    F = np.ones(n)
    C = np.empty((m, m))
    c = np.empty(m)
    x = np.empty(m)
    rg = 1.0 / g
    for i in range(n):
        k = counts[i]
        if k == 0:
            continue
        for a in range(k):
            c[a] = math.exp(-d_site[i, a] * rg)
            for b in range(a):
                v = math.exp(-d_block[i, a, b] * rg)
                C[a, b] = v
                C[b, a] = v
            C[a, a] = 1.0 + jitter
        if not _chol_inplace(C, k):
            return B, F, False
        _chol_solve(C, c, k, x)
        q = 0.0
        for a in range(k):
            B[i, a] = x[a]
            q += x[a] * c[a]
        f = 1.0 - q
        if f < 1e-10:
            f = 1e-10
        F[i] = f
    return B, F, True


@njit(cache=True)
def nngp_quadform(resid, nbr, counts, B, F):
    """Sum of squared standardized conditional residuals and sum of log F."""
    n = resid.shape[0]
    qf = 0.0
    logdet = 0.0
    for i in range(n):
        mu = 0.0
        for a in range(counts[i]):
            mu += B[i, a] * resid[nbr[i, a]]
        e = resid[i] - mu
        qf += e * e / F[i]
        logdet += math.log(F[i])
    return qf, logdet


@njit(cache=True)
def nngp_site_sweep(order, beta, fmat, w, z, beta_bar, tau, nbr, counts, B, F,
                    child_ptr, child_site, child_pos, normals):
    """One site-by-site joint draw of the (J+1)-vector of coefficients.

    At site i the conditional precision is ``w_i f_i f_i^T + diag(gamma_i)``
    and the linear term ``w_i f_i z_i + m_i``, where gamma and m collect the
    site's own NNGP factor and the factors of every site that uses i as a
    neighbor. Updates ``beta`` in place, visiting sites in ``order``.
    """
    n, p = beta.shape
    P = np.empty((p, p))
    lin = np.empty(p)
    mean = np.empty(p)
    for idx in range(n):
        i = order[idx]
        wi = w[i]
        for a in range(p):
            for b in range(p):
                P[a, b] = wi * fmat[i, a] * fmat[i, b]
            lin[a] = wi * fmat[i, a] * z[i]
        for j in range(p):
            bb = beta_bar[j]
            tj = tau[j]
            # own conditional
            inv = 1.0 / (tj * F[j, i])
            gam = inv
            mu = 0.0
            for a in range(counts[i]):
                mu += B[j, i, a] * (beta[nbr[i, a], j] - bb)
            mc = mu * inv
            # descendants that condition on i
            for cc in range(child_ptr[i], child_ptr[i + 1]):
                t = child_site[cc]
                kpos = child_pos[cc]
                bti = B[j, t, kpos]
                invt = 1.0 / (tj * F[j, t])
                gam += bti * bti * invt
                r = beta[t, j] - bb
                for a in range(counts[t]):
                    if a != kpos:
                        r -= B[j, t, a] * (beta[nbr[t, a], j] - bb)
                mc += bti * invt * r
            P[j, j] += gam
            lin[j] += mc + gam * bb
        if not _chol_inplace(P, p):
            return False
        _chol_solve(P, lin, p, mean)
        # mean + L^{-T} eps
        for r in range(p - 1, -1, -1):
            s = normals[idx, r]
            for q in range(r + 1, p):
                s -= P[q, r] * lin[q]
            lin[r] = s / P[r, r]
        for a in range(p):
            beta[i, a] = mean[a] + lin[a]
    return True


# ---------------------------------------------------------------------------
# Polya-gamma PG(1, c) via the alternating-series method on J*(1, c/2).

_TRUNC = 0.64
_PI = math.pi


@njit(cache=True)
def _log_norm_cdf(x):
    return math.log(0.5 * math.erfc(-x / math.sqrt(2.0)))


@njit(cache=True)
def _series_coef(n, x):
    K = (n + 0.5) * _PI
    if x > _TRUNC:
        return K * math.exp(-0.5 * K * K * x)
    if x > 0.0:
        e = (-1.5 * (math.log(0.5 * _PI) + math.log(x)) + math.log(K)
             - 2.0 * (n + 0.5) * (n + 0.5) / x)
        return math.exp(e)
    return 0.0


@njit(cache=True)
def _texpon_mass(z):
    t = _TRUNC
    fz = 0.125 * _PI * _PI + 0.5 * z * z
    b = math.sqrt(1.0 / t) * (t * z - 1.0)
    a = -math.sqrt(1.0 / t) * (t * z + 1.0)
    x0 = math.log(fz) + fz * t
    xb = x0 - z + _log_norm_cdf(b)
    xa = x0 + z + _log_norm_cdf(a)
    qdivp = 4.0 / _PI * (math.exp(xb) + math.exp(xa))
    return 1.0 / (1.0 + qdivp)


@njit(cache=True)
def _trunc_invgauss(z):
    t = _TRUNC
    x = t + 1.0
    if 1.0 / t > z:
        alpha = 0.0
        while np.random.random() > alpha:
            e1 = np.random.exponential()
            e2 = np.random.exponential()
            while e1 * e1 > 2.0 * e2 / t:
                e1 = np.random.exponential()
                e2 = np.random.exponential()
            x = 1.0 + e1 * t
            x = t / (x * x)
            alpha = math.exp(-0.5 * z * z * x)
    else:
        mu = 1.0 / z
        while x > t:
            y = np.random.standard_normal()
            y *= y
            half_mu = 0.5 * mu
            mu_y = mu * y
            x = mu + half_mu * mu_y - half_mu * math.sqrt(4.0 * mu_y + mu_y * mu_y)
            if np.random.random() > mu / (mu + x):
                x = mu * mu / x
    return x


@njit(cache=True)
def pg1_draws(c, seed, max_rounds):
    """Independent PG(1, c_k) draws. Returns (draws, ok)."""
    np.random.seed(seed)
    out = np.empty(c.shape[0])
    for k in range(c.shape[0]):
        z = abs(c[k]) * 0.5
        fz = 0.125 * _PI * _PI + 0.5 * z * z
        mass = _texpon_mass(z)
        done = False
        for _ in range(max_rounds):
            if np.random.random() < mass:
                x = _TRUNC + np.random.exponential() / fz
            else:
                x = _trunc_invgauss(z)
            s = _series_coef(0, x)
            y = np.random.random() * s
            n = 0
            while True:
                n += 1
                if n % 2 == 1:
                    s -= _series_coef(n, x)
                    if y <= s:
                        done = True
                        break
                else:
                    s += _series_coef(n, x)
                    if y > s:
                        break
            if done:
                out[k] = 0.25 * x
                break
        if not done:
            return out, False
    return out, True
