"""GGX microfacet BRDF: evaluation, sampling density, importance sampling
with luminance-mixed diffuse/specular lobes, and the material partial
derivatives used by the re-rendering stage.

All core routines are vectorized over a leading batch axis and work on
cosines (N.v, N.d, N.h) plus per-sample material arrays.
"""

from __future__ import annotations

import numpy as np

LUM_WEIGHTS = np.array([0.213, 0.715, 0.072])
F90_DIVISOR = 0.04


def luminance(c):
    return np.asarray(c, dtype=np.float64) @ LUM_WEIGHTS


def ggx_d(alpha, n_dot_h):
    a2 = np.asarray(alpha, dtype=np.float64) ** 2
    den = (a2 - 1.0) * np.asarray(n_dot_h) ** 2 + 1.0
    return a2 / (np.pi * den * den)


def smith_s(alpha, n_dot_a, n_dot_b):
    """S term of the height-correlated visibility: (N.b) sqrt(a^2 + (N.a)^2 (1-a^2))."""
    a2 = np.asarray(alpha, dtype=np.float64) ** 2
    return n_dot_b * np.sqrt(a2 + n_dot_a**2 * (1.0 - a2))


def smith_g2(alpha, n_dot_v, n_dot_d):
    return 1.0 / (2.0 * (smith_s(alpha, n_dot_v, n_dot_d)
                         + smith_s(alpha, n_dot_d, n_dot_v)))


def smith_g1(alpha, n_dot_v):
    c2 = np.asarray(n_dot_v, dtype=np.float64) ** 2
    a2 = np.asarray(alpha, dtype=np.float64) ** 2
    return 2.0 / (np.sqrt(1.0 + a2 * (1.0 - c2) / c2) + 1.0)


def smith_g(alpha, n_dot_v, n_dot_d):
    """(G1 of the view direction, height-correlated G2). Zero G2 signals a
    grazing/invalid configuration."""
    valid = (np.asarray(n_dot_v) > 0) & (np.asarray(n_dot_d) > 0)
    g1 = np.where(valid, smith_g1(alpha, np.maximum(n_dot_v, 1e-12)), 0.0)
    g2 = np.where(valid,
                  smith_g2(alpha, np.maximum(n_dot_v, 1e-12),
                           np.maximum(n_dot_d, 1e-12)), 0.0)
    return g1, g2


def fresnel_f90(ks):
    return np.minimum(luminance(ks) / F90_DIVISOR, 1.0)


def fresnel(ks, n_dot_d):
    ks = np.asarray(ks, dtype=np.float64)
    f90 = fresnel_f90(ks)[..., None]
    q = (1.0 - np.asarray(n_dot_d)[..., None]) ** 5
    return ks + (f90 - ks) * q


def eval_brdf(kd, ks, rho, n_dot_v, n_dot_d, n_dot_h):
    """f_r = K_d/pi + D * G2 * F; zero for invalid (below-horizon) frames."""
    kd = np.atleast_2d(np.asarray(kd, dtype=np.float64))
    ks = np.atleast_2d(np.asarray(ks, dtype=np.float64))
    rho = np.atleast_1d(np.asarray(rho, dtype=np.float64))
    n_dot_v = np.atleast_1d(np.asarray(n_dot_v, dtype=np.float64))
    n_dot_d = np.atleast_1d(np.asarray(n_dot_d, dtype=np.float64))
    n_dot_h = np.atleast_1d(np.asarray(n_dot_h, dtype=np.float64))
    valid = (n_dot_v > 0) & (n_dot_d > 0)
    alpha = rho**2
    d_term = ggx_d(alpha, n_dot_h)
    g2 = smith_g2(alpha, np.maximum(n_dot_v, 1e-12), np.maximum(n_dot_d, 1e-12))
    f_term = fresnel(ks, np.maximum(n_dot_d, 0.0))
    f = kd / np.pi + (d_term * g2)[..., None] * f_term
    return np.where(valid[..., None], f, 0.0)


def diffuse_weight(kd, ks):
    """Mixing weight of the cosine lobe; falls back to 1 for black materials."""
    lk = luminance(kd)
    ls = luminance(ks)
    total = lk + ls
    return np.where(total > 0, lk / np.where(total > 0, total, 1.0), 1.0)


def pdf_brdf(kd, ks, rho, n_dot_v, n_dot_d, n_dot_h):
    """Sampling density of sample_brdf: w_d cos/pi + (1-w_d) D G1 / (4 N.v).

    The cosine term is clamped below the horizon; the specular term carries
    its full spherical mass (its integral over all reflected directions is
    exactly 1 by the Smith-G1 normalization identity).
    """
    rho = np.atleast_1d(np.asarray(rho, dtype=np.float64))
    n_dot_v = np.atleast_1d(np.asarray(n_dot_v, dtype=np.float64))
    n_dot_d = np.atleast_1d(np.asarray(n_dot_d, dtype=np.float64))
    n_dot_h = np.atleast_1d(np.asarray(n_dot_h, dtype=np.float64))
    w_d = diffuse_weight(np.atleast_2d(kd), np.atleast_2d(ks))
    alpha = rho**2
    p_d = np.maximum(n_dot_d, 0.0) / np.pi
    g1 = smith_g1(alpha, np.maximum(n_dot_v, 1e-12))
    p_s = ggx_d(alpha, n_dot_h) * g1 / (4.0 * np.maximum(n_dot_v, 1e-12))
    return w_d * p_d + (1.0 - w_d) * p_s


def half_vector(v, d):
    h = v + d
    norm = np.linalg.norm(h, axis=-1, keepdims=True)
    return np.where(norm > 1e-12, h / np.maximum(norm, 1e-12), 0.0)


def make_frame(n):
    """Orthonormal tangent/bitangent for unit normals (N, 3), branchless."""
    n = np.atleast_2d(np.asarray(n, dtype=np.float64))
    s = np.where(n[:, 2] >= 0.0, 1.0, -1.0)
    a = -1.0 / (s + n[:, 2])
    b = n[:, 0] * n[:, 1] * a
    t = np.stack([1.0 + s * n[:, 0] ** 2 * a, s * b, -s * n[:, 0]], axis=1)
    bt = np.stack([b, s + n[:, 1] ** 2 * a, -n[:, 1]], axis=1)
    return t, bt


def to_local(n, v):
    t, bt = make_frame(n)
    return np.stack([(v * t).sum(1), (v * bt).sum(1), (v * n).sum(1)], axis=1)


def from_local(n, v_local):
    t, bt = make_frame(n)
    return (v_local[:, 0:1] * t + v_local[:, 1:2] * bt + v_local[:, 2:3] * n)


def sample_cosine_local(u1, u2):
    r = np.sqrt(u1)
    phi = 2.0 * np.pi * u2
    return np.stack([r * np.cos(phi), r * np.sin(phi),
                     np.sqrt(np.maximum(1.0 - u1, 0.0))], axis=1)


def sample_vndf_local(v_local, alpha, u1, u2):
    """Half vectors from the distribution of visible GGX normals; the
    reflected-direction density is D * G1(v) / (4 N.v)."""
    a = alpha[:, None]
    vh = np.stack([a[:, 0] * v_local[:, 0], a[:, 0] * v_local[:, 1],
                   v_local[:, 2]], axis=1)
    vh /= np.linalg.norm(vh, axis=1, keepdims=True)
    lensq = vh[:, 0] ** 2 + vh[:, 1] ** 2
    inv = 1.0 / np.sqrt(np.maximum(lensq, 1e-20))
    t1 = np.where(lensq[:, None] > 1e-14,
                  np.stack([-vh[:, 1] * inv, vh[:, 0] * inv,
                            np.zeros_like(inv)], axis=1),
                  np.array([1.0, 0.0, 0.0]))
    t2 = np.cross(vh, t1)
    r = np.sqrt(u1)
    phi = 2.0 * np.pi * u2
    p1 = r * np.cos(phi)
    p2 = r * np.sin(phi)
    s = 0.5 * (1.0 + vh[:, 2])
    p2 = (1.0 - s) * np.sqrt(np.maximum(1.0 - p1**2, 0.0)) + s * p2
    pz = np.sqrt(np.maximum(1.0 - p1**2 - p2**2, 0.0))
    nh = p1[:, None] * t1 + p2[:, None] * t2 + pz[:, None] * vh
    h = np.stack([a[:, 0] * nh[:, 0], a[:, 0] * nh[:, 1],
                  np.maximum(nh[:, 2], 1e-9)], axis=1)
    return h / np.linalg.norm(h, axis=1, keepdims=True)


MAX_SAMPLE_ROUNDS = 1000


def sample_brdf(kd, ks, rho, n, v, rng):
    """Draw outgoing directions from the luminance-mixed diffuse/specular
    lobes. Below-horizon results are resampled; after MAX_SAMPLE_ROUNDS the
    sample is marked degenerate (pdf 0, valid False).

    Returns (d (N,3), pdf (N,), valid (N,)).
    """
    kd = np.atleast_2d(np.asarray(kd, dtype=np.float64))
    ks = np.atleast_2d(np.asarray(ks, dtype=np.float64))
    rho = np.atleast_1d(np.asarray(rho, dtype=np.float64))
    n = np.atleast_2d(np.asarray(n, dtype=np.float64))
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    count = n.shape[0]
    w_d = diffuse_weight(kd, ks)
    alpha = rho**2
    v_local = to_local(n, v)

    d_local = np.zeros((count, 3))
    done = np.zeros(count, dtype=bool)
    for _ in range(MAX_SAMPLE_ROUNDS):
        active = ~done
        na = int(active.sum())
        if na == 0:
            break
        u = rng.random((na, 3))
        pick_diffuse = u[:, 0] < w_d[active]
        cand = np.empty((na, 3))
        cand[pick_diffuse] = sample_cosine_local(u[pick_diffuse, 1],
                                                 u[pick_diffuse, 2])
        spec = ~pick_diffuse
        if spec.any():
            vl = v_local[active][spec]
            h = sample_vndf_local(vl, alpha[active][spec], u[spec, 1], u[spec, 2])
            cand[spec] = 2.0 * (vl * h).sum(1, keepdims=True) * h - vl
        ok = cand[:, 2] > 0
        idx = np.flatnonzero(active)[ok]
        d_local[idx] = cand[ok]
        done[idx] = True
    valid = done
    d = from_local(n, d_local)
    # renormalize: from_local of a unit vector is unit up to roundoff
    d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
    n_dot_v = (n * v).sum(1)
    n_dot_d = np.where(valid, (n * d).sum(1), 0.0)
    h = half_vector(v, d)
    n_dot_h = (n * h).sum(1)
    pdf = np.where(valid, pdf_brdf(kd, ks, rho, n_dot_v, n_dot_d, n_dot_h), 0.0)
    return d, pdf, valid


# ---------------------------------------------------------------------------
# material partial derivatives (for the re-render training stage)
# ---------------------------------------------------------------------------


def eval_brdf_material_grads(kd, ks, rho, n_dot_v, n_dot_d, n_dot_h):
    """f_r plus its partials w.r.t. the material parameters.

    Returns (f (N,3), df_dkd scalar, df_dks (N,3,3) with [i, out, in] layout,
    df_drho (N,3)). The sampling pdf is treated as detached.
    """
    kd = np.atleast_2d(np.asarray(kd, dtype=np.float64))
    ks = np.atleast_2d(np.asarray(ks, dtype=np.float64))
    rho = np.atleast_1d(np.asarray(rho, dtype=np.float64))
    n_dot_v = np.atleast_1d(np.asarray(n_dot_v, dtype=np.float64))
    n_dot_d = np.atleast_1d(np.asarray(n_dot_d, dtype=np.float64))
    n_dot_h = np.atleast_1d(np.asarray(n_dot_h, dtype=np.float64))
    count = kd.shape[0]
    valid = (n_dot_v > 0) & (n_dot_d > 0)
    cv = np.maximum(n_dot_v, 1e-12)
    cd = np.maximum(n_dot_d, 1e-12)
    alpha = rho**2
    u = n_dot_h

    a2 = alpha**2
    den = (a2 - 1.0) * u**2 + 1.0
    d_term = a2 / (np.pi * den * den)
    dd_dalpha = 2.0 * alpha * (den - 2.0 * a2 * u**2) / (np.pi * den**3)

    root_v = np.sqrt(a2 + cv**2 * (1.0 - a2))
    root_d = np.sqrt(a2 + cd**2 * (1.0 - a2))
    s1 = cd * root_v
    s2 = cv * root_d
    g2 = 1.0 / (2.0 * (s1 + s2))
    ds1 = cd * alpha * (1.0 - cv**2) / root_v
    ds2 = cv * alpha * (1.0 - cd**2) / root_d
    dg2_dalpha = -(ds1 + ds2) * 2.0 * g2**2

    lum_ks = luminance(ks)
    f90 = np.minimum(lum_ks / F90_DIVISOR, 1.0)
    q = (1.0 - cd) ** 5
    f_term = ks * (1.0 - q[:, None]) + (f90 * q)[:, None]

    f = kd / np.pi + (d_term * g2)[:, None] * f_term
    f = np.where(valid[:, None], f, 0.0)

    dv = np.where(valid, d_term * g2, 0.0)
    # dF_c/dks_cc' = delta (1-q) + q dF90/dks_c'
    df90 = np.where(lum_ks < F90_DIVISOR, 1.0 / F90_DIVISOR, 0.0)
    df_dks = np.zeros((count, 3, 3))
    eye = np.eye(3)
    df_dks += eye[None, :, :] * (1.0 - q)[:, None, None]
    df_dks += (q[:, None, None] * df90[:, None, None]
               * LUM_WEIGHTS[None, None, :])
    df_dks *= dv[:, None, None]

    dspec_dalpha = (dd_dalpha * g2 + d_term * dg2_dalpha)
    df_drho = np.where(valid[:, None],
                       dspec_dalpha[:, None] * f_term * (2.0 * rho)[:, None],
                       0.0)
    return f, 1.0 / np.pi, df_dks, df_drho
