"""Training objectives: photometric, Eikonal, depth, normal, smoothness,
bubble, emitter BCE, material regularization, re-render loss, and the
stage bundles.

Batch sums are implemented as means so the weight hyperparameters are
batch-size independent. Each *_grad function returns (value, gradient) with
the gradient either an upstream array (chained through the ray-integration
backward) or a per-parameter-group dict.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .dataio import srgb_encode, srgb_encode_grad
from .fields import FieldHeads, GridField

BCE_CLAMP = 1e-6


@dataclass
class LossWeights:
    eikonal: float = 0.1    # lambda_1
    depth: float = 0.1      # lambda_2
    normal: float = 0.05    # lambda_3
    smooth: float = 0.0     # lambda_4
    bubble: float = 0.0     # lambda_5
    geo: float = 1.0        # lambda_geo
    emi: float = 0.5        # lambda_emi
    mat: float = 0.1        # lambda_mat

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


def _sign(x):
    return np.where(x > 0, 1.0, np.where(x < 0, -1.0, 0.0))


# --- photometric -----------------------------------------------------------


def rgb_loss_grad(pred, target):
    pred = np.atleast_2d(pred)
    target = np.atleast_2d(target)
    diff = pred - target
    val = float(np.abs(diff).mean())
    return val, _sign(diff) / diff.size


def rgb_loss(pred, target) -> float:
    return rgb_loss_grad(pred, target)[0]


# --- geometry --------------------------------------------------------------


def depth_loss_grad(pred, target, mask=None):
    pred = np.atleast_1d(pred)
    target = np.atleast_1d(target)
    if mask is None:
        mask = np.ones(pred.shape, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        return 0.0, np.zeros_like(pred)
    diff = np.where(mask, pred - target, 0.0)
    val = float(np.abs(diff).sum() / n)
    return val, _sign(diff) / n


def depth_loss(pred, target, mask=None) -> float:
    return depth_loss_grad(pred, target, mask)[0]


def normal_loss_grad(pred, target, mask=None):
    """Angular L1: mean |1 - N_hat . N| over valid rays."""
    pred = np.atleast_2d(pred)
    target = np.atleast_2d(target)
    if mask is None:
        mask = np.ones(pred.shape[0], dtype=bool)
    n = int(mask.sum())
    if n == 0:
        return 0.0, np.zeros_like(pred)
    dot = (pred * target).sum(axis=1)
    resid = np.where(mask, 1.0 - dot, 0.0)
    val = float(np.abs(resid).sum() / n)
    dpred = (-_sign(resid) / n)[:, None] * target
    return val, np.where(mask[:, None], dpred, 0.0)


def normal_loss(pred, target, mask=None) -> float:
    return normal_loss_grad(pred, target, mask)[0]


def eikonal_loss_grad(grid: GridField, points):
    """Mean (|grad d| - 1)^2 with the gradient scattered to grid sdf values."""
    gs = grid.evaluate(points)
    gn = np.linalg.norm(gs.grad_d, axis=1)
    n = gn.shape[0]
    val = float(((gn - 1.0) ** 2).mean())
    dg = (2.0 * (gn - 1.0) / np.maximum(gn, 1e-12) / n)[:, None] * gs.grad_d
    contrib = (gs.dw * dg[:, None, :]).sum(axis=2)
    return val, {"grid_sdf": grid.scatter_sdf(gs.flat_idx, contrib)}


def eikonal_loss(grid, points) -> float:
    return eikonal_loss_grad(grid, points)[0]


def smooth_loss_grad(grid: GridField, points, eps_scale, rng):
    """Mean |grad d(x) - grad d(x + eps)| with eps ~ U(-eps_scale, eps_scale)^3.
    Pairs whose perturbed point leaves the aabb are dropped."""
    points = np.atleast_2d(points)
    if eps_scale == 0.0 or points.shape[0] == 0:
        return 0.0, {"grid_sdf": np.zeros(grid.res)}
    eps = rng.uniform(-eps_scale, eps_scale, size=points.shape)
    moved = points + eps
    keep = np.all((moved > grid.lo) & (moved < grid.hi), axis=1)
    points, moved = points[keep], moved[keep]
    if points.shape[0] == 0:
        return 0.0, {"grid_sdf": np.zeros(grid.res)}
    ga = grid.evaluate(points)
    gb = grid.evaluate(moved)
    diff = ga.grad_d - gb.grad_d
    norms = np.linalg.norm(diff, axis=1)
    n = norms.shape[0]
    val = float(norms.mean())
    ddiff = diff / np.maximum(norms, 1e-12)[:, None] / n
    grad = grid.scatter_sdf(ga.flat_idx, (ga.dw * ddiff[:, None, :]).sum(axis=2))
    grad = grid.scatter_sdf(gb.flat_idx, (gb.dw * -ddiff[:, None, :]).sum(axis=2),
                            out=grad)
    return val, {"grid_sdf": grad}


def smooth_loss(grid, points, eps_scale, rng) -> float:
    return smooth_loss_grad(grid, points, eps_scale, rng)[0]


def bubble_loss_grad(grid: GridField, points):
    """Mean |d| at surface points unprojected from depth."""
    points = np.atleast_2d(points)
    if points.shape[0] == 0:
        warnings.warn("bubble loss got an empty point set")
        return 0.0, {"grid_sdf": np.zeros(grid.res)}
    gs = grid.evaluate(points)
    n = gs.d.shape[0]
    val = float(np.abs(gs.d).mean())
    contrib = gs.w * (_sign(gs.d) / n)[:, None]
    return val, {"grid_sdf": grid.scatter_sdf(gs.flat_idx, contrib)}


def bubble_loss(grid, points) -> float:
    return bubble_loss_grad(grid, points)[0]


# --- emitter segmentation ----------------------------------------------------


def emitter_bce_grad(pred, mask):
    pred = np.atleast_1d(np.asarray(pred, dtype=np.float64))
    mask = np.atleast_1d(np.asarray(mask, dtype=np.float64))
    p = np.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    val = float(-(mask * np.log(p) + (1.0 - mask) * np.log(1.0 - p)).mean())
    inside = (pred > BCE_CLAMP) & (pred < 1.0 - BCE_CLAMP)
    dpred = np.where(inside, (-mask / p + (1.0 - mask) / (1.0 - p)) / p.size, 0.0)
    return val, dpred


def emitter_bce(pred, mask) -> float:
    return emitter_bce_grad(pred, mask)[0]


# --- materials ---------------------------------------------------------------


def material_reg_grad(heads: FieldHeads, z_a, z_b):
    """Smoothness of (K_d, K_s, rho) across a small perturbation plus the
    energy penalty relu(K_d + K_s - 1), both batch means.

    z_a, z_b are frozen latents at x and x + eps; gradients flow into the
    albedo and roughness heads only.
    """
    kd_a, ks_a, alb_cache_a = heads.eval_albedo(z_a, want_cache=True)
    kd_b, ks_b, alb_cache_b = heads.eval_albedo(z_b, want_cache=True)
    rho_a, rough_cache_a = heads.eval_roughness(z_a, want_cache=True)
    rho_b, rough_cache_b = heads.eval_roughness(z_b, want_cache=True)
    n = z_a.shape[0]

    d_kd = kd_a - kd_b
    d_ks = ks_a - ks_b
    d_rho = (rho_a - rho_b)[:, None]
    n_kd = np.linalg.norm(d_kd, axis=1)
    n_ks = np.linalg.norm(d_ks, axis=1)
    n_rho = np.abs(d_rho[:, 0])
    smooth_val = float((n_kd + n_ks + n_rho).mean())

    energy = kd_a + ks_a - 1.0
    relu = np.maximum(energy, 0.0)
    energy_val = float(relu.sum(axis=1).mean())

    g_kd_a = d_kd / np.maximum(n_kd, 1e-12)[:, None] / n
    g_ks_a = d_ks / np.maximum(n_ks, 1e-12)[:, None] / n
    g_rho_a = d_rho / np.maximum(n_rho, 1e-12)[:, None] / n
    d_energy = np.where(energy > 0, 1.0 / n, 0.0)

    alb_grads_a, _ = heads.albedo_backward(alb_cache_a,
                                           g_kd_a + d_energy, g_ks_a + d_energy)
    alb_grads_b, _ = heads.albedo_backward(alb_cache_b, -g_kd_a, -g_ks_a)
    rough_grads_a, _ = heads.roughness_backward(rough_cache_a, g_rho_a[:, 0])
    rough_grads_b, _ = heads.roughness_backward(rough_cache_b, -g_rho_a[:, 0])
    grads = {
        "albedo": [a + b for a, b in zip(alb_grads_a, alb_grads_b)],
        "roughness": [a + b for a, b in zip(rough_grads_a, rough_grads_b)],
    }
    return smooth_val + energy_val, grads, energy_val


def material_reg(heads, z_a, z_b) -> float:
    return material_reg_grad(heads, z_a, z_b)[0]


# --- re-render ---------------------------------------------------------------


def render_loss_grad(pred_linear, target_linear):
    """L1 between the clamped, sRGB-encoded re-render and the LDR target."""
    pred = np.atleast_2d(pred_linear)
    target = np.atleast_2d(target_linear)
    clamped = np.clip(pred, 0.0, 1.0)
    diff = srgb_encode(clamped) - srgb_encode(np.clip(target, 0.0, 1.0))
    val = float(np.abs(diff).mean())
    inside = (pred > 0.0) & (pred < 1.0)
    dpred = np.where(inside, _sign(diff) * srgb_encode_grad(clamped), 0.0)
    return val, dpred / diff.size


def render_loss(pred_linear, target_linear) -> float:
    return render_loss_grad(pred_linear, target_linear)[0]


# --- bundles -----------------------------------------------------------------


def geometry_bundle(parts: dict, w: LossWeights) -> float:
    return (w.eikonal * parts.get("eikonal", 0.0)
            + w.depth * parts.get("depth", 0.0)
            + w.normal * parts.get("normal", 0.0)
            + w.smooth * parts.get("smooth", 0.0)
            + w.bubble * parts.get("bubble", 0.0))


def bundle_stage1(parts: dict, w: LossWeights) -> float:
    """L1 = L_rgb + lambda_geo * L_geo + lambda_emi * L_emi."""
    return (parts.get("rgb", 0.0) + w.geo * geometry_bundle(parts, w)
            + w.emi * parts.get("emitter", 0.0))


def bundle_stage2(parts: dict, w: LossWeights) -> float:
    """L2 = L_render + lambda_mat * L_mreg."""
    return parts.get("render", 0.0) + w.mat * parts.get("material", 0.0)


def accumulate_grads(total: dict, grads: dict, scale=1.0):
    """Merge a per-group gradient dict into a running total, scaled."""
    for key, val in grads.items():
        if isinstance(val, list):
            if key in total:
                for t, g in zip(total[key], val):
                    t += scale * g
            else:
                total[key] = [scale * g for g in val]
        else:
            if key in total:
                total[key] += scale * val
            else:
                total[key] = scale * val
    return total
