"""Pixel unprojection, per-image error-PDF maps with pruning, adaptive and
uniform pixel sampling, and bubble-point generation from depth images."""

from __future__ import annotations

import warnings

import numpy as np

P_MIN_DEFAULT = 0.05


class CameraModel:
    """Pinhole camera: world point x(p, D) = t + D * (R K^-1 [u, v, 1]^T).

    R is camera-to-world, t the camera center, D the z-depth (camera axis).
    Pixel centers sit at integer + 0.5.
    """

    def __init__(self, K, R, t, width, height):
        self.K = np.asarray(K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(t, dtype=np.float64).reshape(3)
        self.width = int(width)
        self.height = int(height)
        if self.K[1, 0] or self.K[2, 0] or self.K[2, 1]:
            raise ValueError("K must be upper triangular")
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise ValueError("K must have positive focal lengths")
        if np.abs(self.R.T @ self.R - np.eye(3)).max() > 1e-6:
            raise ValueError("R must be orthonormal")
        self._K_inv = np.linalg.inv(self.K)

    def pixel_grid(self):
        """Pixel-center (u, v) coordinates of the full image."""
        us, vs = np.meshgrid(np.arange(self.width) + 0.5,
                             np.arange(self.height) + 0.5)
        return us.ravel(), vs.ravel()

    def raw_dirs(self, us, vs):
        """Unnormalized world ray directions R K^-1 [u, v, 1]."""
        us = np.atleast_1d(np.asarray(us, dtype=np.float64))
        vs = np.atleast_1d(np.asarray(vs, dtype=np.float64))
        p = np.stack([us, vs, np.ones_like(us)], axis=1)
        return (self.R @ (self._K_inv @ p.T)).T

    def ray_scale(self, us, vs):
        """|K^-1 [u, v, 1]|: converts z-depth to distance along the unit ray."""
        us = np.atleast_1d(np.asarray(us, dtype=np.float64))
        vs = np.atleast_1d(np.asarray(vs, dtype=np.float64))
        p = np.stack([us, vs, np.ones_like(us)], axis=1)
        return np.linalg.norm((self._K_inv @ p.T).T, axis=1)

    def rays(self, us, vs):
        """Unit-direction rays through pixels: (origins, dirs, scale)."""
        raw = self.raw_dirs(us, vs)
        scale = np.linalg.norm(raw, axis=1)
        dirs = raw / scale[:, None]
        origins = np.broadcast_to(self.t, dirs.shape).copy()
        return origins, dirs, scale

    def unproject(self, us, vs, depth):
        """World points at z-depth `depth` behind pixels (u, v)."""
        depth = np.atleast_1d(np.asarray(depth, dtype=np.float64))
        if np.any(depth <= 0):
            raise ValueError("unproject needs positive depth")
        return self.t + depth[:, None] * self.raw_dirs(us, vs)

    def project(self, x):
        """(u, v, z) of world points; z is the camera-axis depth."""
        xc = (np.atleast_2d(x) - self.t) @ self.R
        uvw = (self.K @ xc.T).T
        return uvw[:, 0] / uvw[:, 2], uvw[:, 1] / uvw[:, 2], uvw[:, 2]


class ErrorPdfMap:
    """Per-image pixel weights proportional to reconstruction error, with
    pruning below p_min and a lazily rebuilt CDF for O(log n) draws."""

    def __init__(self, height, width, p_min=P_MIN_DEFAULT):
        self.weights = np.zeros((height, width))
        self.p_min = float(p_min)
        self._cdf = None
        self._dirty = True

    @property
    def active(self) -> bool:
        return bool(np.any(self.weights > 0))

    def _prune(self, errors):
        errors = np.asarray(errors, dtype=np.float64)
        if np.any(errors < 0):
            raise ValueError("errors must be non-negative")
        return np.where(errors >= self.p_min, errors, 0.0)

    def initialize(self, error_image, valid_mask=None):
        """Full-image (stride 1) initialization at the end of the warm-up."""
        w = self._prune(error_image)
        if valid_mask is not None:
            w = np.where(valid_mask, w, 0.0)
        self.weights = w
        self._dirty = True

    def update(self, ys, xs, errors):
        """Refresh the weights of the given pixels from new error metrics."""
        self.weights[ys, xs] = self._prune(errors)
        self._dirty = True

    def _rebuild(self):
        flat = self.weights.ravel()
        total = flat.sum()
        self._cdf = np.cumsum(flat) / total if total > 0 else None
        self._dirty = False

    def sample(self, n, rng):
        """Draw n pixels (ys, xs) with probability proportional to weight.
        Returns None when the map is inactive."""
        if self._dirty:
            self._rebuild()
        if self._cdf is None:
            return None
        flat = np.searchsorted(self._cdf, rng.random(n), side="right")
        flat = np.minimum(flat, self.weights.size - 1)
        ys, xs = np.divmod(flat, self.weights.shape[1])
        return ys, xs


def sample_pixels_uniform(valid_mask, n, rng):
    """Uniform draws over the true pixels of valid_mask."""
    flat_idx = np.flatnonzero(valid_mask)
    if flat_idx.size == 0:
        raise ValueError("no valid pixels to sample")
    pick = flat_idx[rng.integers(0, flat_idx.size, size=n)]
    ys, xs = np.divmod(pick, valid_mask.shape[1])
    return ys, xs


def sample_pixels(pdf_map: ErrorPdfMap | None, valid_mask, n, rng):
    """Adaptive draws from the map when it is active, else uniform fallback."""
    if pdf_map is not None:
        drawn = pdf_map.sample(n, rng)
        if drawn is not None:
            return drawn
        warnings.warn("error map inactive; falling back to uniform sampling")
    return sample_pixels_uniform(valid_mask, n, rng)


MAX_REDRAWS = 10


def sample_bubble_points(depths, cameras, maps, n, rng, aabb_lo, aabb_hi,
                         adaptive=True):
    """Surface points for the bubble loss: draw an image uniformly, draw its
    pixels adaptively (or uniformly over valid depth), unproject with the
    stored depth. Out-of-bounds points are redrawn up to MAX_REDRAWS rounds.

    Returns (points (n, 3), view indices, ys, xs); fewer than n rows when
    redraws are exhausted (the shortfall is reported via a warning).
    """
    if n == 0:
        return (np.zeros((0, 3)), np.zeros(0, dtype=np.int64),
                np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
    aabb_lo = np.asarray(aabb_lo, dtype=np.float64)
    aabb_hi = np.asarray(aabb_hi, dtype=np.float64)
    n_views = len(depths)
    pts = np.zeros((n, 3))
    views = np.zeros(n, dtype=np.int64)
    pys = np.zeros(n, dtype=np.int64)
    pxs = np.zeros(n, dtype=np.int64)
    need = np.ones(n, dtype=bool)
    for _ in range(MAX_REDRAWS):
        count = int(need.sum())
        if count == 0:
            break
        vi = rng.integers(0, n_views, size=count)
        ys = np.empty(count, dtype=np.int64)
        xs = np.empty(count, dtype=np.int64)
        for view in np.unique(vi):
            sel = vi == view
            valid = depths[view] > 0
            pdf_map = maps[view] if (adaptive and maps is not None) else None
            ys[sel], xs[sel] = sample_pixels(pdf_map, valid, int(sel.sum()), rng)
        depth = np.stack([depths[v][y, x] for v, y, x in zip(vi, ys, xs)])
        ok_depth = depth > 0
        cand = np.zeros((count, 3))
        for view in np.unique(vi):
            sel = (vi == view) & ok_depth
            if sel.any():
                cand[sel] = cameras[view].unproject(xs[sel] + 0.5, ys[sel] + 0.5,
                                                    depth[sel])
        ok = ok_depth & np.all((cand > aabb_lo) & (cand < aabb_hi), axis=1)
        slots = np.flatnonzero(need)[: count][ok]
        pts[slots] = cand[ok]
        views[slots] = vi[ok]
        pys[slots] = ys[ok]
        pxs[slots] = xs[ok]
        need[slots] = False
    got = ~need
    if need.any():
        warnings.warn(f"dropped {int(need.sum())} bubble points after "
                      f"{MAX_REDRAWS} redraw rounds")
    return pts[got], views[got], pys[got], pxs[got]
