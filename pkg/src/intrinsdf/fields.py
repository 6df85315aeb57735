"""Scene fields: analytic SDF primitives, a trainable dense voxel grid with
latent features and analytic trilinear gradients, and the small perceptron
heads mapping latents to radiance, emitter probability, and materials.

Sign convention: d < 0 inside solid matter, d > 0 in free space where the
cameras sit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

RHO_MIN = 0.04
BETA_MIN = 1e-4
DIR_ENC_BANDS = 4  # frequencies 2^0 .. 2^3
DIR_ENC_DIM = 3 + 2 * 3 * DIR_ENC_BANDS


class OutOfBoundsError(ValueError):
    """A field query fell outside the grid bounds."""

    def __init__(self, x, lo, hi):
        self.x = np.asarray(x)
        self.lo = np.asarray(lo)
        self.hi = np.asarray(hi)
        super().__init__(f"query point {self.x} outside grid aabb [{lo}, {hi}]")


# ---------------------------------------------------------------------------
# analytic SDF primitives
# ---------------------------------------------------------------------------


@dataclass
class Material:
    kd: np.ndarray = field(default_factory=lambda: np.array([0.7, 0.7, 0.7]))
    ks: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rho: float = 1.0

    def __post_init__(self):
        self.kd = np.asarray(self.kd, dtype=np.float64)
        self.ks = np.asarray(self.ks, dtype=np.float64)
        self.rho = float(self.rho)


class Sphere:
    def __init__(self, center, radius):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)

    def distance(self, x):
        return np.linalg.norm(x - self.center, axis=-1) - self.radius


class Box:
    def __init__(self, center, half_extents):
        self.center = np.asarray(center, dtype=np.float64)
        self.half = np.asarray(half_extents, dtype=np.float64)

    def distance(self, x):
        q = np.abs(x - self.center) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside


class Plane:
    """Half-space boundary; positive on the side the (unit) normal points to."""

    def __init__(self, normal, offset):
        n = np.asarray(normal, dtype=np.float64)
        self.normal = n / np.linalg.norm(n)
        self.offset = float(offset)

    def distance(self, x):
        return x @ self.normal - self.offset


class Capsule:
    def __init__(self, a, b, radius):
        self.a = np.asarray(a, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.radius = float(radius)

    def distance(self, x):
        ab = self.b - self.a
        t = np.clip((x - self.a) @ ab / (ab @ ab), 0.0, 1.0)
        closest = self.a + t[..., None] * ab
        return np.linalg.norm(x - closest, axis=-1) - self.radius


@dataclass
class ScenePrimitive:
    shape: object
    material: Material = field(default_factory=Material)
    emitter: bool = False
    emission: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.emission = np.asarray(self.emission, dtype=np.float64)
        if self.emitter and not np.any(self.emission > 0):
            raise ValueError("emitter primitive must have positive emission")
        if not self.emitter and np.any(self.emission != 0):
            raise ValueError("non-emitter primitive must have zero emission")


class AnalyticSdf:
    """Min-union of exact signed-distance primitives with per-primitive
    materials and emitter flags. Ties in the union go to the lowest index."""

    def __init__(self, primitives: list[ScenePrimitive]):
        if not primitives:
            raise ValueError("scene needs at least one primitive")
        self.primitives = list(primitives)

    def distances(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return np.stack([p.shape.distance(x) for p in self.primitives], axis=-1)

    def evaluate(self, x):
        """Union distance and owning primitive index at points x (..., 3)."""
        d = self.distances(x)
        ids = d.argmin(axis=-1)
        return np.take_along_axis(d, ids[..., None], axis=-1)[..., 0], ids

    def distance(self, x) -> np.ndarray:
        return self.distances(x).min(axis=-1)

    def normals(self, x, h=1e-6) -> np.ndarray:
        """Central-difference gradient of the union distance, normalized."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        g = np.empty_like(x)
        for axis in range(3):
            e = np.zeros(3)
            e[axis] = h
            g[:, axis] = (self.distance(x + e) - self.distance(x - e)) / (2 * h)
        norm = np.linalg.norm(g, axis=-1, keepdims=True)
        return g / np.maximum(norm, 1e-12)

    @property
    def emitter_ids(self):
        return [i for i, p in enumerate(self.primitives) if p.emitter]


def sphere_trace(scene: AnalyticSdf, origins, dirs, t_max, eps=1e-5, max_steps=256):
    """March rays through an analytic scene.

    Returns (t, hit_mask, prim_id); t is the first-hit distance for hit rays,
    t_max where the ray escaped.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = origins.shape[0]
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    prim = np.full(n, -1, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    t_max = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (n,)).copy()
    for _ in range(max_steps):
        if not active.any():
            break
        x = origins[active] + t[active, None] * dirs[active]
        d, ids = scene.evaluate(x)
        newly_hit = d < eps
        idx = np.flatnonzero(active)
        hit_idx = idx[newly_hit]
        hit[hit_idx] = True
        prim[hit_idx] = ids[newly_hit]
        active[hit_idx] = False
        go_idx = idx[~newly_hit]
        t[go_idx] += d[~newly_hit]
        escaped = t[go_idx] > t_max[go_idx]
        active[go_idx[escaped]] = False
        t[go_idx[escaped]] = t_max[go_idx[escaped]]
    return t, hit, prim


# ---------------------------------------------------------------------------
# trainable voxel grid
# ---------------------------------------------------------------------------

# corner offsets of a cell, x fastest
_CORNERS = np.array(
    [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0],
     [0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1]], dtype=np.int64)


@dataclass
class GridSample:
    d: np.ndarray          # (N,)
    z: np.ndarray          # (N, F)
    grad_d: np.ndarray     # (N, 3) gradient of the trilinear interpolant
    flat_idx: np.ndarray   # (N, 8) flattened corner vertex indices
    w: np.ndarray          # (N, 8) trilinear weights
    dw: np.ndarray         # (N, 8, 3) d(weight)/d(world x)


class GridField:
    """Dense voxel grid storing an SDF value and an F-dim latent per vertex,
    with a learnable density sharpness parameter beta = exp(theta) + BETA_MIN.
    """

    def __init__(self, aabb_lo, aabb_hi, resolution=(64, 64, 64), feature_dim=8,
                 beta_init=0.1, rng=None):
        self.lo = np.asarray(aabb_lo, dtype=np.float64)
        self.hi = np.asarray(aabb_hi, dtype=np.float64)
        if not np.all(self.hi > self.lo):
            raise ValueError("aabb must have positive extent")
        self.res = tuple(int(r) for r in resolution)
        if any(r < 2 for r in self.res):
            raise ValueError("grid needs at least 2 vertices per axis")
        self.feature_dim = int(feature_dim)
        self.sdf = np.zeros(self.res, dtype=np.float64)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.latent = rng.uniform(-1e-2, 1e-2, size=self.res + (self.feature_dim,))
        if beta_init <= BETA_MIN:
            raise ValueError("beta_init must exceed BETA_MIN")
        self.theta_beta = np.array(np.log(beta_init - BETA_MIN))

    @property
    def beta(self) -> float:
        return float(np.exp(self.theta_beta) + BETA_MIN)

    @property
    def n_vertices(self) -> int:
        return self.res[0] * self.res[1] * self.res[2]

    @property
    def cell_size(self) -> np.ndarray:
        return (self.hi - self.lo) / (np.array(self.res) - 1)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    def vertex_coords(self):
        """World coordinates of all vertices, shape res + (3,)."""
        axes = [np.linspace(self.lo[i], self.hi[i], self.res[i]) for i in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    def geometric_init(self, center, radius, rng=None):
        """Bake d(x) = radius - |x - center|: free space positive inside the
        shell (cameras live in d > 0), solid beyond it."""
        if radius <= 0:
            raise ValueError("radius must be positive")
        center = np.asarray(center, dtype=np.float64)
        if np.any(center - radius < self.lo) or np.any(center + radius > self.hi):
            raise ValueError("init sphere must lie inside the aabb")
        coords = self.vertex_coords()
        self.sdf = radius - np.linalg.norm(coords - center, axis=-1)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.latent = rng.uniform(-1e-2, 1e-2, size=self.res + (self.feature_dim,))

    def bake(self, fn):
        """Set sdf values from a callable on (N, 3) world points."""
        coords = self.vertex_coords().reshape(-1, 3)
        self.sdf = np.asarray(fn(coords), dtype=np.float64).reshape(self.res)

    def interp_coeffs(self, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Trilinear corner indices, weights, and weight gradients at x (N, 3).

        Cells are half-open [lo, hi) along each axis; points must be strictly
        inside the aabb.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if np.any(x <= self.lo) or np.any(x >= self.hi):
            bad = np.flatnonzero(np.any((x <= self.lo) | (x >= self.hi), axis=1))[0]
            raise OutOfBoundsError(x[bad], self.lo, self.hi)
        n = np.array(self.res)
        scale = (n - 1) / (self.hi - self.lo)
        u = (x - self.lo) * scale
        cell = np.floor(u).astype(np.int64)
        cell = np.minimum(cell, n - 2)  # u == integer top edge cannot occur (strict bound)
        f = u - cell
        corners = cell[:, None, :] + _CORNERS[None, :, :]  # (N, 8, 3)
        flat = (corners[..., 0] * (n[1] * n[2])
                + corners[..., 1] * n[2] + corners[..., 2])
        # per-axis weight factors and their derivative w.r.t. f
        pick = _CORNERS[None, :, :]  # 0 -> (1-f), 1 -> f
        fac = np.where(pick == 1, f[:, None, :], 1.0 - f[:, None, :])  # (N, 8, 3)
        dfac = np.where(pick == 1, 1.0, -1.0)
        w = fac[..., 0] * fac[..., 1] * fac[..., 2]
        dw = np.empty(x.shape[:1] + (8, 3))
        dw[..., 0] = dfac[..., 0] * fac[..., 1] * fac[..., 2] * scale[0]
        dw[..., 1] = fac[..., 0] * dfac[..., 1] * fac[..., 2] * scale[1]
        dw[..., 2] = fac[..., 0] * fac[..., 1] * dfac[..., 2] * scale[2]
        return flat, w, dw

    def evaluate(self, x) -> GridSample:
        """Interpolated sdf, latent, and analytic sdf gradient at x (N, 3)."""
        flat, w, dw = self.interp_coeffs(x)
        sv = self.sdf.reshape(-1)[flat]                       # (N, 8)
        zv = self.latent.reshape(-1, self.feature_dim)[flat]  # (N, 8, F)
        d = (w * sv).sum(axis=1)
        z = (w[..., None] * zv).sum(axis=1)
        grad_d = (dw * sv[..., None]).sum(axis=1)
        return GridSample(d=d, z=z, grad_d=grad_d, flat_idx=flat, w=w, dw=dw)

    def scatter_sdf(self, flat_idx, contrib, out=None):
        """Accumulate per-corner contributions (N, 8) into a vertex-shaped grad."""
        acc = np.bincount(flat_idx.ravel(), weights=contrib.ravel(),
                          minlength=self.n_vertices)
        if out is None:
            return acc.reshape(self.res)
        out += acc.reshape(self.res)
        return out

    def scatter_latent(self, flat_idx, w, dz, out=None):
        """Accumulate dL/dz (N, F) through trilinear weights (N, 8) into a
        latent-shaped grad."""
        if out is None:
            out = np.zeros(self.res + (self.feature_dim,))
        flat = flat_idx.ravel()
        target = out.reshape(-1, self.feature_dim)
        per_corner = w[..., None] * dz[:, None, :]  # (N, 8, F)
        flat_contrib = per_corner.reshape(-1, self.feature_dim)
        for k in range(self.feature_dim):
            target[:, k] += np.bincount(flat, weights=flat_contrib[:, k],
                                        minlength=self.n_vertices)
        return out


# ---------------------------------------------------------------------------
# direction encoding and heads
# ---------------------------------------------------------------------------


def encode_direction(v) -> np.ndarray:
    """Sinusoidal encoding of unit directions: [v, sin/cos(2^k pi v)] for
    k = 0..3, giving 27 features."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("encode_direction expects unit vectors")
    parts = [v]
    for k in range(DIR_ENC_BANDS):
        arg = (2.0 ** k) * np.pi * v
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1)


class Mlp2:
    """One hidden tanh layer; output pre-activation (caller applies the
    output nonlinearity)."""

    def __init__(self, n_in, n_hidden, n_out, rng):
        s1 = np.sqrt(2.0 / (n_in + n_hidden))
        s2 = np.sqrt(2.0 / (n_hidden + n_out))
        self.w1 = rng.normal(0.0, s1, size=(n_in, n_hidden))
        self.b1 = np.zeros(n_hidden)
        self.w2 = rng.normal(0.0, s2, size=(n_hidden, n_out))
        self.b2 = np.zeros(n_out)

    @property
    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def set_params(self, arrays):
        self.w1, self.b1, self.w2, self.b2 = [np.asarray(a, dtype=np.float64)
                                              for a in arrays]

    def forward(self, x):
        h = np.tanh(x @ self.w1 + self.b1)
        y = h @ self.w2 + self.b2
        return y, (x, h)

    def backward(self, cache, dy):
        x, h = cache
        dw2 = h.T @ dy
        db2 = dy.sum(axis=0)
        dh = (dy @ self.w2.T) * (1.0 - h * h)
        dw1 = x.T @ dh
        db1 = dh.sum(axis=0)
        dx = dh @ self.w1.T
        return [dw1, db1, dw2, db2], dx


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


class FieldHeads:
    """Small maps from the grid latent to radiance (with view encoding),
    emitter probability, albedo, and roughness."""

    HEAD_ORDER = ("radiance", "semantic", "albedo", "roughness")

    def __init__(self, feature_dim=8, hidden=32, rng=None):
        rng = rng if rng is not None else np.random.default_rng(1)
        self.feature_dim = feature_dim
        self.hidden = hidden
        self.radiance = Mlp2(feature_dim + DIR_ENC_DIM, hidden, 3, rng)
        self.semantic = Mlp2(feature_dim, hidden, 1, rng)
        self.albedo = Mlp2(feature_dim, hidden, 6, rng)
        self.roughness = Mlp2(feature_dim, hidden, 1, rng)
        # keep initial albedo sums below 1 so the energy regularizer starts cold
        self.albedo.b2 -= 1.0

    def mlp(self, name) -> Mlp2:
        return getattr(self, name)

    # radiance -------------------------------------------------------------
    def eval_radiance(self, z, enc, want_cache=False):
        y, cache = self.radiance.forward(np.concatenate([z, enc], axis=-1))
        c = softplus(y)
        if want_cache:
            return c, (cache, y)
        return c

    def radiance_backward(self, cache, dc):
        mlp_cache, y = cache
        dy = dc * sigmoid(y)  # d softplus = sigmoid
        grads, dx = self.radiance.backward(mlp_cache, dy)
        return grads, dx[:, : self.feature_dim]

    # semantic -------------------------------------------------------------
    def eval_semantic(self, z, want_cache=False):
        y, cache = self.semantic.forward(z)
        m = sigmoid(y[..., 0])
        if want_cache:
            return m, (cache, m)
        return m

    def semantic_backward(self, cache, dm):
        mlp_cache, m = cache
        dy = (dm * m * (1.0 - m))[..., None]
        grads, dz = self.semantic.backward(mlp_cache, dy)
        return grads, dz

    # materials ------------------------------------------------------------
    def eval_albedo(self, z, want_cache=False):
        y, cache = self.albedo.forward(z)
        a = sigmoid(y)
        kd, ks = a[..., :3], a[..., 3:]
        if want_cache:
            return kd, ks, (cache, a)
        return kd, ks

    def albedo_backward(self, cache, dkd, dks):
        mlp_cache, a = cache
        dy = np.concatenate([dkd, dks], axis=-1) * a * (1.0 - a)
        grads, dz = self.albedo.backward(mlp_cache, dy)
        return grads, dz

    def eval_roughness(self, z, want_cache=False):
        y, cache = self.roughness.forward(z)
        s = sigmoid(y[..., 0])
        rho = RHO_MIN + (1.0 - RHO_MIN) * s
        if want_cache:
            return rho, (cache, s)
        return rho

    def roughness_backward(self, cache, drho):
        mlp_cache, s = cache
        dy = (drho * (1.0 - RHO_MIN) * s * (1.0 - s))[..., None]
        grads, dz = self.roughness.backward(mlp_cache, dy)
        return grads, dz

    def eval_material(self, z):
        kd, ks = self.eval_albedo(z)
        rho = self.eval_roughness(z)
        return kd, ks, rho


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------
#
# magic "I2SF", version u32, nx ny nz F u32 (little endian), aabb 6 x f64,
# f32 sdf then f32 latents in x-fastest vertex order, then the head weight
# arrays (w1, b1, w2, b2 per head in declaration order) as u32-length-prefixed
# f32 arrays. An optional trailing "EXTR" block holds named f32 arrays
# (theta_beta, emitter centroids, log emission, ...).

CHECKPOINT_MAGIC = b"I2SF"
CHECKPOINT_VERSION = 1
_EXTRA_MAGIC = b"EXTR"


def _write_array(f, arr):
    data = np.asarray(arr, dtype="<f4").ravel()
    f.write(struct.pack("<I", data.size))
    f.write(data.tobytes())


def _read_array(f):
    (n,) = struct.unpack("<I", f.read(4))
    return np.frombuffer(f.read(4 * n), dtype="<f4").astype(np.float64)


def save_fields(path, grid: GridField, heads: FieldHeads, extras=None):
    extras = dict(extras or {})
    extras.setdefault("theta_beta", np.array([float(grid.theta_beta)]))
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        nx, ny, nz = grid.res
        f.write(struct.pack("<5I", CHECKPOINT_VERSION, nx, ny, nz, grid.feature_dim))
        f.write(np.concatenate([grid.lo, grid.hi]).astype("<f8").tobytes())
        f.write(grid.sdf.astype("<f4").ravel(order="F").tobytes())
        # vertex-major latents, vertex index x-fastest
        lat = grid.latent.transpose(2, 1, 0, 3).reshape(-1, grid.feature_dim)
        f.write(lat.astype("<f4").tobytes())
        for name in FieldHeads.HEAD_ORDER:
            for p in heads.mlp(name).params:
                _write_array(f, p)
        f.write(_EXTRA_MAGIC)
        f.write(struct.pack("<I", len(extras)))
        for name, arr in extras.items():
            enc = name.encode()
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            _write_array(f, arr)


def load_fields(path):
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a field checkpoint")
        version, nx, ny, nz, fd = struct.unpack("<5I", f.read(20))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        aabb = np.frombuffer(f.read(48), dtype="<f8")
        grid = GridField(aabb[:3], aabb[3:], resolution=(nx, ny, nz), feature_dim=fd)
        nverts = nx * ny * nz
        sdf = np.frombuffer(f.read(4 * nverts), dtype="<f4").astype(np.float64)
        grid.sdf = sdf.reshape((nz, ny, nx)).transpose(2, 1, 0).copy()
        lat = np.frombuffer(f.read(4 * nverts * fd), dtype="<f4").astype(np.float64)
        grid.latent = lat.reshape((nz, ny, nx, fd)).transpose(2, 1, 0, 3).copy()
        heads = FieldHeads(feature_dim=fd)
        for name in FieldHeads.HEAD_ORDER:
            mlp = heads.mlp(name)
            shapes = [p.shape for p in mlp.params]
            mlp.set_params([_read_array(f).reshape(s) for s in shapes])
        extras = {}
        tag = f.read(4)
        if tag == _EXTRA_MAGIC:
            (count,) = struct.unpack("<I", f.read(4))
            for _ in range(count):
                (ln,) = struct.unpack("<H", f.read(2))
                name = f.read(ln).decode()
                extras[name] = _read_array(f)
        if "theta_beta" in extras:
            grid.theta_beta = np.array(float(extras["theta_beta"][0]))
    return grid, heads, extras
