"""Dataset IO, the ground-truth synthesizer (a path tracer over analytic SDF
scenes), the depth-noise model, color-space handling, and evaluation metrics.

Dataset directory layout: cameras.json, images/%04d.png (8-bit sRGB),
depth/%04d.pfm (z-depth, 0 = invalid), normal/%04d.pfm (world space),
emitter/%04d.png (mask, >127 true), split.json, and optionally
gt_scene.toml (the analytic scene that generated the data).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from . import brdf
from .fields import AnalyticSdf, sphere_trace
from .sampler import CameraModel


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# color space
# ---------------------------------------------------------------------------

_SRGB_CUT = 0.0031308
_SRGB_INV_CUT = 0.04045


def srgb_encode(c):
    c = np.asarray(c, dtype=np.float64)
    lo = 12.92 * c
    hi = 1.055 * np.power(np.maximum(c, _SRGB_CUT), 1.0 / 2.4) - 0.055
    return np.where(c <= _SRGB_CUT, lo, hi)


def srgb_encode_grad(c):
    c = np.asarray(c, dtype=np.float64)
    hi = (1.055 / 2.4) * np.power(np.maximum(c, _SRGB_CUT), 1.0 / 2.4 - 1.0)
    return np.where(c <= _SRGB_CUT, 12.92, hi)


def srgb_decode(c):
    c = np.asarray(c, dtype=np.float64)
    lo = c / 12.92
    hi = np.power((np.maximum(c, _SRGB_INV_CUT) + 0.055) / 1.055, 2.4)
    return np.where(c <= _SRGB_INV_CUT, lo, hi)


# ---------------------------------------------------------------------------
# image files
# ---------------------------------------------------------------------------


def write_pfm(path, data):
    """PFM float map, little endian (scale -1.0), rows bottom-to-top."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise DataError("PFM supports (H, W) or (H, W, 3) data")
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{data.shape[1]} {data.shape[0]}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(data).tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise DataError(f"{path}: not a PFM file")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        count = w * h * (3 if header == b"PF" else 1)
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(count * 4), dtype=dtype).astype(np.float32)
    shape = (h, w, 3) if header == b"PF" else (h, w)
    return np.flipud(data.reshape(shape)).copy()


def write_png8(path, img_linear):
    """8-bit sRGB PNG from linear [0, 1] rgb."""
    srgb = srgb_encode(np.clip(img_linear, 0.0, 1.0))
    u8 = np.round(srgb * 255.0).astype(np.uint8)
    cv2.imwrite(str(path), u8[..., ::-1])  # BGR on disk


def write_png16(path, img_linear):
    """16-bit sRGB PNG from linear rgb (clamped to [0, 1])."""
    srgb = srgb_encode(np.clip(img_linear, 0.0, 1.0))
    u16 = np.round(srgb * 65535.0).astype(np.uint16)
    if u16.ndim == 2:
        cv2.imwrite(str(path), u16)
    else:
        cv2.imwrite(str(path), u16[..., ::-1])


def read_png_linear(path):
    """Linear rgb floats from an 8-bit sRGB PNG."""
    raw = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if raw is None:
        raise DataError(f"cannot read image {path}")
    return srgb_decode(raw[..., ::-1].astype(np.float64) / 255.0)


def write_mask_png(path, mask):
    cv2.imwrite(str(path), np.where(mask, 255, 0).astype(np.uint8))


def read_mask_png(path):
    raw = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if raw is None:
        raise DataError(f"cannot read mask {path}")
    return raw > 127


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    cameras: list
    images: list            # linear rgb float (H, W, 3), in [0, 1]
    depths: list            # z-depth float (H, W), 0 = invalid
    normals: list           # world-space unit normals (H, W, 3)
    emitter_masks: list     # bool (H, W)
    train_ids: list = field(default_factory=list)
    test_ids: list = field(default_factory=list)
    scene_path: Path | None = None

    @property
    def n_views(self):
        return len(self.cameras)

    def view_ids(self, split="train"):
        if split == "train":
            return list(self.train_ids) or list(range(self.n_views))
        if split == "test":
            return list(self.test_ids)
        raise DataError(f"unknown split {split!r}")

    def compute_aabb(self, margin=0.2, stride=4):
        """Hull of camera centers and observed surface points, expanded."""
        pts = [np.stack([c.t for c in self.cameras])]
        for cam, depth in zip(self.cameras, self.depths):
            d = depth[::stride, ::stride]
            ys, xs = np.nonzero(d > 0)
            if ys.size:
                pts.append(cam.unproject(xs * stride + 0.5, ys * stride + 0.5,
                                         d[ys, xs]))
        allp = np.concatenate(pts, axis=0)
        lo, hi = allp.min(axis=0), allp.max(axis=0)
        center = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo) * (1.0 + margin)
        return center - half, center + half


def save_dataset(out_dir, dataset: Dataset):
    out = Path(out_dir)
    for sub in ("images", "depth", "normal", "emitter"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    cams = []
    for c in dataset.cameras:
        cams.append({"K": c.K.ravel().tolist(), "R": c.R.ravel().tolist(),
                     "t": c.t.tolist(), "width": c.width, "height": c.height})
    (out / "cameras.json").write_text(json.dumps(cams, indent=1))
    (out / "split.json").write_text(json.dumps(
        {"train": list(map(int, dataset.train_ids)),
         "test": list(map(int, dataset.test_ids))}))
    for i in range(dataset.n_views):
        write_png8(out / "images" / f"{i:04d}.png", dataset.images[i])
        write_pfm(out / "depth" / f"{i:04d}.pfm", dataset.depths[i])
        write_pfm(out / "normal" / f"{i:04d}.pfm", dataset.normals[i])
        write_mask_png(out / "emitter" / f"{i:04d}.png", dataset.emitter_masks[i])


def load_dataset(dir_path) -> Dataset:
    root = Path(dir_path)
    cam_file = root / "cameras.json"
    if not cam_file.exists():
        raise DataError(f"{root}: missing cameras.json")
    cameras = []
    for i, entry in enumerate(json.loads(cam_file.read_text())):
        try:
            cameras.append(CameraModel(entry["K"], entry["R"], entry["t"],
                                       entry["width"], entry["height"]))
        except (KeyError, ValueError) as e:
            raise DataError(f"camera {i}: {e}") from e
    images, depths, normals, masks = [], [], [], []
    for i, cam in enumerate(cameras):
        img = read_png_linear(root / "images" / f"{i:04d}.png")
        depth = read_pfm(root / "depth" / f"{i:04d}.pfm").astype(np.float64)
        normal = read_pfm(root / "normal" / f"{i:04d}.pfm").astype(np.float64)
        mask = read_mask_png(root / "emitter" / f"{i:04d}.png")
        for name, arr in (("image", img), ("depth", depth),
                          ("normal", normal), ("emitter", mask)):
            if arr.shape[:2] != (cam.height, cam.width):
                raise DataError(
                    f"view {i}: {name} resolution {arr.shape[:2]} does not "
                    f"match camera {(cam.height, cam.width)}")
        images.append(img)
        depths.append(depth)
        normals.append(normal)
        masks.append(mask)
    split_file = root / "split.json"
    train_ids, test_ids = list(range(len(cameras))), []
    if split_file.exists():
        split = json.loads(split_file.read_text())
        train_ids = split.get("train", train_ids)
        test_ids = split.get("test", [])
    scene_path = root / "gt_scene.toml"
    return Dataset(cameras=cameras, images=images, depths=depths,
                   normals=normals, emitter_masks=masks,
                   train_ids=train_ids, test_ids=test_ids,
                   scene_path=scene_path if scene_path.exists() else None)


# ---------------------------------------------------------------------------
# ground-truth synthesizer
# ---------------------------------------------------------------------------

TRACE_EPS = 1e-5
TRACE_STEPS = 256
OFFSET = 1e-3
PATH_BUDGET = 24  # uniforms per path: pixel jitter + 4 per bounce


def _pixel_uniforms(seed, view, height, width, spp):
    """Per-pixel counter-seeded uniforms so any parallel split reproduces."""
    out = np.empty((height * width, spp, PATH_BUDGET))
    for y in range(height):
        for x in range(width):
            ss = np.random.SeedSequence(entropy=(seed, view, x, y))
            g = np.random.Generator(np.random.Philox(ss))
            out[y * width + x] = g.random((spp, PATH_BUDGET))
    return out


def _scene_material_tables(scene: AnalyticSdf):
    kd = np.stack([p.material.kd for p in scene.primitives])
    ks = np.stack([p.material.ks for p in scene.primitives])
    rho = np.array([p.material.rho for p in scene.primitives])
    emission = np.stack([p.emission for p in scene.primitives])
    is_emitter = np.array([p.emitter for p in scene.primitives])
    return kd, ks, rho, emission, is_emitter


def _emitter_surface_sample(prim, u):
    """Uniform point + normal on the surface of an emitter primitive."""
    shape = prim.shape
    n = u.shape[0]
    if hasattr(shape, "radius") and hasattr(shape, "center") and not hasattr(shape, "a"):
        z = 1.0 - 2.0 * u[:, 0]
        r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
        phi = 2.0 * np.pi * u[:, 1]
        normal = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
        pts = shape.center + shape.radius * normal
        area = 4.0 * np.pi * shape.radius**2
        return pts, normal, area
    if hasattr(shape, "half"):
        h = shape.half
        face_areas = 4.0 * np.array([h[1] * h[2], h[1] * h[2],
                                     h[0] * h[2], h[0] * h[2],
                                     h[0] * h[1], h[0] * h[1]])
        area = face_areas.sum()
        cdf = np.cumsum(face_areas) / area
        face = np.searchsorted(cdf, u[:, 0] * 0.999999)
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        pts = np.empty((n, 3))
        normal = np.zeros((n, 3))
        a = (u[:, 1] * 2.0 - 1.0)
        # reuse the face-pick uniform's fractional part for the second axis
        b = (u[:, 0] * 6.0) % 1.0 * 2.0 - 1.0
        for ax in range(3)):
            pass
        for ax in range(3):
            sel = axis == ax
            if not sel.any():
                continue
            o1, o2 = [i for i in range(3) if i != ax]
            pts[sel, ax] = shape.center[ax] + sign[sel] * h[ax]
            pts[sel, o1] = shape.center[o1] + a[sel] * h[o1]
            pts[sel, o2] = shape.center[o2] + b[sel] * h[o2]
            normal[sel, ax] = sign[sel]
        return pts, normal, area
    raise DataError("emitter surface sampling supports spheres and boxes only")


def synth_dataset(scene: AnalyticSdf, cameras, spp, seed=0, max_depth=5,
                  rr_depth=3, nee=True, t_max=None) -> Dataset:
    """Render ground truth for the analytic scene: LDR images plus exact
    z-depth, world normal, and emitter-mask maps from pixel-center hits.

    Unidirectional path tracing with GGX BRDF sampling, max depth 5 and
    Russian roulette after depth 3; `nee` adds one area-light sample per
    vertex (emission is then only added on directly visible hits). The
    brute-force estimator (nee=False) is kept as a variance oracle.
    """
    if not scene.emitter_ids:
        raise DataError("scene has no emitters")
    kd_tab, ks_tab, rho_tab, emit_tab, is_emit = _scene_material_tables(scene)
    if t_max is None:
        t_max = 100.0
    images, depths, normals, masks = [], [], [], []
    for view, cam in enumerate(cameras):
        h, w = cam.height, cam.width
        us, vs = cam.pixel_grid()
        origins, dirs, scale = cam.rays(us, vs)
        t, hit, prim = sphere_trace(scene, origins, dirs, t_max,
                                    eps=TRACE_EPS, max_steps=TRACE_STEPS)
        depth = np.where(hit, t / scale, 0.0).reshape(h, w)
        hit_pts = origins + t[:, None] * dirs
        nrm = np.where(hit[:, None], scene.normals(hit_pts), 0.0).reshape(h, w, 3)
        mask = (hit & is_emit[np.maximum(prim, 0)]).reshape(h, w)

        uni = _pixel_uniforms(seed, view, h, w, spp)
        hdr = _trace_paths(scene, cam, uni, spp, max_depth, rr_depth, nee,
                           t_max, kd_tab, ks_tab, rho_tab, emit_tab, is_emit)
        images.append(np.clip(hdr.reshape(h, w, 3), 0.0, 1.0))
        depths.append(depth)
        normals.append(nrm)
        masks.append(mask)
    n = len(cameras)
    return Dataset(cameras=list(cameras), images=images, depths=depths,
                   normals=normals, emitter_masks=masks,
                   train_ids=list(range(n)), test_ids=[])


def _trace_paths(scene, cam, uni, spp, max_depth, rr_depth, nee, t_max,
                 kd_tab, ks_tab, rho_tab, emit_tab, is_emit):
    h, w = cam.height, cam.width
    npx = h * w
    nray = npx * spp
    jitter = uni[:, :, 0:2].reshape(nray, 2)
    px = np.repeat(np.arange(npx), spp)
    us = (px % w) + jitter[:, 0]
    vs = (px // w) + jitter[:, 1]
    origins, dirs, _ = cam.rays(us, vs)

    emitter_ids = scene.emitter_ids
    areas = {}
    radiance = np.zeros((nray, 3))
    throughput = np.ones((nray, 3))
    active = np.ones(nray, dtype=bool)
    o = origins
    v = dirs
    for depth in range(max_depth):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        t, hit, prim = sphere_trace(scene, o[idx], v[idx], t_max,
                                    eps=TRACE_EPS, max_steps=TRACE_STEPS)
        miss = ~hit
        active[idx[miss]] = False
        hid = idx[hit]
        if hid.size == 0:
            break
        ph = prim[hit]
        x = o[idx][hit] + t[hit, None] * v[idx][hit]
        emitting = is_emit[ph]
        if emitting.any():
            add_emission = emitting if (not nee or depth == 0) else np.zeros_like(emitting)
            radiance[hid[add_emission]] += (throughput[hid[add_emission]]
                                            * emit_tab[ph[add_emission]])
            active[hid[emitting]] = False
            keep = ~emitting
            hid, ph, x = hid[keep], ph[keep], x[keep]
            if hid.size == 0:
                continue
        n = scene.normals(x)
        win = v[hid]
        flip = (n * win).sum(1) > 0
        n[flip] = -n[flip]
        kd, ks, rho = kd_tab[ph], ks_tab[ph], rho_tab[ph]
        cos_nv = -(n * win).sum(1)

        u = uni.reshape(nray, PATH_BUDGET)[hid, 2 + depth * 4: 6 + depth * 4]
        if nee:
            k = len(emitter_ids)
            pick = np.minimum((u[:, 3] * k).astype(np.int64), k - 1)
            ldir = np.empty_like(x)
            ldist = np.empty(hid.size)
            lcontrib = np.zeros((hid.size, 3))
            for j, eid in enumerate(emitter_ids):
                sel = pick == j
                if not sel.any():
                    continue
                eprim = scene.primitives[eid]
                ypts, ynrm, area = _emitter_surface_sample(
                    eprim, u[sel][:, 0:2])
                areas[eid] = area
                delta = ypts - x[sel]
                dist = np.linalg.norm(delta, axis=1)
                wi = delta / np.maximum(dist, 1e-12)[:, None]
                cos_x = (n[sel] * wi).sum(1)
                cos_y = (-wi * ynrm).sum(1)
                geom_ok = (cos_x > 0) & (cos_y > 0) & (dist > 2 * OFFSET)
                if geom_ok.any():
                    hsel = np.flatnonzero(sel)[geom_ok]
                    so = x[sel][geom_ok] + OFFSET * n[sel][geom_ok]
                    st, shit, _ = sphere_trace(
                        scene, so, wi[geom_ok], dist[geom_ok] - 2 * OFFSET,
                        eps=TRACE_EPS, max_steps=TRACE_STEPS)
                    visible = ~shit
                    tgt = hsel[visible]
                    if tgt.size:
                        hvec = brdf.half_vector(-win[tgt], wi[geom_ok][visible])
                        f = brdf.eval_brdf(
                            kd[tgt], ks[tgt], rho[tgt], cos_nv[tgt],
                            cos_x[geom_ok][visible],
                            (n[tgt] * hvec).sum(1))
                        g = (cos_x[geom_ok][visible] * cos_y[geom_ok][visible]
                             / np.maximum(dist[geom_ok][visible] ** 2, 1e-12))
                        pdf_area = 1.0 / (k * area)
                        lcontrib[tgt] = f * (g / pdf_area)[:, None] * emit_tab[eid]
                ldir[sel] = wi
                ldist[sel] = dist
            radiance[hid] += throughput[hid] * lcontrib

        # BRDF bounce with a fixed uniform budget: below-horizon samples kill
        # the path (their contribution is zero under the full-sphere pdf)
        w_d = brdf.diffuse_weight(kd, ks)
        v_local = brdf.to_local(n, -win)
        pick_diffuse = u[:, 2] < w_d
        d_local = np.empty_like(x)
        if pick_diffuse.any():
            d_local[pick_diffuse] = brdf.sample_cosine_local(
                u[pick_diffuse, 0], u[pick_diffuse, 1])
        spec = ~pick_diffuse
        if spec.any():
            hvecs = brdf.sample_vndf_local(v_local[spec], rho[spec] ** 2,
                                           u[spec, 0], u[spec, 1])
            vl = v_local[spec]
            d_local[spec] = 2.0 * (vl * hvecs).sum(1, keepdims=True) * hvecs - vl
        ok = d_local[:, 2] > 1e-9
        d_world = brdf.from_local(n, d_local)
        hvec = brdf.half_vector(-win, d_world)
        cos_nd = d_local[:, 2]
        pdf = brdf.pdf_brdf(kd, ks, rho, cos_nv, cos_nd, (n * hvec).sum(1))
        ok &= pdf > 1e-12
        f = brdf.eval_brdf(kd, ks, rho, cos_nv, cos_nd, (n * hvec).sum(1))
        tp = throughput[hid]
        tp = tp * f * (cos_nd / np.maximum(pdf, 1e-12))[:, None]
        if depth >= rr_depth:
            q = np.clip(tp.max(axis=1), 0.05, 0.95)
            survive = u[:, 3] < q if not nee else (u[:, 3] * 977.0) % 1.0 < q
            tp = tp / q[:, None]
            ok &= survive
        throughput[hid] = tp
        active[hid] = ok
        dead = hid[~ok]
        active[dead] = False
        o[hid[ok]] = x[ok] + OFFSET * n[ok]
        v[hid[ok]] = d_world[ok]
    return radiance.reshape(npx, spp, 3).mean(axis=1)


# ---------------------------------------------------------------------------
# depth noise model
# ---------------------------------------------------------------------------


def noise_mu(z):
    return 0.0001125 * np.asarray(z) ** 2 + 0.0048875


def noise_sigma(z):
    return 0.002925 * np.asarray(z) ** 2 + 0.003325


def apply_depth_noise(depth, scale, rng):
    """z <- z + N(scale * mu(z), scale * sigma(z)); invalid (0) untouched."""
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth < 0):
        raise DataError("depth must be non-negative")
    if scale == 0:
        return depth.copy()
    noise = rng.normal(scale * noise_mu(depth), scale * noise_sigma(depth))
    return np.where(depth > 0, depth + noise, depth)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

PSNR_CAP = 99.0


def psnr(pred_linear, gt_linear):
    """PSNR in dB on sRGB-encoded [0, 1] images; 99 for identical inputs."""
    a = srgb_encode(np.clip(pred_linear, 0.0, 1.0))
    b = srgb_encode(np.clip(gt_linear, 0.0, 1.0))
    mse = float(((a - b) ** 2).mean())
    if mse <= 0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def depth_l1(pred, gt, valid=None):
    valid = (gt > 0) if valid is None else valid
    if not np.any(valid):
        return 0.0
    return float(np.abs(pred[valid] - gt[valid]).mean())


def normal_angular_l1(pred, gt, valid=None):
    valid = np.linalg.norm(gt, axis=-1) > 0.5 if valid is None else valid
    if not np.any(valid):
        return 0.0
    dot = (pred * gt).sum(axis=-1)
    return float(np.abs(1.0 - dot[valid]).mean())


def compute_metrics(pred_img, gt_img, pred_depth=None, gt_depth=None,
                    pred_normal=None, gt_normal=None):
    out = {"psnr": psnr(pred_img, gt_img)}
    if pred_depth is not None:
        out["depth_l1"] = depth_l1(pred_depth, gt_depth)
    if pred_normal is not None:
        valid = gt_depth > 0 if gt_depth is not None else None
        out["normal_angular_l1"] = normal_angular_l1(pred_normal, gt_normal,
                                                     valid)
    return out
