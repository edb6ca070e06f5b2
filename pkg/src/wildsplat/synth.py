"""Deterministic synthetic in-the-wild scenes.

A textured backdrop wall plus a few foreground blobs is rendered from an arc
of cameras with this package's own rasterizer. Each image then receives a
random lighting transform ``clip(gain * c**gamma + tint)`` and, for training
images, pasted rectangular or elliptical occluders whose exact pixel masks
are recorded. The point cloud is the ground-truth centres plus jitter.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .io import camera_to_dict, save_points, write_image, write_manifest
from .raster import make_splats, project, rasterize
from .scene import Camera, build_covariance


@dataclass
class SynthConfig:
    width: int = 96
    height: int = 96
    focal: float = 120.0
    n_poses: int = 8
    test_poses: tuple = (2, 5)
    arc_degrees: float = 15.0
    distance: float = 4.5
    backdrop_spacing: float = 0.5
    n_objects: int = 4
    prims_per_object: int = 17
    gain_range: tuple = (0.6, 1.4)
    tint_range: tuple = (-0.05, 0.05)
    gamma_range: tuple = (0.8, 1.25)
    lighting: bool = True
    occluder_count: int = 2
    occluder_size: tuple = (12, 28)
    occlude_test: bool = False
    point_jitter: float = 0.02  # fraction of scene radius
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for k in ("test_poses", "gain_range", "tint_range", "gamma_range", "occluder_size"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class GroundTruth:
    means: np.ndarray
    quats: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray

    def __len__(self):
        return len(self.means)


def ground_truth(cfg: SynthConfig, rng: np.random.Generator) -> GroundTruth:
    sp = cfg.backdrop_spacing
    xs = np.arange(-5.0, 5.0 + 1e-9, sp)
    ys = np.arange(-2.5, 2.5 + 1e-9, sp)
    gx, gy = np.meshgrid(xs, ys)
    gx, gy = gx.ravel(), gy.ravel()
    n_b = len(gx)
    wall = np.stack([gx, gy, np.zeros(n_b)], 1)
    phase = rng.uniform(0, 2 * np.pi, 3)
    freq = rng.uniform(0.4, 0.9, (3, 2))
    wall_col = np.stack(
        [0.5 + 0.3 * np.sin(freq[c, 0] * gx + freq[c, 1] * gy + phase[c]) for c in range(3)], 1)
    wall_col += rng.uniform(-0.08, 0.08, wall_col.shape)
    wall_scale = np.column_stack([np.full(n_b, 0.6 * sp), np.full(n_b, 0.6 * sp), np.full(n_b, 0.02)])
    wall_quat = np.tile([1.0, 0, 0, 0], (n_b, 1))

    centers = np.column_stack([rng.uniform(-1.6, 1.6, cfg.n_objects),
                               rng.uniform(-1.2, 1.2, cfg.n_objects),
                               rng.uniform(-1.4, -0.5, cfg.n_objects)])
    base = rng.uniform(0.1, 0.95, (cfg.n_objects, 3))
    obj_means, obj_cols = [], []
    for c, col in zip(centers, base):
        obj_means.append(c + rng.normal(0, 0.18, (cfg.prims_per_object, 3)))
        obj_cols.append(np.clip(col + rng.normal(0, 0.06, (cfg.prims_per_object, 3)), 0.02, 0.98))
    n_o = cfg.n_objects * cfg.prims_per_object
    obj_q = rng.normal(size=(n_o, 4))
    obj_q /= np.linalg.norm(obj_q, axis=1, keepdims=True)
    return GroundTruth(
        means=np.concatenate([wall] + obj_means),
        quats=np.concatenate([wall_quat, obj_q]),
        scales=np.concatenate([wall_scale, rng.uniform(0.06, 0.16, (n_o, 3))]),
        opacities=np.concatenate([np.full(n_b, 0.95), np.full(n_o, 0.9)]),
        colors=np.clip(np.concatenate([wall_col] + obj_cols), 0.0, 1.0),
    )


def ring_cameras(cfg: SynthConfig) -> list:
    cams = []
    for k in range(cfg.n_poses):
        az = np.deg2rad(-cfg.arc_degrees + 2 * cfg.arc_degrees * k / max(cfg.n_poses - 1, 1))
        el = np.deg2rad(4.0 * np.sin(1.7 * k))
        eye = cfg.distance * np.array([np.sin(az) * np.cos(el), np.sin(el), -np.cos(az) * np.cos(el)])
        cams.append(Camera.look_at(eye, [0, 0, 0], [0, -1, 0], cfg.focal, cfg.focal,
                                   cfg.width / 2, cfg.height / 2, cfg.width, cfg.height))
    return cams


def render_ground_truth(gt: GroundTruth, camera: Camera) -> np.ndarray:
    proj = project(gt.means, build_covariance(gt.quats, gt.scales), camera)
    ras = rasterize(make_splats(proj, gt.opacities, gt.colors), camera.width, camera.height)
    return ras.image


def random_lighting(cfg: SynthConfig, rng: np.random.Generator) -> dict:
    if not cfg.lighting:
        return {"gain": [1.0, 1.0, 1.0], "tint": [0.0, 0.0, 0.0], "gamma": 1.0}
    return {"gain": rng.uniform(*cfg.gain_range, 3).tolist(),
            "tint": rng.uniform(*cfg.tint_range, 3).tolist(),
            "gamma": float(rng.uniform(*cfg.gamma_range))}


def apply_lighting(image, lighting: dict) -> np.ndarray:
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    out = np.asarray(lighting["gain"]) * img ** lighting["gamma"] + np.asarray(lighting["tint"])
    return np.clip(out, 0.0, 1.0)


def paste_occluders(image, count: int, size_range, rng: np.random.Generator):
    """Paint solid rectangles/ellipses; returns ``(image, mask)``."""
    img = np.array(image, dtype=np.float64)
    h, w = img.shape[:2]
    mask = np.zeros((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(count):
        sw, sh = rng.integers(size_range[0], size_range[1] + 1, 2)
        x0 = rng.integers(0, max(w - sw, 0) + 1)
        y0 = rng.integers(0, max(h - sh, 0) + 1)
        color = rng.uniform(0.0, 1.0, 3)
        if rng.random() < 0.5:
            foot = (xx >= x0) & (xx < x0 + sw) & (yy >= y0) & (yy < y0 + sh)
        else:
            cx, cy = x0 + (sw - 1) / 2, y0 + (sh - 1) / 2
            foot = ((xx - cx) / (sw / 2)) ** 2 + ((yy - cy) / (sh / 2)) ** 2 <= 1.0
        img[foot] = color
        mask |= foot
    return img, mask


def synth_scene(cfg: SynthConfig, out_dir) -> Path:
    """Write images, masks, clean renders, points and ``manifest.json`` into ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    (out / "clean").mkdir(exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    gt = ground_truth(cfg, rng)
    cams = ring_cameras(cfg)
    entries = []
    for k, cam in enumerate(cams):
        iid = f"view{k:02d}"
        split = "test" if k in cfg.test_poses else "train"
        clean = render_ground_truth(gt, cam)
        light = random_lighting(cfg, rng)
        img = apply_lighting(clean, light)
        n_occ = cfg.occluder_count if (split == "train" or cfg.occlude_test) else 0
        img, mask = paste_occluders(img, n_occ, cfg.occluder_size, rng)
        write_image(out / "images" / f"{iid}.ppm", img)
        write_image(out / "masks" / f"{iid}.ppm", mask.astype(np.float64))
        write_image(out / "clean" / f"{iid}.ppm", clean)
        entries.append({"id": iid, "file": f"images/{iid}.ppm", "mask": f"masks/{iid}.ppm",
                        "clean": f"clean/{iid}.ppm", "split": split,
                        "camera": camera_to_dict(cam), "lighting": light})
    centroid = gt.means.mean(axis=0)
    radius = float(np.max(np.linalg.norm(gt.means - centroid, axis=1)))
    pts = gt.means + rng.normal(0.0, cfg.point_jitter * radius, gt.means.shape)
    save_points(out / "points.ply", pts, gt.colors)
    write_manifest(out / "manifest.json", entries, "points.ply",
                   extra={"synth": json.loads(json.dumps(asdict(cfg)))})
    return out / "manifest.json"
