"""Procedural scenes for desk-scale training: ray-cast depth of a ground
plane, boxes, spheres and panels under a pinhole camera, plus the sparse
input / semi-dense ground-truth sampling that mimics projected-LiDAR
statistics (roughly 5% input density, 30% ground-truth density with edge and
far-range pixels under-represented).
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .depthio import DepthMap, load_depth_png, save_depth_png


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    image_size: tuple[int, int] = (64, 64)   # (height, width)
    depth_range: tuple[float, float] = (2.0, 50.0)  # meters
    extent: float = 50.0                      # lateral scene half-extent bound
    n_panels: tuple[int, int] = (0, 2)        # fronto-parallel thin panels
    n_boxes: tuple[int, int] = (1, 4)
    n_spheres: tuple[int, int] = (1, 4)
    input_density: float = 0.05
    gt_density: float = 0.30
    pattern: str = "scanline"                 # scanline | uniform
    noise_sigma: float = 0.0                  # additive input noise, meters
    ground: bool = True                       # include the ground plane

    def __post_init__(self):
        h, w = self.image_size
        if h % 16 != 0 or w % 16 != 0:
            raise ValueError(f"image dims must be divisible by 16, got {h}x{w}")
        lo, hi = self.depth_range
        if not (0 < lo < hi <= 255.0):
            raise ValueError(f"depth range must lie within (0, 255] m, got {self.depth_range}")
        if not (0 < self.input_density < 1 and 0 < self.gt_density < 1):
            raise ValueError("densities must be in (0, 1)")
        if self.pattern not in ("scanline", "uniform"):
            raise ValueError(f"unknown sparsify pattern {self.pattern!r}")


@dataclass
class SamplePair:
    input: DepthMap       # sparse network input
    gt: DepthMap          # semi-dense ground truth
    dense: DepthMap       # full analytic depth, for oracle-grade evaluation


def _camera_rays(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    # fx sized for roughly an 80-degree horizontal FOV
    fx = w * 0.6
    fy = fx
    cx, cy = w / 2.0, h / 2.0
    us, vs = np.meshgrid(np.arange(w), np.arange(h))
    dx = (us - cx) / fx
    dy = (vs - cy) / fy
    return dx, dy


def generate_scene(spec: SceneSpec, seed: int | None = None) -> DepthMap:
    """Analytic z-depth of a random scene; deterministic per (spec, seed).

    The camera sits 1.5 m above a ground plane and faces a backdrop wall at
    the far end of the depth range, so every pixel has a depth.
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    h, w = spec.image_size
    z_near, z_far = spec.depth_range
    dx, dy = _camera_rays(h, w)

    depth = np.full((h, w), z_far)

    if spec.ground:
        # ground plane 1.5 m below the camera (+y is down)
        with np.errstate(divide="ignore"):
            t_ground = np.where(dy > 1e-9, 1.5 / np.maximum(dy, 1e-9), np.inf)
        depth = np.minimum(depth, t_ground)

    def sample_center(r_margin: float) -> np.ndarray:
        z = rng.uniform(z_near + r_margin + 0.5, 0.85 * z_far)
        u = rng.uniform(0.15 * w, 0.85 * w)
        v = rng.uniform(0.15 * h, 0.85 * h)
        x = (u - w / 2.0) / (w * 0.6) * z
        y = (v - h / 2.0) / (w * 0.6) * z
        x = float(np.clip(x, -spec.extent, spec.extent))
        y = float(np.clip(y, -spec.extent, spec.extent))
        return np.array([x, y, z])

    n_spheres = int(rng.integers(spec.n_spheres[0], spec.n_spheres[1] + 1))
    n_boxes = int(rng.integers(spec.n_boxes[0], spec.n_boxes[1] + 1))
    n_panels = int(rng.integers(spec.n_panels[0], spec.n_panels[1] + 1))

    for _ in range(n_spheres):
        r = rng.uniform(0.5, 3.0)
        c = sample_center(r)
        depth = np.minimum(depth, _ray_sphere_depth(dx, dy, c, r))

    for _ in range(n_boxes):
        half = rng.uniform(0.5, 3.0, size=3)
        c = sample_center(float(half.max()))
        depth = np.minimum(depth, _ray_box_depth(dx, dy, c - half, c + half))

    for _ in range(n_panels):
        half = np.array([rng.uniform(1.0, 6.0), rng.uniform(1.0, 6.0), 0.05])
        c = sample_center(0.1)
        depth = np.minimum(depth, _ray_box_depth(dx, dy, c - half, c + half))

    return DepthMap(depth, role="ground-truth")


def _ray_sphere_depth(dx: np.ndarray, dy: np.ndarray, center: np.ndarray,
                      radius: float) -> np.ndarray:
    """z of the nearest ray-sphere hit, inf where the ray misses."""
    a = dx * dx + dy * dy + 1.0
    dc = dx * center[0] + dy * center[1] + center[2]
    c0 = float(center @ center) - radius * radius
    disc = dc * dc - a * c0
    hit = disc >= 0
    t = np.full(dx.shape, np.inf)
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t_near = (dc - sq) / a
    t[hit & (t_near > 0)] = t_near[hit & (t_near > 0)]
    return t


def _ray_box_depth(dx: np.ndarray, dy: np.ndarray, lo: np.ndarray,
                   hi: np.ndarray) -> np.ndarray:
    """z of the nearest ray-AABB entry, inf where the ray misses."""
    t_near = np.full(dx.shape, -np.inf)
    t_far = np.full(dx.shape, np.inf)
    for d, l, h in ((dx, lo[0], hi[0]), (dy, lo[1], hi[1])):
        d_safe = np.where(np.abs(d) < 1e-12, 1e-12, d)
        t1 = l / d_safe
        t2 = h / d_safe
        t_near = np.maximum(t_near, np.minimum(t1, t2))
        t_far = np.minimum(t_far, np.maximum(t1, t2))
    # z axis: direction component is exactly 1
    t_near = np.maximum(t_near, lo[2])
    t_far = np.minimum(t_far, hi[2])
    ok = (t_near <= t_far) & (t_near > 0)
    t = np.full(dx.shape, np.inf)
    t[ok] = t_near[ok]
    return t


def sparsify(dense: DepthMap, pattern: str, density: float, seed: int) -> DepthMap:
    """Keep the requested fraction of valid pixels.

    scanline mode restricts candidates to evenly spaced rows (mimicking beam
    rows) and subsamples within them; uniform mode samples everywhere.
    """
    if not (0 < density < 1):
        raise ValueError(f"density must be in (0, 1), got {density}")
    rng = np.random.default_rng(seed)
    valid_v, valid_u = np.nonzero(dense.values > 0)
    n_valid = valid_v.size
    target = int(round(density * n_valid))
    out = np.zeros_like(dense.values)
    if target == 0 or n_valid == 0:
        return DepthMap(out, role="sparse-input")

    if pattern == "uniform":
        pick = rng.choice(n_valid, size=min(target, n_valid), replace=False)
    elif pattern == "scanline":
        row_step = max(1, int(round(np.sqrt(1.0 / density))))
        rows = np.arange(row_step // 2, dense.height, row_step)
        in_rows = np.isin(valid_v, rows)
        candidates = np.nonzero(in_rows)[0]
        if candidates.size == 0:
            candidates = np.arange(n_valid)
        pick = rng.choice(candidates, size=min(target, candidates.size), replace=False)
    else:
        raise ValueError(f"unknown pattern {pattern!r}")

    out[valid_v[pick], valid_u[pick]] = dense.values[valid_v[pick], valid_u[pick]]
    return DepthMap(out, role="sparse-input")


def sample_ground_truth(dense: DepthMap, density: float, seed: int,
                        edge_threshold_m: float = 1.0) -> DepthMap:
    """Semi-dense ground truth: random subsample biased away from
    depth discontinuities and far-range pixels, mirroring how LiDAR-derived
    ground truth under-covers exactly the places depth completion gets wrong.
    """
    rng = np.random.default_rng(seed)
    vals = dense.values
    valid_v, valid_u = np.nonzero(vals > 0)
    n_valid = valid_v.size
    target = min(int(round(density * n_valid)), n_valid)
    out = np.zeros_like(vals)
    if target == 0:
        return DepthMap(out, role="ground-truth")
    local_max = ndimage.maximum_filter(vals, size=3, mode="nearest")
    local_min = ndimage.minimum_filter(vals, size=3, mode="nearest")
    near_edge = (local_max - local_min) > edge_threshold_m
    far = vals > 0.85 * vals.max()
    weights = np.ones_like(vals)
    weights[near_edge] *= 0.05
    weights[far] *= 0.3
    w = weights[valid_v, valid_u]
    w = w / w.sum()
    pick = rng.choice(n_valid, size=target, replace=False, p=w)
    out[valid_v[pick], valid_u[pick]] = vals[valid_v[pick], valid_u[pick]]
    return DepthMap(out, role="ground-truth")


def make_sample(spec: SceneSpec, seed: int) -> SamplePair:
    """One (sparse input, semi-dense gt, true-dense) triple for a seed."""
    dense = generate_scene(spec, seed=seed)
    sparse = sparsify(dense, spec.pattern, spec.input_density, seed=seed + 1_000_003)
    gt = sample_ground_truth(dense, spec.gt_density, seed=seed + 2_000_003)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(seed + 3_000_003)
        noisy = sparse.values.copy()
        on = noisy > 0
        noisy[on] = np.maximum(noisy[on] + rng.normal(0, spec.noise_sigma, on.sum()),
                               1.0 / 256.0)
        sparse = DepthMap(noisy, role="sparse-input")
    return SamplePair(input=sparse, gt=gt, dense=dense)


def make_split(spec: SceneSpec, out_dir, n_train: int, n_val: int,
               train_seed_start: int | None = None,
               val_seed_start: int | None = None) -> str:
    """Write train/val sample directories plus a manifest; returns its path.

    Train and val seed ranges must be disjoint (leakage guard).
    """
    t0 = spec.seed if train_seed_start is None else train_seed_start
    v0 = t0 + n_train if val_seed_start is None else val_seed_start
    train_seeds = range(t0, t0 + n_train)
    val_seeds = range(v0, v0 + n_val)
    if set(train_seeds) & set(val_seeds):
        raise ValueError(f"train seeds {t0}..{t0 + n_train - 1} overlap "
                         f"val seeds {v0}..{v0 + n_val - 1} (leakage guard)")
    manifest = {"spec": _spec_dict(spec), "train": [], "val": []}
    for split, seeds in (("train", train_seeds), ("val", val_seeds)):
        for i, seed in enumerate(seeds):
            rel = os.path.join(split, f"{i:04d}")
            sample_dir = os.path.join(out_dir, rel)
            os.makedirs(sample_dir, exist_ok=True)
            pair = make_sample(spec, seed)
            save_depth_png(pair.input, os.path.join(sample_dir, "input.png"))
            save_depth_png(pair.gt, os.path.join(sample_dir, "gt.png"))
            save_depth_png(pair.dense, os.path.join(sample_dir, "dense.png"))
            manifest[split].append({
                "id": rel, "seed": seed,
                "input": os.path.join(rel, "input.png"),
                "gt": os.path.join(rel, "gt.png"),
                "dense": os.path.join(rel, "dense.png"),
            })
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return path


def _spec_dict(spec: SceneSpec) -> dict:
    d = asdict(spec)
    d["image_size"] = list(spec.image_size)
    d["depth_range"] = list(spec.depth_range)
    d["n_panels"] = list(spec.n_panels)
    d["n_boxes"] = list(spec.n_boxes)
    d["n_spheres"] = list(spec.n_spheres)
    return d


def spec_from_dict(d: dict) -> SceneSpec:
    return SceneSpec(
        seed=int(d["seed"]),
        image_size=tuple(d["image_size"]),
        depth_range=tuple(d["depth_range"]),
        extent=float(d["extent"]),
        n_panels=tuple(d["n_panels"]),
        n_boxes=tuple(d["n_boxes"]),
        n_spheres=tuple(d["n_spheres"]),
        input_density=float(d["input_density"]),
        gt_density=float(d["gt_density"]),
        pattern=str(d["pattern"]),
        noise_sigma=float(d["noise_sigma"]),
        ground=bool(d.get("ground", True)),
    )


def load_manifest(path) -> dict:
    with open(path) as fh:
        manifest = json.load(fh)
    for key in ("spec", "train", "val"):
        if key not in manifest:
            raise ValueError(f"manifest missing {key!r} section: {path}")
    return manifest


def load_split(manifest: dict, root, split: str) -> list[SamplePair]:
    pairs = []
    for entry in manifest[split]:
        pairs.append(SamplePair(
            input=load_depth_png(os.path.join(root, entry["input"])),
            gt=load_depth_png(os.path.join(root, entry["gt"])),
            dense=load_depth_png(os.path.join(root, entry["dense"])),
        ))
    return pairs
