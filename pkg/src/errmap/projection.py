"""Pinhole projection between point clouds and depth maps, plus the
multi-virtual-camera rig that tiles 360 degrees with yawed cameras.

Conventions: the camera looks along +z, +x is right, +y is down. Pixel
coordinates round to nearest. Azimuth of a point is atan2(x, z); a camera
with yaw psi looks along azimuth psi, and yaw rotations are about the y axis.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .depthio import DepthMap, ErrorMap, PointCloud


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"sensor size must be positive, got {self.width}x{self.height}")

    @property
    def hfov_deg(self) -> float:
        """Horizontal field of view implied by fx and width."""
        return math.degrees(2.0 * math.atan(self.width / (2.0 * self.fx)))


@dataclass(frozen=True)
class VirtualRig:
    """Yawed pinhole cameras jointly covering the full circle."""

    cameras: tuple[tuple[CameraIntrinsics, float], ...]  # (intrinsics, yaw_deg)

    def __post_init__(self):
        if not self.cameras:
            raise ValueError("rig needs at least one camera")
        # A single camera is a degenerate rig (plain front-view projection);
        # only multi-camera rigs must tile the full circle.
        if len(self.cameras) > 1 and not self.covers_full_circle():
            raise ValueError("rig cameras do not cover 360 degrees of yaw")

    def covers_full_circle(self) -> bool:
        intervals = []
        for cam, yaw in self.cameras:
            half = cam.hfov_deg / 2.0
            intervals.append((_wrap_deg(yaw - half), _wrap_deg(yaw + half)))
        # unroll intervals on [0, 360) and check the union covers it
        events = []
        for lo, hi in intervals:
            lo %= 360.0
            hi %= 360.0
            if hi <= lo:  # wraps
                events.append((lo, 360.0))
                events.append((0.0, hi))
            else:
                events.append((lo, hi))
        events.sort()
        reach = 0.0
        for lo, hi in events:
            if lo > reach + 1e-9:
                return False
            reach = max(reach, hi)
        return reach >= 360.0 - 1e-9

    def overlap_degrees(self) -> float:
        """Total FOV beyond the 360 needed: the doubly-covered angle."""
        return sum(cam.hfov_deg for cam, _ in self.cameras) - 360.0


def _wrap_deg(a: float) -> float:
    """Wrap to (-180, 180]."""
    a = math.fmod(a, 360.0)
    if a <= -180.0:
        a += 360.0
    elif a > 180.0:
        a -= 360.0
    return a


def _wrap_deg_arr(a: np.ndarray) -> np.ndarray:
    return (a + 180.0) % 360.0 - 180.0


def make_rig(n_cameras: int, fov_deg: float, width: int, height: int,
             fy: float | None = None) -> VirtualRig:
    """Evenly yawed cameras whose fx realizes the requested horizontal FOV."""
    if n_cameras < 1:
        raise ValueError("need at least one camera")
    fx = width / (2.0 * math.tan(math.radians(fov_deg) / 2.0))
    cam = CameraIntrinsics(fx=fx, fy=fy if fy is not None else fx,
                           cx=width / 2.0, cy=height / 2.0,
                           width=width, height=height)
    yaws = [i * 360.0 / n_cameras for i in range(n_cameras)]
    return VirtualRig(tuple((cam, yaw) for yaw in yaws))


def save_rig(rig: VirtualRig, path) -> None:
    payload = {"cameras": [
        {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
         "width": cam.width, "height": cam.height, "yaw_deg": yaw}
        for cam, yaw in rig.cameras]}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)


def load_rig(path) -> VirtualRig:
    with open(path) as fh:
        payload = json.load(fh)
    cams = []
    for entry in payload["cameras"]:
        cams.append((CameraIntrinsics(fx=entry["fx"], fy=entry["fy"],
                                      cx=entry["cx"], cy=entry["cy"],
                                      width=int(entry["width"]), height=int(entry["height"])),
                     float(entry["yaw_deg"])))
    return VirtualRig(tuple(cams))


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

@dataclass
class ProjectionStats:
    depth: DepthMap
    n_points: int
    n_projected: int  # points that landed on a pixel (pre z-buffer)
    n_dropped: int    # behind the camera or out of frame


def project_stats(cloud: PointCloud, cam: CameraIntrinsics) -> ProjectionStats:
    """Project points to pixels; nearest z wins on collision.

    Points with z <= 0 or landing outside the frame are dropped (counted in
    the stats, never an error).
    """
    pts = cloud.points
    depth = np.zeros((cam.height, cam.width))
    if len(pts) == 0:
        return ProjectionStats(DepthMap(depth, role="sparse-input"), 0, 0, 0)
    z = pts[:, 2]
    front = z > 0
    u = np.full(len(pts), -1, dtype=np.int64)
    v = np.full(len(pts), -1, dtype=np.int64)
    u[front] = np.rint(cam.fx * pts[front, 0] / z[front] + cam.cx).astype(np.int64)
    v[front] = np.rint(cam.fy * pts[front, 1] / z[front] + cam.cy).astype(np.int64)
    inside = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    n_projected = int(inside.sum())
    # z-buffer: np.minimum.at gives the min over colliding points
    zbuf = np.full((cam.height, cam.width), np.inf)
    np.minimum.at(zbuf, (v[inside], u[inside]), z[inside])
    hit = np.isfinite(zbuf)
    depth[hit] = zbuf[hit]
    return ProjectionStats(DepthMap(depth, role="sparse-input"),
                           n_points=len(pts), n_projected=n_projected,
                           n_dropped=len(pts) - n_projected)


def project(cloud: PointCloud, cam: CameraIntrinsics) -> DepthMap:
    return project_stats(cloud, cam).depth


def backproject(depth: DepthMap, cam: CameraIntrinsics) -> PointCloud:
    """One 3-D point per valid pixel: x=(u-cx)z/fx, y=(v-cy)z/fy."""
    vs, us = np.nonzero(depth.values > 0)
    z = depth.values[vs, us]
    x = (us - cam.cx) * z / cam.fx
    y = (vs - cam.cy) * z / cam.fy
    return PointCloud(np.stack([x, y, z], axis=1))


def backproject_with_values(depth: DepthMap, aux: np.ndarray,
                            cam: CameraIntrinsics) -> tuple[PointCloud, np.ndarray]:
    """backproject plus the aux value (e.g. predicted error) at each kept pixel."""
    if aux.shape != depth.values.shape:
        raise ValueError(f"aux shape {aux.shape} != depth shape {depth.values.shape}")
    vs, us = np.nonzero(depth.values > 0)
    z = depth.values[vs, us]
    x = (us - cam.cx) * z / cam.fx
    y = (vs - cam.cy) * z / cam.fy
    return PointCloud(np.stack([x, y, z], axis=1)), aux[vs, us]


# ---------------------------------------------------------------------------
# Rig projection and merge
# ---------------------------------------------------------------------------

def _rotate_yaw(points: np.ndarray, yaw_deg: float) -> np.ndarray:
    """Rotate about the y axis so azimuth shifts by +yaw_deg."""
    psi = math.radians(yaw_deg)
    c, s = math.cos(psi), math.sin(psi)
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    return np.stack([x * c + z * s, y, -x * s + z * c], axis=1)


def world_to_camera(points: np.ndarray, yaw_deg: float) -> np.ndarray:
    """Common frame -> frame of a camera at the given yaw."""
    return _rotate_yaw(points, -yaw_deg)


def camera_to_world(points: np.ndarray, yaw_deg: float) -> np.ndarray:
    return _rotate_yaw(points, yaw_deg)


def project_rig(cloud: PointCloud, rig: VirtualRig) -> list[DepthMap]:
    """Project the cloud into every rig camera; overlaps may duplicate points."""
    maps = []
    for cam, yaw in rig.cameras:
        local = PointCloud(world_to_camera(cloud.points, yaw))
        maps.append(project(local, cam))
    return maps


def azimuth_deg(points: np.ndarray) -> np.ndarray:
    return np.degrees(np.arctan2(points[:, 0], points[:, 2]))


def _owner_indices(points_world: np.ndarray, rig: VirtualRig) -> np.ndarray:
    """Index of the camera whose principal axis is angularly closest."""
    az = azimuth_deg(points_world)
    yaws = np.array([yaw for _, yaw in rig.cameras])
    dists = np.abs(_wrap_deg_arr(az[:, None] - yaws[None, :]))
    return np.argmin(dists, axis=1)  # ties go to the lowest camera index


@dataclass
class RigMerge:
    cloud: PointCloud
    errors: np.ndarray          # per-point error, NaN when no error map given
    source_camera: np.ndarray   # per-point camera index
    n_duplicates_removed: int


def merge_rig(maps: list[DepthMap], errors: list[ErrorMap] | None,
              rig: VirtualRig) -> RigMerge:
    """Back-project every camera and merge into the common frame.

    In overlap zones each pixel is kept only by the camera that owns the
    point's azimuth (closest principal axis); instances seen by the other
    camera are dropped as duplicates.
    """
    if len(maps) != len(rig.cameras):
        raise ValueError(f"{len(maps)} maps for {len(rig.cameras)} cameras")
    if errors is not None and len(errors) != len(rig.cameras):
        raise ValueError(f"{len(errors)} error maps for {len(rig.cameras)} cameras")
    parts, errs, sources = [], [], []
    n_dup = 0
    for k, (cam, yaw) in enumerate(rig.cameras):
        if errors is not None:
            local, e = backproject_with_values(maps[k], errors[k].values, cam)
        else:
            local = backproject(maps[k], cam)
            e = np.full(len(local), np.nan)
        world = camera_to_world(local.points, yaw)
        if len(world) == 0:
            continue
        keep = _owner_indices(world, rig) == k
        n_dup += int((~keep).sum())
        parts.append(world[keep])
        errs.append(e[keep])
        sources.append(np.full(int(keep.sum()), k, dtype=np.int64))
    if parts:
        cloud = PointCloud(np.concatenate(parts, axis=0))
        all_errs = np.concatenate(errs)
        all_src = np.concatenate(sources)
    else:
        cloud = PointCloud()
        all_errs = np.zeros(0)
        all_src = np.zeros(0, dtype=np.int64)
    return RigMerge(cloud=cloud, errors=all_errs, source_camera=all_src,
                    n_duplicates_removed=n_dup)
