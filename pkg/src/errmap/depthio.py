"""Depth-map and point-cloud value types plus their on-disk formats.

Formats are bit-exact contracts:
  * depth/error PNG: 16-bit single-channel grayscale, stored value / 256 =
    meters, stored 0 = no measurement;
  * raw LiDAR: little-endian float32 quadruples (x, y, z, reflectance),
    reflectance discarded on read;
  * point clouds: ASCII PLY 1.0 with optional uchar RGB per vertex.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

MAX_DEPTH_M = 65535 / 256.0  # largest value a depth PNG can store

_PNG16_MODES = ("I;16", "I;16B", "I")


@dataclass
class DepthMap:
    """Per-pixel depth in meters; 0 encodes "no measurement"."""

    values: np.ndarray
    role: str = "sparse-input"  # sparse-input | dense-prediction | ground-truth

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"DepthMap values must be 2-d, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("DepthMap values must be finite")
        if np.any(self.values < 0):
            raise ValueError("DepthMap values must be non-negative")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def mask(self) -> np.ndarray:
        """Validity mask: 1.0 where a measurement exists."""
        return (self.values > 0).astype(np.float64)

    def valid_count(self) -> int:
        return int(np.count_nonzero(self.values > 0))

    def density(self) -> float:
        return self.valid_count() / self.values.size


@dataclass
class ErrorMap:
    """Per-pixel expected absolute depth error (or sigma) in meters."""

    values: np.ndarray
    role: str = "prediction"  # prediction | label | sigma

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"ErrorMap values must be 2-d, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("ErrorMap values must be finite")
        if np.any(self.values < 0):
            raise ValueError("ErrorMap values must be non-negative")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class PointCloud:
    """Points (x, y, z) in meters, sensor frame."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("PointCloud coordinates must be finite")

    def __len__(self) -> int:
        return self.points.shape[0]


# ---------------------------------------------------------------------------
# 16-bit depth PNG
# ---------------------------------------------------------------------------

def _decode_png16(data: bytes, kind: str) -> np.ndarray:
    try:
        img = Image.open(io.BytesIO(data))
    except Exception as exc:
        raise ValueError(f"{kind}: not a decodable image: {exc}") from exc
    if img.format != "PNG":
        raise ValueError(f"{kind}: expected PNG, got {img.format}")
    if img.mode not in _PNG16_MODES:
        raise ValueError(f"{kind}: expected 16-bit single-channel PNG, got mode {img.mode!r}")
    stored = np.asarray(img, dtype=np.int64)
    if stored.ndim != 2:
        raise ValueError(f"{kind}: expected single channel, got shape {stored.shape}")
    if stored.min() < 0 or stored.max() > 65535:
        raise ValueError(f"{kind}: stored values outside uint16 range")
    return stored.astype(np.float64) / 256.0


def _encode_png16(values: np.ndarray, kind: str) -> bytes:
    if np.any(values >= MAX_DEPTH_M + 1 / 512.0):
        raise ValueError(
            f"{kind}: values must be < {MAX_DEPTH_M:.2f} m to fit 16 bits, "
            f"max is {values.max():.3f}")
    stored = np.rint(values * 256.0).astype(np.uint16)
    buf = io.BytesIO()
    Image.fromarray(stored).save(buf, format="PNG")
    return buf.getvalue()


def read_depth_png(data: bytes) -> DepthMap:
    """Decode a 16-bit depth PNG: meters = stored / 256, stored 0 = invalid."""
    return DepthMap(_decode_png16(data, "depth PNG"))


def write_depth_png(depth: DepthMap) -> bytes:
    """Encode to 16-bit PNG: stored = round(meters * 256), invalid stays 0."""
    return _encode_png16(depth.values, "depth PNG")


def read_error_png(data: bytes) -> ErrorMap:
    """Decode an error map stored with the same value/256 convention."""
    return ErrorMap(_decode_png16(data, "error PNG"))


def write_error_png(err: ErrorMap) -> bytes:
    return _encode_png16(err.values, "error PNG")


def load_depth_png(path) -> DepthMap:
    with open(path, "rb") as fh:
        return read_depth_png(fh.read())


def save_depth_png(depth: DepthMap, path) -> None:
    with open(path, "wb") as fh:
        fh.write(write_depth_png(depth))


def load_error_png(path) -> ErrorMap:
    with open(path, "rb") as fh:
        return read_error_png(fh.read())


def save_error_png(err: ErrorMap, path) -> None:
    with open(path, "wb") as fh:
        fh.write(write_error_png(err))


# ---------------------------------------------------------------------------
# Raw LiDAR binary
# ---------------------------------------------------------------------------

def read_lidar_bin(data: bytes) -> PointCloud:
    """Parse little-endian float32 (x, y, z, reflectance) records."""
    if len(data) % 16 != 0:
        raise ValueError(f"LiDAR binary length {len(data)} is not a multiple of 16 "
                         "(trailing partial record)")
    records = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    return PointCloud(records[:, :3].astype(np.float64))


def write_lidar_bin(cloud: PointCloud, reflectance: np.ndarray | None = None) -> bytes:
    """Inverse of read_lidar_bin; coordinates are stored as float32."""
    n = len(cloud)
    records = np.zeros((n, 4), dtype="<f4")
    records[:, :3] = cloud.points.astype("<f4")
    if reflectance is not None:
        refl = np.asarray(reflectance, dtype="<f4").reshape(-1)
        if refl.shape[0] != n:
            raise ValueError(f"reflectance count {refl.shape[0]} != point count {n}")
        records[:, 3] = refl
    return records.tobytes()


# ---------------------------------------------------------------------------
# ASCII PLY
# ---------------------------------------------------------------------------

def write_ply(cloud: PointCloud, colors: np.ndarray | None = None) -> bytes:
    """ASCII PLY 1.0 with vertex x y z and optional uchar red green blue."""
    n = len(cloud)
    if colors is not None:
        colors = np.asarray(colors)
        if colors.shape != (n, 3):
            raise ValueError(f"colors shape {colors.shape} does not match {n} points")
        if colors.dtype != np.uint8:
            if np.any(colors < 0) or np.any(colors > 255):
                raise ValueError("colors must be within [0, 255]")
            colors = colors.astype(np.uint8)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    for i in range(n):
        x, y, z = cloud.points[i]
        row = f"{x:.6f} {y:.6f} {z:.6f}"
        if colors is not None:
            r, g, b = colors[i]
            row += f" {r} {g} {b}"
        lines.append(row)
    return ("\n".join(lines) + "\n").encode("ascii")


# Five-stop ramp (dark blue, cyan, green, yellow, red), positions 0..1.
_RAMP_STOPS = np.array([
    [0.0, 30, 60, 160],
    [0.25, 40, 200, 220],
    [0.5, 60, 200, 80],
    [0.75, 240, 220, 60],
    [1.0, 220, 40, 40],
])


def error_colors(errors: np.ndarray, clip_percentile: float = 99.0) -> np.ndarray:
    """Map error values onto the 5-stop ramp over [0, clip_percentile] range.

    Values at/above the percentile saturate at the last stop, so a single
    outlier cannot wash out the rest of the image.
    """
    errors = np.asarray(errors, dtype=np.float64).reshape(-1)
    if errors.size == 0:
        return np.zeros((0, 3), dtype=np.uint8)
    top = np.percentile(errors, clip_percentile)
    if top <= 0:
        t = np.zeros_like(errors)
    else:
        t = np.clip(errors / top, 0.0, 1.0)
    pos = _RAMP_STOPS[:, 0]
    rgb = np.stack([np.interp(t, pos, _RAMP_STOPS[:, k]) for k in (1, 2, 3)], axis=1)
    return np.rint(rgb).astype(np.uint8)
