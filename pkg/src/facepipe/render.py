"""Perspective depth-map rendering and depth-image conditioning files.

The camera sits on the +z world axis at ``distance`` from the subject
origin and looks back at it, so a point at the origin has camera-space
depth equal to the camera distance. Rasterization uses edge functions at
half-integer pixel centers with the top-left fill rule, perspective-
correct 1/z interpolation, and a minimum z-buffer; background pixels
keep a +inf sentinel.

Conditioning images map covered depths affinely to [1, 255] with nearer
surfaces brighter and background exactly 0 (the relative inverse-depth
convention depth-conditioned diffusion backends expect), and are written
as 8-bit grayscale PNGs with a JSON sidecar recording the mapping.
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .morphable import Mesh

DEFAULT_FOV_DEGREES = 72.4
DEFAULT_RESOLUTION = 512
DEFAULT_DISTANCE_RANGE = (150.0, 400.0)


class DepthImageError(ValueError):
    pass


@dataclass
class Camera:
    fov_degrees: float = DEFAULT_FOV_DEGREES
    distance: float = 250.0
    resolution: int = DEFAULT_RESOLUTION
    near: float = 1.0
    far: float = 10000.0

    def __post_init__(self):
        if not 0.0 < self.fov_degrees < 180.0:
            raise ValueError(f"fov {self.fov_degrees} outside (0, 180)")
        if not self.near < self.distance < self.far:
            raise ValueError("camera requires near < distance < far")
        if self.resolution < 16:
            raise ValueError("resolution must be at least 16")

    @property
    def focal(self) -> float:
        """Focal length in pixels: half the image over tan(half fov)."""
        return (self.resolution / 2.0) / math.tan(math.radians(self.fov_degrees) / 2.0)


@dataclass
class DepthBuffer:
    depth: np.ndarray  # [H, W] float64 camera-space z, +inf = background
    camera: Camera

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def coverage_fraction(self) -> float:
        return float(np.isfinite(self.depth).mean())


@dataclass
class DepthMetadata:
    near: float
    far: float
    min_depth: float
    max_depth: float
    fov_degrees: float
    distance: float
    resolution: int


@dataclass
class DepthImage:
    pixels: np.ndarray  # [H, W] uint8, 0 = background
    metadata: DepthMetadata | None = None

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


def sample_camera(
    rng: np.random.Generator,
    d_min: float = DEFAULT_DISTANCE_RANGE[0],
    d_max: float = DEFAULT_DISTANCE_RANGE[1],
    resolution: int = DEFAULT_RESOLUTION,
    fov_degrees: float = DEFAULT_FOV_DEGREES,
) -> Camera:
    """Camera at a uniform distance in [d_min, d_max], fixed field of view."""
    if not 0.0 < d_min <= d_max:
        raise ValueError("need 0 < d_min <= d_max")
    distance = float(rng.uniform(d_min, d_max)) if d_min < d_max else d_min
    return Camera(fov_degrees=fov_degrees, distance=distance, resolution=resolution)


def _to_camera_space(camera: Camera, points: np.ndarray) -> np.ndarray:
    """World -> camera: x right, y down (so images come out upright), z in."""
    pts = np.asarray(points, dtype=np.float64)
    cam = np.empty_like(pts)
    cam[..., 0] = pts[..., 0]
    cam[..., 1] = -pts[..., 1]
    cam[..., 2] = camera.distance - pts[..., 2]
    return cam


def project(camera: Camera, point: np.ndarray) -> tuple[float, float, float]:
    """Pinhole-project one world point; returns (pixel_x, pixel_y, depth)."""
    cam = _to_camera_space(camera, np.asarray(point, dtype=np.float64))
    z = float(cam[2])
    if z <= 0.0:
        raise ValueError("point is behind the camera")
    c = camera.resolution / 2.0
    f = camera.focal
    return (c + f * float(cam[0]) / z, c + f * float(cam[1]) / z, z)


def render_depth(mesh: Mesh, camera: Camera) -> DepthBuffer:
    """Rasterize every triangle into a minimum z-buffer.

    No backface culling; occlusion is resolved purely by the z-buffer.
    Triangles with any vertex at or behind the eye plane are skipped, and
    fragments outside (near, far) are discarded.
    """
    res = camera.resolution
    depth = np.full((res, res), np.inf, dtype=np.float64)
    if mesh.triangles.size == 0 or mesh.vertices.size == 0:
        return DepthBuffer(depth=depth, camera=camera)

    cam = _to_camera_space(camera, mesh.vertices)
    z = cam[:, 2]
    c = res / 2.0
    f = camera.focal
    valid = z > 0.0
    px = np.where(valid, c + f * cam[:, 0] / np.where(valid, z, 1.0), 0.0)
    py = np.where(valid, c + f * cam[:, 1] / np.where(valid, z, 1.0), 0.0)

    for tri in mesh.triangles:
        i0, i1, i2 = int(tri[0]), int(tri[1]), int(tri[2])
        if not (valid[i0] and valid[i1] and valid[i2]):
            continue
        ax, ay, az = px[i0], py[i0], z[i0]
        bx, by, bz = px[i1], py[i1], z[i1]
        cx, cy, cz = px[i2], py[i2], z[i2]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area == 0.0:
            continue
        if area < 0.0:  # flip to positive orientation; no culling
            bx, cx = cx, bx
            by, cy = cy, by
            bz, cz = cz, bz
            area = -area

        x_lo = max(0, int(math.ceil(min(ax, bx, cx) - 0.5)))
        x_hi = min(res - 1, int(math.floor(max(ax, bx, cx) - 0.5)))
        y_lo = max(0, int(math.ceil(min(ay, by, cy) - 0.5)))
        y_hi = min(res - 1, int(math.floor(max(ay, by, cy) - 0.5)))
        if x_lo > x_hi or y_lo > y_hi:
            continue

        xs = np.arange(x_lo, x_hi + 1, dtype=np.float64) + 0.5
        ys = np.arange(y_lo, y_hi + 1, dtype=np.float64) + 0.5
        gx, gy = np.meshgrid(xs, ys)

        # Edge functions; E >= 0 is inside for positive orientation, with
        # zero accepted only on top or left edges (screen y grows down).
        cover = np.ones(gx.shape, dtype=bool)
        w = []
        for (ex0, ey0, ex1, ey1) in (
            (ax, ay, bx, by), (bx, by, cx, cy), (cx, cy, ax, ay),
        ):
            e = (ex1 - ex0) * (gy - ey0) - (ey1 - ey0) * (gx - ex0)
            top_left = (ey1 < ey0) or (ey1 == ey0 and ex1 > ex0)
            cover &= (e > 0.0) | ((e == 0.0) & top_left)
            w.append(e)
        if not cover.any():
            continue

        # Perspective-correct depth: 1/z is affine in screen space.
        # w[1] is opposite vertex a, w[2] opposite b, w[0] opposite c.
        inv_z = (w[1] / area) / az + (w[2] / area) / bz + (w[0] / area) / cz
        frag_z = 1.0 / inv_z
        cover &= (frag_z > camera.near) & (frag_z < camera.far)
        if not cover.any():
            continue
        iy, ix = np.nonzero(cover)
        np.minimum.at(depth, (iy + y_lo, ix + x_lo), frag_z[iy, ix])

    return DepthBuffer(depth=depth, camera=camera)


def normalize_depth(
    buffer: DepthBuffer, noise_rng: np.random.Generator | None = None
) -> DepthImage:
    """Affine-map covered depths to [1, 255], nearest brightest.

    A constant-depth buffer maps to 255 everywhere it is covered. The
    background is 0 by default; passing ``noise_rng`` fills it with
    uniform noise instead (a conditioning-image variant — such images no
    longer identify the background, so keep the float buffer as truth).
    """
    covered = np.isfinite(buffer.depth)
    if not covered.any():
        raise DepthImageError("cannot normalize an empty depth buffer")
    d_min = float(buffer.depth[covered].min())
    d_max = float(buffer.depth[covered].max())
    pixels = np.zeros(buffer.depth.shape, dtype=np.uint8)
    # A range at float-noise level is a constant-depth surface; mapping it
    # across [1, 255] would amplify rounding noise into structure.
    if d_max - d_min <= 1e-9 * max(abs(d_max), 1.0):
        pixels[covered] = 255
    else:
        scaled = 1.0 + 254.0 * (d_max - buffer.depth[covered]) / (d_max - d_min)
        pixels[covered] = np.rint(scaled).astype(np.uint8)
    if noise_rng is not None:
        n_bg = int((~covered).sum())
        pixels[~covered] = noise_rng.integers(1, 256, size=n_bg).astype(np.uint8)
    meta = DepthMetadata(
        near=buffer.camera.near,
        far=buffer.camera.far,
        min_depth=d_min,
        max_depth=d_max,
        fov_degrees=buffer.camera.fov_degrees,
        distance=buffer.camera.distance,
        resolution=buffer.camera.resolution,
    )
    return DepthImage(pixels=pixels, metadata=meta)


def denormalize_depth(image: DepthImage) -> np.ndarray:
    """Invert normalize_depth using the stored metadata; background -> +inf."""
    if image.metadata is None:
        raise DepthImageError("depth image has no normalization metadata")
    m = image.metadata
    out = np.full(image.pixels.shape, np.inf, dtype=np.float64)
    covered = image.pixels > 0
    if m.max_depth == m.min_depth:
        out[covered] = m.min_depth
    else:
        out[covered] = m.max_depth - (image.pixels[covered].astype(np.float64) - 1.0) * (
            m.max_depth - m.min_depth
        ) / 254.0
    return out


def _sidecar_path(path: str) -> str:
    stem, _ = os.path.splitext(path)
    return stem + ".json"


def export_png(image: DepthImage, path: str) -> None:
    """Write an 8-bit grayscale PNG plus a JSON metadata sidecar."""
    Image.fromarray(image.pixels, mode="L").save(path, format="PNG")
    if image.metadata is not None:
        m = image.metadata
        sidecar = {
            "near": m.near,
            "far": m.far,
            "min_depth": m.min_depth,
            "max_depth": m.max_depth,
            "fov_degrees": m.fov_degrees,
            "distance": m.distance,
            "resolution": m.resolution,
        }
        with open(_sidecar_path(path), "w", encoding="utf-8") as f:
            json.dump(sidecar, f, sort_keys=True)
            f.write("\n")


def import_png(path: str) -> DepthImage:
    """Read a depth PNG; metadata is None when the sidecar is missing."""
    with Image.open(path) as im:
        if im.mode != "L":
            raise DepthImageError(f"{path}: expected 8-bit grayscale, got mode {im.mode}")
        pixels = np.asarray(im, dtype=np.uint8).copy()
    metadata = None
    sidecar = _sidecar_path(path)
    if os.path.exists(sidecar):
        with open(sidecar, "r", encoding="utf-8") as f:
            m = json.load(f)
        metadata = DepthMetadata(
            near=float(m["near"]),
            far=float(m["far"]),
            min_depth=float(m["min_depth"]),
            max_depth=float(m["max_depth"]),
            fov_degrees=float(m["fov_degrees"]),
            distance=float(m["distance"]),
            resolution=int(m["resolution"]),
        )
    return DepthImage(pixels=pixels, metadata=metadata)


# Raw float depth buffers: b"DBUF" | uint32 header length | JSON header |
# H*W little-endian float32 (inf kept as the background sentinel).

_DBUF_MAGIC = b"DBUF"


def save_depth_buffer(buffer: DepthBuffer, path: str) -> None:
    header = {
        "width": buffer.width,
        "height": buffer.height,
        "fov_degrees": buffer.camera.fov_degrees,
        "distance": buffer.camera.distance,
        "near": buffer.camera.near,
        "far": buffer.camera.far,
        "resolution": buffer.camera.resolution,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_DBUF_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(buffer.depth.astype("<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_depth_buffer(path: str) -> DepthBuffer:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _DBUF_MAGIC:
        raise DepthImageError("bad depth buffer magic")
    (header_len,) = struct.unpack_from("<I", data, 4)
    header = json.loads(data[8:8 + header_len].decode("utf-8"))
    h, w = int(header["height"]), int(header["width"])
    expected = 8 + header_len + h * w * 4
    if len(data) != expected:
        raise DepthImageError("depth buffer truncated or padded")
    depth = np.frombuffer(data, dtype="<f4", count=h * w,
                          offset=8 + header_len).reshape(h, w).astype(np.float64)
    camera = Camera(
        fov_degrees=float(header["fov_degrees"]),
        distance=float(header["distance"]),
        resolution=int(header["resolution"]),
        near=float(header["near"]),
        far=float(header["far"]),
    )
    return DepthBuffer(depth=depth, camera=camera)
