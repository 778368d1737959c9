"""Multi-view orthographic projection of a normalized point cloud.

A cloud is rotated in fixed angular strides about the vertical axis (the
horizontal view group) and about a horizontal axis (the vertical group),
rendered orthographically with z-buffered disc splatting onto a white
canvas, cropped to the content bounding box, and resized to the network
input resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .pointcloud import PointCloud


@dataclass
class Image:
    """RGB raster; pixels are (height, width, 3) floats in [0, 1], row-major."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"pixels must be (h, w, 3), got {self.pixels.shape}")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


@dataclass
class ProjectionConfig:
    """Knobs for the projection stage.

    The paper-level parameter is the rotation stride; raster size, point
    radius and the white-crop threshold are rendering choices kept here so
    they can be swept.
    """

    rs_deg: float = 36.0
    raster_size: int = 512
    point_radius: int = 1
    white_threshold: float = 0.999
    output_size: int = 224

    def __post_init__(self):
        if self.rs_deg <= 0 or self.rs_deg > 360:
            raise ValueError("rs_deg must be in (0, 360]")
        if self.raster_size < self.output_size:
            raise ValueError("raster_size must be >= output_size")
        if self.point_radius < 0:
            raise ValueError("point_radius must be >= 0")

    @property
    def views_per_direction(self):
        return int(360.0 // self.rs_deg)


@dataclass
class ProjectionGroup:
    """Ordered list of projected images for one rotation direction."""

    images: list
    direction: str  # "horizontal" | "vertical"
    rs_deg: float

    def __post_init__(self):
        if self.direction not in ("horizontal", "vertical"):
            raise ValueError(f"direction must be horizontal|vertical, got {self.direction!r}")
        expected = int(360.0 // self.rs_deg)
        if len(self.images) != expected:
            raise ValueError(f"expected {expected} views for stride {self.rs_deg}, got {len(self.images)}")

    def __len__(self):
        return len(self.images)

    def angle_deg(self, index):
        return index * self.rs_deg

    def as_batch(self):
        """Stack to a (N, 3, H, W) float32 array in view order."""
        return np.stack([img.pixels.transpose(2, 0, 1) for img in self.images]).astype(np.float32)

    @classmethod
    def from_batch(cls, batch, direction, rs_deg):
        images = [Image(np.ascontiguousarray(frame.transpose(1, 2, 0))) for frame in batch]
        return cls(images, direction, rs_deg)


_AXES = {
    "x": lambda c, s: np.array([[1, 0, 0], [0, c, -s], [0, s, c]]),
    "y": lambda c, s: np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]]),
}


def rotate(pc, axis, angle_deg):
    """Right-handed rotation of all positions about the X or Y axis."""
    key = axis.lower()
    if key not in _AXES:
        raise ValueError(f"axis must be X or Y, got {axis!r}")
    theta = math.radians(angle_deg)
    rot = _AXES[key](math.cos(theta), math.sin(theta))
    pts = pc.points.astype(np.float64) @ rot.T
    return PointCloud(pts.astype(np.float32), pc.colors.copy())


def render_ortho(pc, cfg):
    """Orthographic z-buffer render of a normalized cloud onto a white canvas.

    The [-1, 1] x/y box maps onto the raster with a 5% margin per side;
    each point splats a disc of ``point_radius`` pixels and the point with
    the largest z claims every contested pixel (ties go to the later point).
    Pixels falling outside the canvas are discarded.
    """
    size = cfg.raster_size
    pts = pc.points.astype(np.float64)
    span = 0.90 * size
    cols = np.floor((pts[:, 0] + 1.0) / 2.0 * span + 0.05 * size).astype(np.int64)
    rows = np.floor((1.0 - pts[:, 1]) / 2.0 * span + 0.05 * size).astype(np.int64)

    # paint in priority order (descending z, later index first on ties) and
    # let the first write per pixel win
    order = np.lexsort((np.arange(len(pts)), pts[:, 2]))[::-1]
    cols, rows = cols[order], rows[order]
    shades = (pc.colors[order].astype(np.float32) / 255.0)

    radius = cfg.point_radius
    offsets = [(dy, dx)
               for dy in range(-radius, radius + 1)
               for dx in range(-radius, radius + 1)
               if dy * dy + dx * dx <= radius * radius]
    dy = np.array([o[0] for o in offsets])
    dx = np.array([o[1] for o in offsets])

    splat_rows = (rows[:, None] + dy[None, :]).ravel()
    splat_cols = (cols[:, None] + dx[None, :]).ravel()
    splat_shades = np.repeat(shades, len(offsets), axis=0)
    inside = (splat_rows >= 0) & (splat_rows < size) & (splat_cols >= 0) & (splat_cols < size)
    flat = splat_rows[inside] * size + splat_cols[inside]
    splat_shades = splat_shades[inside]

    canvas = np.ones((size * size, 3), dtype=np.float32)
    uniq, first = np.unique(flat, return_index=True)
    canvas[uniq] = splat_shades[first]
    return Image(canvas.reshape(size, size, 3))


def crop_content(img, white_threshold):
    """Tight bounding box of non-white pixels; all-white input passes through."""
    mask = img.pixels.min(axis=2) < white_threshold
    row_any = mask.any(axis=1)
    if not row_any.any():
        return Image(img.pixels.copy())
    col_any = mask.any(axis=0)
    r0, r1 = np.flatnonzero(row_any)[[0, -1]]
    c0, c1 = np.flatnonzero(col_any)[[0, -1]]
    return Image(img.pixels[r0:r1 + 1, c0:c1 + 1].copy())


def resize_bilinear(img, width, height):
    """Bilinear resample with half-pixel centers and edge clamping."""
    if img.width < 1 or img.height < 1:
        raise ValueError("source image must be at least 1x1")
    src = img.pixels.astype(np.float64)
    sh, sw = src.shape[:2]

    sx = np.clip((np.arange(width) + 0.5) * (sw / width) - 0.5, 0.0, sw - 1.0)
    sy = np.clip((np.arange(height) + 0.5) * (sh / height) - 0.5, 0.0, sh - 1.0)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, sw - 1)
    y1 = np.minimum(y0 + 1, sh - 1)
    fx = (sx - x0)[None, :, None]
    fy = (sy - y0)[:, None, None]

    top = src[y0][:, x0] + fx * (src[y0][:, x1] - src[y0][:, x0])
    bottom = src[y1][:, x0] + fx * (src[y1][:, x1] - src[y1][:, x0])
    out = top + fy * (bottom - top)
    return Image(np.clip(out, 0.0, 1.0).astype(np.float32))


def project_views(pc, cfg=None):
    """Render the horizontal and vertical view groups of a normalized cloud.

    Horizontal views rotate about the vertical (Y) axis, vertical views
    about the horizontal (X) axis, in strides of ``cfg.rs_deg`` starting at
    0 degrees.  Every returned image is output_size x output_size.
    """
    cfg = cfg or ProjectionConfig()
    groups = []
    for direction, axis in (("horizontal", "y"), ("vertical", "x")):
        images = []
        for i in range(cfg.views_per_direction):
            rotated = rotate(pc, axis, i * cfg.rs_deg)
            raster = render_ortho(rotated, cfg)
            cropped = crop_content(raster, cfg.white_threshold)
            images.append(resize_bilinear(cropped, cfg.output_size, cfg.output_size))
        groups.append(ProjectionGroup(images, direction, cfg.rs_deg))
    return groups[0], groups[1]

