"""Colored point clouds: PLY IO, normalization, distortion, synthetic shapes.

PLY support is deliberately narrow: ascii and binary_little_endian, float32
x/y/z plus uint8 red/green/blue on a leading vertex element.  Extra scalar
properties (normals, alpha) are skipped; anything else is rejected loudly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class PlyError(ValueError):
    pass


class MalformedHeader(PlyError):
    pass


class MissingColorProperty(PlyError):
    pass


class TruncatedBody(PlyError):
    pass


class UnsupportedFormat(PlyError):
    pass


class EmptyCloud(ValueError):
    pass


class EmptyResult(ValueError):
    pass


DISTORTION_KINDS = ("downsample", "geometry_noise", "color_noise")


@dataclass
class PointCloud:
    """Point positions (n, 3) float32 plus one uint8 RGB color per point."""

    points: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.points = np.ascontiguousarray(np.asarray(self.points, dtype=np.float32))
        self.colors = np.ascontiguousarray(np.asarray(self.colors, dtype=np.uint8))
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (n, 3), got {self.points.shape}")
        if self.colors.shape != self.points.shape:
            raise ValueError(f"colors {self.colors.shape} must match points {self.points.shape}")
        if len(self.points) == 0:
            raise EmptyCloud("point cloud needs at least one point")
        if not np.isfinite(self.points).all():
            raise ValueError("point coordinates must be finite")

    def __len__(self):
        return len(self.points)


@dataclass
class DistortionSpec:
    """One synthetic degradation: kind, severity level, RNG seed.

    ``level`` is the keep-ratio in (0, 1] for downsample, or the noise sigma
    (coordinate units for geometry, fraction of the 255 color range for
    color) for the noise kinds.
    """

    kind: str
    level: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DISTORTION_KINDS:
            raise ValueError(f"unknown distortion kind {self.kind!r}, expected one of {DISTORTION_KINDS}")
        if not self.level > 0:
            raise ValueError("distortion level must be > 0")
        if self.kind == "downsample" and self.level > 1:
            raise ValueError("downsample keep-ratio must be <= 1")

    @classmethod
    def parse(cls, text):
        """Parse the CLI form ``kind:level:seed`` (seed optional)."""
        parts = text.split(":")
        if len(parts) not in (2, 3):
            raise ValueError(f"expected kind:level[:seed], got {text!r}")
        seed = int(parts[2]) if len(parts) == 3 else 0
        return cls(parts[0], float(parts[1]), seed)


# --- PLY ------------------------------------------------------------------

_PLY_SCALARS = {
    "char": "<i1", "int8": "<i1",
    "uchar": "<u1", "uint8": "<u1",
    "short": "<i2", "int16": "<i2",
    "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4",
    "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4",
    "double": "<f8", "float64": "<f8",
}

_REQUIRED_FLOAT = ("x", "y", "z")
_REQUIRED_COLOR = ("red", "green", "blue")


def _parse_header(blob):
    end = blob.find(b"end_header")
    if end < 0:
        raise MalformedHeader("no end_header line")
    newline = blob.find(b"\n", end)
    if newline < 0:
        raise MalformedHeader("header is not newline-terminated")
    lines = [ln.strip() for ln in blob[:end].decode("ascii", errors="replace").splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines or lines[0] != "ply":
        raise MalformedHeader("missing ply magic")

    fmt = None
    elements = []  # (name, count, [(prop_name, type_tag)])
    for line in lines[1:]:
        parts = line.split()
        if parts[0] == "comment":
            continue
        if parts[0] == "format":
            if len(parts) < 2:
                raise MalformedHeader(f"bad format line: {line!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3:
                raise MalformedHeader(f"bad element line: {line!r}")
            try:
                elements.append((parts[1], int(parts[2]), []))
            except ValueError as exc:
                raise MalformedHeader(f"bad element count in {line!r}") from exc
        elif parts[0] == "property":
            if not elements:
                raise MalformedHeader("property before any element")
            if parts[1] == "list":
                elements[-1][2].append((parts[-1], "list"))
            else:
                if len(parts) != 3:
                    raise MalformedHeader(f"bad property line: {line!r}")
                elements[-1][2].append((parts[2], parts[1]))
        else:
            raise MalformedHeader(f"unrecognized header line: {line!r}")

    if fmt is None:
        raise MalformedHeader("missing format line")
    if fmt == "binary_big_endian":
        raise UnsupportedFormat("big-endian PLY is not supported")
    if fmt not in ("ascii", "binary_little_endian"):
        raise UnsupportedFormat(f"unknown PLY format {fmt!r}")
    if not elements:
        raise MalformedHeader("no elements declared")
    return fmt, elements, newline + 1


def load_ply(path):
    """Read a colored point cloud; the vertex element must come first."""
    blob = Path(path).read_bytes()
    fmt, elements, body_start = _parse_header(blob)
    name, count, props = elements[0]
    if name != "vertex":
        raise UnsupportedFormat(f"first element is {name!r}; only vertex-first files are supported")
    if count < 1:
        raise MalformedHeader("vertex count must be >= 1")

    prop_names = [p for p, _ in props]
    for p in _REQUIRED_FLOAT:
        if p not in prop_names:
            raise MalformedHeader(f"vertex element lacks property {p!r}")
        if props[prop_names.index(p)][1] not in ("float", "float32"):
            raise UnsupportedFormat(f"property {p!r} must be float32")
    for p in _REQUIRED_COLOR:
        if p not in prop_names:
            raise MissingColorProperty(f"vertex element lacks property {p!r}")
        if props[prop_names.index(p)][1] not in ("uchar", "uint8"):
            raise UnsupportedFormat(f"property {p!r} must be uchar")
    for p, tag in props:
        if tag == "list":
            raise UnsupportedFormat("list properties on the vertex element are not supported")

    if fmt == "ascii":
        tokens = blob[body_start:].split()
        need = count * len(props)
        if len(tokens) < need:
            raise TruncatedBody(f"expected {need} vertex values, found {len(tokens)}")
        try:
            table = np.array(tokens[:need], dtype=np.float64).reshape(count, len(props))
        except ValueError as exc:
            raise TruncatedBody(f"non-numeric vertex data: {exc}") from exc
        cols = {p: table[:, i] for i, (p, _) in enumerate(props)}
    else:
        dtype = np.dtype([(p, _PLY_SCALARS[t]) for p, t in props])
        need = count * dtype.itemsize
        body = blob[body_start:]
        if len(body) < need:
            raise TruncatedBody(f"expected {need} vertex bytes, found {len(body)}")
        records = np.frombuffer(body[:need], dtype=dtype)
        cols = {p: records[p] for p, _ in props}

    points = np.stack([cols[p] for p in _REQUIRED_FLOAT], axis=1).astype(np.float32)
    colors = np.stack([cols[p] for p in _REQUIRED_COLOR], axis=1)
    return PointCloud(points, np.clip(np.rint(colors), 0, 255).astype(np.uint8))


def save_ply(pc, path, format="binary"):
    """Write the cloud so that ``load_ply`` reproduces it (bit-exact for binary)."""
    if format not in ("ascii", "binary"):
        raise ValueError(f"format must be 'ascii' or 'binary', got {format!r}")
    header = [
        "ply",
        "format ascii 1.0" if format == "ascii" else "format binary_little_endian 1.0",
        f"element vertex {len(pc)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if format == "ascii":
            for (x, y, z), (r, g, b) in zip(pc.points, pc.colors):
                fh.write(f"{x:.9g} {y:.9g} {z:.9g} {r} {g} {b}\n".encode("ascii"))
        else:
            dtype = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                              ("red", "u1"), ("green", "u1"), ("blue", "u1")])
            records = np.empty(len(pc), dtype=dtype)
            for i, p in enumerate(_REQUIRED_FLOAT):
                records[p] = pc.points[:, i]
            for i, p in enumerate(_REQUIRED_COLOR):
                records[p] = pc.colors[:, i]
            fh.write(records.tobytes())


# --- geometry -------------------------------------------------------------

def normalize_unit(pc):
    """Center on the centroid and scale so the largest |coordinate| is 1.

    An all-coincident cloud degenerates to every point at the origin.
    Colors pass through unchanged.
    """
    if len(pc) == 0:
        raise EmptyCloud("cannot normalize an empty cloud")
    pts = pc.points.astype(np.float64)
    centered = pts - pts.mean(axis=0)
    extent = np.abs(centered).max()
    if extent > 0:
        centered /= extent
    return PointCloud(centered.astype(np.float32), pc.colors.copy())


def distort(pc, spec):
    """Apply one DistortionSpec; a pure function of (cloud, spec)."""
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "downsample":
        n = len(pc)
        keep = int(round(spec.level * n))
        if keep == 0:
            raise EmptyResult(f"downsample ratio {spec.level} of {n} points keeps nothing")
        idx = _fisher_yates_prefix(n, keep, rng)
        return PointCloud(pc.points[idx], pc.colors[idx])
    if spec.kind == "geometry_noise":
        noise = rng.normal(0.0, spec.level, size=pc.points.shape)
        return PointCloud((pc.points.astype(np.float64) + noise).astype(np.float32), pc.colors.copy())
    # color noise sigma is a fraction of the full 255 range
    noise = rng.normal(0.0, 255.0 * spec.level, size=pc.colors.shape)
    shifted = np.clip(np.rint(pc.colors.astype(np.float64) + noise), 0, 255)
    return PointCloud(pc.points.copy(), shifted.astype(np.uint8))


def _fisher_yates_prefix(n, k, rng):
    """First k entries of a seeded Fisher-Yates shuffle, returned in original order."""
    idx = np.arange(n)
    for i in range(k):
        j = i + int(rng.integers(0, n - i))
        idx[i], idx[j] = idx[j], idx[i]
    return np.sort(idx[:k])


# --- synthetic shapes -----------------------------------------------------

SHAPE_KINDS = ("sphere", "cube", "torus")


def synth_shape(kind, n, seed=0):
    """Sample ``n`` surface points of a canonical shape, deterministically.

    Spheres with even n >= 8 are built from the six axis poles plus
    antipodal pairs, which pins the centroid to the origin and the largest
    coordinate to the radius exactly.
    """
    if kind not in SHAPE_KINDS:
        raise ValueError(f"unknown shape kind {kind!r}, expected one of {SHAPE_KINDS}")
    if n < 1:
        raise ValueError("need n >= 1 points")
    rng = np.random.default_rng(seed)
    if kind == "sphere":
        pts = _sphere_points(n, rng)
    elif kind == "cube":
        face = rng.integers(0, 6, size=n)
        uv = rng.uniform(-1.0, 1.0, size=(n, 2))
        pts = np.empty((n, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        for a in range(3):
            sel = axis == a
            others = [i for i in range(3) if i != a]
            pts[sel, a] = sign[sel]
            pts[sel, others[0]] = uv[sel, 0]
            pts[sel, others[1]] = uv[sel, 1]
    else:
        pts = _torus_points(n, rng, major=1.0, minor=0.4)
    return PointCloud(pts.astype(np.float32), _colormap(pts[:, 2]))


def _sphere_points(n, rng):
    poles = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=np.float64)
    if n % 2 == 0 and n >= 8:
        half = (n - 6) // 2
        dirs = rng.normal(size=(half, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return np.concatenate([poles, dirs, -dirs])
    if n % 2 == 0:
        half = n // 2
        dirs = rng.normal(size=(half, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return np.concatenate([dirs, -dirs])
    dirs = rng.normal(size=(n, 3))
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def _torus_points(n, rng, major, minor):
    pts = np.empty((n, 3))
    filled = 0
    while filled < n:
        m = max(n - filled, 16)
        u = rng.uniform(0.0, 2.0 * np.pi, size=m)
        v = rng.uniform(0.0, 2.0 * np.pi, size=m)
        # rejection keeps surface density uniform over the tube angle
        accept = rng.uniform(0.0, 1.0, size=m) < (major + minor * np.cos(v)) / (major + minor)
        u, v = u[accept], v[accept]
        take = min(len(u), n - filled)
        ring = major + minor * np.cos(v[:take])
        pts[filled:filled + take, 0] = ring * np.cos(u[:take])
        pts[filled:filled + take, 1] = minor * np.sin(v[:take])
        pts[filled:filled + take, 2] = ring * np.sin(u[:take])
        filled += take
    return pts


def _colormap(coord):
    """Fixed smooth colormap over one coordinate -> uint8 RGB."""
    lo, hi = float(np.min(coord)), float(np.max(coord))
    t = np.full_like(coord, 0.5, dtype=np.float64) if hi - lo < 1e-12 else (coord - lo) / (hi - lo)
    rgb = np.stack([t, np.sin(np.pi * t) ** 2, 1.0 - t], axis=1)
    return np.rint(rgb * 255.0).astype(np.uint8)
