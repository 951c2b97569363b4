"""Analytic 3D relative-permittivity phantoms and voxel rasterization.

A phantom is an ordered list of primitives (boxes, z-axis cylinders,
spheres, extruded polygons) over a background of 1; where primitives
overlap, the last one listed wins.  All coordinates are millimetres.
Analytic evaluation is exact at arbitrary points; voxel grids exist for
file interchange and externally supplied fields.
"""

import struct
from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "Box",
    "Cylinder",
    "Sphere",
    "ExtrudedPolygon",
    "PhantomSpec",
    "VoxelGrid",
    "PhantomParseError",
    "GridCoverageError",
    "VoxelFileError",
    "parse_phantom",
    "load_phantom",
    "format_phantom",
    "eval_permittivity",
    "rotated_z",
    "translated",
    "mirrored_x",
    "rasterize",
    "save_voxels",
    "load_voxels",
]

_ECTV_MAGIC = b"ECTV"
_ECTV_HEADER = struct.Struct("<4s3I6d")


class PhantomParseError(ValueError):
    """Malformed phantom text; message carries the offending line number."""


class GridCoverageError(ValueError):
    """Raster grid does not cover the phantom bounding box."""


class VoxelFileError(ValueError):
    """Voxel file is not a well-formed ECTV payload."""


def _check_contrast(contrast):
    if not contrast > 0:
        raise ValueError(f"contrast must be positive, got {contrast}")


@dataclass(frozen=True)
class Box:
    """Axis-extruded box, rotated about the z axis through its center."""

    center: tuple
    half_extents: tuple
    angle_deg: float
    contrast: float

    def __post_init__(self):
        _check_contrast(self.contrast)
        if min(self.half_extents) <= 0:
            raise ValueError("half extents must be positive")

    def contains(self, x, y, z):
        a = np.deg2rad(self.angle_deg)
        dx = np.asarray(x) - self.center[0]
        dy = np.asarray(y) - self.center[1]
        u = dx * np.cos(a) + dy * np.sin(a)
        v = -dx * np.sin(a) + dy * np.cos(a)
        hx, hy, hz = self.half_extents
        return ((np.abs(u) <= hx) & (np.abs(v) <= hy)
                & (np.abs(np.asarray(z) - self.center[2]) <= hz))

    def footprint_token(self, z):
        # xy footprint is z-independent inside the slab
        if abs(z - self.center[2]) <= self.half_extents[2]:
            return True
        return None

    def bounds(self):
        hx, hy, hz = self.half_extents
        a = np.deg2rad(self.angle_deg)
        # rotated footprint corner reach
        rx = abs(hx * np.cos(a)) + abs(hy * np.sin(a))
        ry = abs(hx * np.sin(a)) + abs(hy * np.cos(a))
        cx, cy, cz = self.center
        return (cx - rx, cx + rx, cy - ry, cy + ry, cz - hz, cz + hz)


@dataclass(frozen=True)
class Cylinder:
    """Circular cylinder with axis parallel to z."""

    cx: float
    cy: float
    z_lo: float
    z_hi: float
    radius: float
    contrast: float

    def __post_init__(self):
        _check_contrast(self.contrast)
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.z_hi <= self.z_lo:
            raise ValueError("z_hi must exceed z_lo")

    def contains(self, x, y, z):
        r2 = (np.asarray(x) - self.cx) ** 2 + (np.asarray(y) - self.cy) ** 2
        zz = np.asarray(z)
        return (r2 <= self.radius**2) & (zz >= self.z_lo) & (zz <= self.z_hi)

    def footprint_token(self, z):
        if self.z_lo <= z <= self.z_hi:
            return True
        return None

    def bounds(self):
        r = self.radius
        return (self.cx - r, self.cx + r, self.cy - r, self.cy + r,
                self.z_lo, self.z_hi)


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    contrast: float

    def __post_init__(self):
        _check_contrast(self.contrast)
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    def contains(self, x, y, z):
        cx, cy, cz = self.center
        r2 = ((np.asarray(x) - cx) ** 2 + (np.asarray(y) - cy) ** 2
              + (np.asarray(z) - cz) ** 2)
        return r2 <= self.radius**2

    def footprint_token(self, z):
        # the xy cross-section changes with height, so the token carries z
        if abs(z - self.center[2]) <= self.radius:
            return z
        return None

    def bounds(self):
        cx, cy, cz = self.center
        r = self.radius
        return (cx - r, cx + r, cy - r, cy + r, cz - r, cz + r)


@dataclass(frozen=True)
class ExtrudedPolygon:
    """Simple polygon in xy, extruded between two heights."""

    vertices: tuple  # ((x, y), ...) at least 3
    z_lo: float
    z_hi: float
    contrast: float

    def __post_init__(self):
        _check_contrast(self.contrast)
        if len(self.vertices) < 3:
            raise ValueError("polygon needs at least 3 vertices")
        if self.z_hi <= self.z_lo:
            raise ValueError("z_hi must exceed z_lo")
        object.__setattr__(self, "vertices",
                           tuple((float(a), float(b)) for a, b in self.vertices))

    def contains(self, x, y, z):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        inside = np.zeros(np.broadcast(x, y).shape, dtype=bool)
        verts = self.vertices
        # even-odd ray casting, edge by edge
        for (x1, y1), (x2, y2) in zip(verts, verts[1:] + verts[:1]):
            crosses = (y1 > y) != (y2 > y)
            with np.errstate(divide="ignore", invalid="ignore"):
                xi = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            inside ^= crosses & (x < xi)
        zz = np.asarray(z)
        return inside & (zz >= self.z_lo) & (zz <= self.z_hi)

    def footprint_token(self, z):
        if self.z_lo <= z <= self.z_hi:
            return True
        return None

    def bounds(self):
        xs = [v[0] for v in self.vertices]
        ys = [v[1] for v in self.vertices]
        return (min(xs), max(xs), min(ys), max(ys), self.z_lo, self.z_hi)


@dataclass(frozen=True)
class PhantomSpec:
    primitives: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))

    def bounds(self):
        """Union bounding box (xmin, xmax, ymin, ymax, zmin, zmax) or None."""
        if not self.primitives:
            return None
        boxes = np.array([p.bounds() for p in self.primitives])
        return (boxes[:, 0].min(), boxes[:, 1].max(), boxes[:, 2].min(),
                boxes[:, 3].max(), boxes[:, 4].min(), boxes[:, 5].max())


def eval_permittivity(spec, x, y, z):
    """Relative permittivity at (x, y, z) mm; last containing primitive wins."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    out = np.ones(np.broadcast(x, y, z).shape)
    for prim in spec.primitives:
        out = np.where(prim.contains(x, y, z), prim.contrast, out)
    return out.item() if out.ndim == 0 else out


def rotated_z(spec, angle):
    """Spec rotated by `angle` radians about the z axis through the origin."""
    c, s = np.cos(angle), np.sin(angle)

    def rot(px, py):
        return (c * px - s * py, s * px + c * py)

    prims = []
    for p in spec.primitives:
        if isinstance(p, Box):
            nx, ny = rot(p.center[0], p.center[1])
            prims.append(replace(p, center=(nx, ny, p.center[2]),
                                 angle_deg=p.angle_deg + np.rad2deg(angle)))
        elif isinstance(p, Cylinder):
            nx, ny = rot(p.cx, p.cy)
            prims.append(replace(p, cx=nx, cy=ny))
        elif isinstance(p, Sphere):
            nx, ny = rot(p.center[0], p.center[1])
            prims.append(replace(p, center=(nx, ny, p.center[2])))
        elif isinstance(p, ExtrudedPolygon):
            prims.append(replace(p, vertices=tuple(rot(a, b)
                                                   for a, b in p.vertices)))
        else:
            raise TypeError(f"unknown primitive {type(p).__name__}")
    return PhantomSpec(tuple(prims))


def translated(spec, dx, dy, dz=0.0):
    """Spec translated by (dx, dy, dz) mm."""
    prims = []
    for p in spec.primitives:
        if isinstance(p, Box):
            cx, cy, cz = p.center
            prims.append(replace(p, center=(cx + dx, cy + dy, cz + dz)))
        elif isinstance(p, Cylinder):
            prims.append(replace(p, cx=p.cx + dx, cy=p.cy + dy,
                                 z_lo=p.z_lo + dz, z_hi=p.z_hi + dz))
        elif isinstance(p, Sphere):
            cx, cy, cz = p.center
            prims.append(replace(p, center=(cx + dx, cy + dy, cz + dz)))
        elif isinstance(p, ExtrudedPolygon):
            prims.append(replace(p,
                                 vertices=tuple((a + dx, b + dy)
                                                for a, b in p.vertices),
                                 z_lo=p.z_lo + dz, z_hi=p.z_hi + dz))
        else:
            raise TypeError(f"unknown primitive {type(p).__name__}")
    return PhantomSpec(tuple(prims))


def mirrored_x(spec):
    """Spec reflected through the plane x = 0."""
    prims = []
    for p in spec.primitives:
        if isinstance(p, Box):
            cx, cy, cz = p.center
            prims.append(replace(p, center=(-cx, cy, cz),
                                 angle_deg=-p.angle_deg))
        elif isinstance(p, Cylinder):
            prims.append(replace(p, cx=-p.cx))
        elif isinstance(p, Sphere):
            cx, cy, cz = p.center
            prims.append(replace(p, center=(-cx, cy, cz)))
        elif isinstance(p, ExtrudedPolygon):
            prims.append(replace(p, vertices=tuple((-a, b)
                                                   for a, b in p.vertices)))
        else:
            raise TypeError(f"unknown primitive {type(p).__name__}")
    return PhantomSpec(tuple(prims))


def _parse_line(lineno, tokens):
    kind = tokens[0].lower()
    try:
        nums = [float(t) for t in tokens[1:]]
    except ValueError as exc:
        raise PhantomParseError(f"line {lineno}: bad number ({exc})") from None
    try:
        if kind == "box":
            if len(nums) != 8:
                raise ValueError("box needs cx cy cz hx hy hz theta_deg eps_r")
            return Box(center=tuple(nums[0:3]), half_extents=tuple(nums[3:6]),
                       angle_deg=nums[6], contrast=nums[7])
        if kind == "cylinder":
            if len(nums) != 6:
                raise ValueError("cylinder needs cx cy z0 z1 r eps_r")
            return Cylinder(cx=nums[0], cy=nums[1], z_lo=nums[2], z_hi=nums[3],
                            radius=nums[4], contrast=nums[5])
        if kind == "sphere":
            if len(nums) != 5:
                raise ValueError("sphere needs cx cy cz r eps_r")
            return Sphere(center=tuple(nums[0:3]), radius=nums[3],
                          contrast=nums[4])
        if kind == "polygon":
            if len(nums) < 9 or len(nums) % 2 == 0:
                raise ValueError("polygon needs z0 z1 eps_r x1 y1 x2 y2 x3 y3 ...")
            coords = nums[3:]
            verts = tuple(zip(coords[0::2], coords[1::2]))
            return ExtrudedPolygon(vertices=verts, z_lo=nums[0], z_hi=nums[1],
                                   contrast=nums[2])
    except ValueError as exc:
        raise PhantomParseError(f"line {lineno}: {exc}") from None
    raise PhantomParseError(f"line {lineno}: unknown primitive {kind!r}")


def parse_phantom(text):
    """Parse the line-oriented phantom format; '#' starts a comment."""
    prims = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        prims.append(_parse_line(lineno, line.split()))
    return PhantomSpec(tuple(prims))


def load_phantom(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_phantom(fh.read())


def format_phantom(spec):
    """Canonical text form; parse(format(spec)) reproduces the spec."""
    lines = []
    for p in spec.primitives:
        if isinstance(p, Box):
            lines.append("box %r %r %r %r %r %r %r %r"
                         % (*p.center, *p.half_extents, p.angle_deg, p.contrast))
        elif isinstance(p, Cylinder):
            lines.append("cylinder %r %r %r %r %r %r"
                         % (p.cx, p.cy, p.z_lo, p.z_hi, p.radius, p.contrast))
        elif isinstance(p, Sphere):
            lines.append("sphere %r %r %r %r %r" % (*p.center, p.radius,
                                                    p.contrast))
        elif isinstance(p, ExtrudedPolygon):
            coords = " ".join("%r %r" % v for v in p.vertices)
            lines.append("polygon %r %r %r %s" % (p.z_lo, p.z_hi, p.contrast,
                                                  coords))
        else:
            raise TypeError(f"unknown primitive {type(p).__name__}")
    return "\n".join(lines) + ("\n" if lines else "")


@dataclass(frozen=True)
class VoxelGrid:
    """Relative permittivity sampled at voxel centers.

    values[iz, iy, ix] sits at origin + (index + 0.5) * spacing per axis.
    """

    values: np.ndarray
    spacing: tuple
    origin: tuple

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        if vals.ndim != 3:
            raise ValueError("values must be (nz, ny, nx)")
        if min(self.spacing) <= 0:
            raise ValueError("spacing must be positive")
        if not np.all(vals > 0):
            raise ValueError("permittivity values must be positive")

    @property
    def shape_xyz(self):
        nz, ny, nx = self.values.shape
        return (nx, ny, nz)

    def sample(self, x, y, z):
        """Trilinear interpolation; outside the grid the background is 1."""
        nz, ny, nx = self.values.shape
        padded = np.pad(self.values, 1, constant_values=1.0)
        out_shape = np.broadcast(np.asarray(x), np.asarray(y), np.asarray(z)).shape
        coords = []
        for q, o, s, n in ((x, self.origin[0], self.spacing[0], nx),
                           (y, self.origin[1], self.spacing[1], ny),
                           (z, self.origin[2], self.spacing[2], nz)):
            f = (np.asarray(q, dtype=float) - o) / s - 0.5
            coords.append(np.broadcast_to(f, out_shape))
        acc = np.zeros(out_shape)
        base = [np.floor(f).astype(int) for f in coords]
        frac = [f - b for f, b in zip(coords, base)]
        for cz in (0, 1):
            wz = frac[2] if cz else 1.0 - frac[2]
            iz = np.clip(base[2] + cz + 1, 0, nz + 1)
            for cy in (0, 1):
                wy = frac[1] if cy else 1.0 - frac[1]
                iy = np.clip(base[1] + cy + 1, 0, ny + 1)
                for cx in (0, 1):
                    wx = frac[0] if cx else 1.0 - frac[0]
                    ix = np.clip(base[0] + cx + 1, 0, nx + 1)
                    acc += wz * wy * wx * padded[iz, iy, ix]
        # a full voxel beyond the border is pure background
        far = ((coords[0] < -1) | (coords[0] > nx) | (coords[1] < -1)
               | (coords[1] > ny) | (coords[2] < -1) | (coords[2] > nz))
        acc = np.where(far, 1.0, acc)
        return acc.item() if acc.ndim == 0 else acc


def rasterize(spec, shape, spacing, origin, supersample=False):
    """Sample the phantom onto a voxel grid.

    shape is (nx, ny, nz); spacing a scalar or per-axis triple (mm); origin
    the low corner of the voxel volume (mm).  With supersample=True each
    voxel averages a 2x2x2 stencil instead of its center value.
    """
    nx, ny, nz = shape
    spacing = np.broadcast_to(np.asarray(spacing, dtype=float), (3,))
    origin = np.asarray(origin, dtype=float)
    bounds = spec.bounds()
    if bounds is not None:
        lo = origin
        hi = origin + spacing * np.array([nx, ny, nz])
        bmin = np.array([bounds[0], bounds[2], bounds[4]])
        bmax = np.array([bounds[1], bounds[3], bounds[5]])
        if np.any(bmin < lo - 1e-9) or np.any(bmax > hi + 1e-9):
            raise GridCoverageError("grid does not cover the phantom bounds")
    xs = origin[0] + spacing[0] * (np.arange(nx) + 0.5)
    ys = origin[1] + spacing[1] * (np.arange(ny) + 0.5)
    zs = origin[2] + spacing[2] * (np.arange(nz) + 0.5)
    X = xs[None, None, :]
    Y = ys[None, :, None]
    Z = zs[:, None, None]
    if not supersample:
        values = eval_permittivity(spec, X, Y, Z)
        values = np.broadcast_to(values, (nz, ny, nx)).copy()
    else:
        values = np.zeros((nz, ny, nx))
        for ox in (-0.25, 0.25):
            for oy in (-0.25, 0.25):
                for oz in (-0.25, 0.25):
                    values += eval_permittivity(
                        spec, X + ox * spacing[0], Y + oy * spacing[1],
                        Z + oz * spacing[2])
        values /= 8.0
    return VoxelGrid(values=values, spacing=tuple(spacing), origin=tuple(origin))


def pack_voxels(grid):
    nz, ny, nx = grid.values.shape
    header = _ECTV_HEADER.pack(_ECTV_MAGIC, nx, ny, nz, *grid.spacing,
                               *grid.origin)
    return header + grid.values.astype("<f4").tobytes()


def save_voxels(grid, path):
    with open(path, "wb") as fh:
        fh.write(pack_voxels(grid))


def load_voxels(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _ECTV_HEADER.size:
        raise VoxelFileError("file shorter than the ECTV header")
    magic, nx, ny, nz, sx, sy, sz, ox, oy, oz = _ECTV_HEADER.unpack_from(blob)
    if magic != _ECTV_MAGIC:
        raise VoxelFileError(f"bad magic {magic!r}")
    payload = blob[_ECTV_HEADER.size:]
    if len(payload) != 4 * nx * ny * nz:
        raise VoxelFileError("payload length does not match dimensions")
    values = np.frombuffer(payload, dtype="<f4").reshape(nz, ny, nx)
    return VoxelGrid(values=values, spacing=(sx, sy, sz), origin=(ox, oy, oz))
