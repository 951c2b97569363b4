"""Rotating-sweep measurement simulation.

A linear sensor head of 2n+1 electrode sites rotates above the sample.
At each rotation angle, every electrode pair at a given gap integrates
the permittivity contrast along lines through the sample, weighted by
the pair's depth-sensitivity map.  The result per gap is a sinogram of
shape (n_angles, 2n+1-gap).

Sensor-frame convention: the line with signed offset s at angle theta
passes through the points (s*cos(theta) - t*sin(theta),
s*sin(theta) + t*cos(theta)) as t sweeps the chord, so the backprojector
can use s = x*cos(theta) + y*sin(theta).
"""

import hashlib
import multiprocessing
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .phantom import format_phantom
from .weights import pack_weight

__all__ = [
    "SensorGeometry",
    "SinogramSet",
    "BoundingBoxError",
    "SinogramFileError",
    "project_slice",
    "simulate_sweep",
    "quantize",
    "pack_sinogram",
    "save_sinogram",
    "load_sinogram",
]

_ECTS_MAGIC = b"ECTS"
_ECTS_VERSION = 1
_ECTS_HEADER = struct.Struct("<4sH2I3dH")
_GAP_TAG = struct.Struct("<H")


class BoundingBoxError(ValueError):
    """Phantom extends beyond the scan circle."""


class SinogramFileError(ValueError):
    """Sinogram file is not a well-formed ECTS payload."""


@dataclass(frozen=True)
class SensorGeometry:
    """Rotating head with 2n+1 electrode sites at pitch d millimetres."""

    n: int = 27
    pitch: float = 2.5
    n_angles: int = 180
    standoff: float = 2.0
    gaps: tuple = (1, 2, 3, 4)
    quant_delta: float = 0.0

    def __post_init__(self):
        gaps = tuple(sorted({int(k) for k in self.gaps}))
        object.__setattr__(self, "gaps", gaps)
        if self.n < 4:
            raise ValueError("n must be at least 4")
        if self.n_angles < 1:
            raise ValueError("n_angles must be at least 1")
        if self.pitch <= 0:
            raise ValueError("pitch must be positive")
        if self.standoff < 0:
            raise ValueError("standoff must be nonnegative")
        if not gaps or gaps[0] < 1 or gaps[-1] > 4:
            raise ValueError("gaps must be a nonempty subset of {1, 2, 3, 4}")
        if self.quant_delta < 0:
            raise ValueError("quant_delta must be nonnegative")

    @property
    def electrode_count(self):
        return 2 * self.n + 1

    @property
    def scan_radius(self):
        return self.n * self.pitch

    def detector_count(self, gap):
        return 2 * self.n + 1 - gap

    def detector_offsets(self, gap):
        """Left-electrode positions a_i (mm) for pairs at the given gap."""
        return (np.arange(self.detector_count(gap)) - self.n) * self.pitch

    def angles(self):
        return np.arange(self.n_angles) * (np.pi / self.n_angles)


@dataclass
class SinogramSet:
    """Per-gap sinograms plus the geometry and provenance that made them."""

    geometry: SensorGeometry
    angles: np.ndarray
    data: dict
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=float)
        if self.angles.shape != (self.geometry.n_angles,):
            raise ValueError("angles length must match geometry.n_angles")
        self.data = {int(k): np.asarray(v, dtype=float)
                     for k, v in self.data.items()}
        if set(self.data) != set(self.geometry.gaps):
            raise ValueError("data keys must match geometry.gaps")
        for k, arr in self.data.items():
            want = (self.geometry.n_angles, self.geometry.detector_count(k))
            if arr.shape != want:
                raise ValueError(f"gap {k} data must have shape {want}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"gap {k} data contains non-finite values")
        meta = {}
        for k, v in self.metadata.items():
            k, v = str(k), str(v)
            if "=" in k or "\n" in k or "\n" in v:
                raise ValueError("metadata keys/values must be single-line, "
                                 "'=' not allowed in keys")
            meta[k] = v
        self.metadata = meta


def _xy_corners(bounds):
    xmin, xmax, ymin, ymax = bounds[:4]
    return ((xmin, ymin), (xmin, ymax), (xmax, ymin), (xmax, ymax))


def _check_scan_circle(bounds, radius):
    reach = max(np.hypot(x, y) for x, y in _xy_corners(bounds))
    if reach > radius + 1e-9:
        raise BoundingBoxError(
            f"phantom reaches {reach:.3f} mm, beyond the scan radius "
            f"{radius:.3f} mm")


def _circumcircle(bounds):
    cx = 0.5 * (bounds[0] + bounds[1])
    cy = 0.5 * (bounds[2] + bounds[3])
    radius = 0.5 * np.hypot(bounds[1] - bounds[0], bounds[3] - bounds[2])
    return cx, cy, radius


def project_slice(spec, theta, s, z, step, scan_radius=None):
    """Line integral of (permittivity - 1) at height z.

    The line sits at signed offset s (mm) from the rotation axis at angle
    theta; integration uses composite midpoint quadrature with the given
    step bound over the chord of the phantom's bounding circle.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    bounds = spec.bounds()
    if bounds is None:
        return 0.0
    if scan_radius is not None:
        _check_scan_circle(bounds, scan_radius)
    cx, cy, radius = _circumcircle(bounds)
    c, sn = np.cos(theta), np.sin(theta)
    sc = cx * c + cy * sn
    half_sq = radius**2 - (s - sc) ** 2
    if half_sq <= 0:
        return 0.0
    half = np.sqrt(half_sq)
    tc = -cx * sn + cy * c
    m = max(1, int(np.ceil(2 * half / step)))
    dt = 2 * half / m
    t = (tc - half) + (np.arange(m) + 0.5) * dt
    x = s * c - t * sn
    y = s * sn + t * c
    from .phantom import eval_permittivity

    vals = eval_permittivity(spec, x, y, z)
    return float(np.sum(vals - 1.0) * dt)


def _normalize_weights(weights, geometry):
    if hasattr(weights, "values") and not hasattr(weights, "gap"):
        grids = dict(weights)
    else:
        grids = {}
        for g in weights:
            if g.gap in grids:
                raise ValueError(f"duplicate weight grid for gap {g.gap}")
            grids[g.gap] = g
    grids = {int(k): g for k, g in grids.items()}
    if set(grids) != set(geometry.gaps):
        raise ValueError("weight gaps must match geometry.gaps")
    for k, g in grids.items():
        if g.gap != k:
            raise ValueError(f"weight grid keyed {k} reports gap {g.gap}")
        if np.max(np.abs(g.values)) != 1.0:
            raise ValueError(f"gap {k} weight grid is not conditioned")
    ref = next(iter(grids.values()))
    for g in grids.values():
        same = (g.dx == ref.dx and g.dz == ref.dz and g.nz == ref.nz
                and g.x_origin == ref.x_origin and g.z_origin == ref.z_origin)
        if not same:
            raise ValueError("weight grids must share dx, dz, nz and origins")
    return grids


# Context shared by the per-angle workers; set once per sweep (the pool is
# fork-started, so workers inherit it through the initializer).
_SWEEP_CTX = None


def _set_sweep_context(ctx):
    global _SWEEP_CTX
    _SWEEP_CTX = ctx


def _sweep_angle(j):
    ctx = _SWEEP_CTX
    theta = ctx["angles"][j]
    c, sn = np.cos(theta), np.sin(theta)
    cx, cy = ctx["center"]
    rb = ctx["radius"]
    m = ctx["n_nodes"]
    dt = 2 * rb / m
    tc = -cx * sn + cy * c
    t = (tc - rb) + (np.arange(m) + 0.5) * dt
    x_mm = ctx["x_mm"]
    px = x_mm[:, None] * c - t[None, :] * sn
    py = x_mm[:, None] * sn + t[None, :] * c
    prims = ctx["spec"].primitives
    n_x = x_mm.size
    z_heights = ctx["z_heights"]
    proj = np.empty((z_heights.size, n_x))
    cache = {}
    for iz, zh in enumerate(z_heights):
        key = tuple(p.footprint_token(zh) for p in prims)
        row = cache.get(key)
        if row is None:
            active = [p for p, tok in zip(prims, key) if tok is not None]
            if not active:
                row = np.zeros(n_x)
            else:
                eps = np.ones_like(px)
                for prim in active:
                    eps = np.where(prim.contains(px, py, zh), prim.contrast,
                                   eps)
                row = (eps - 1.0).sum(axis=1) * dt
            cache[key] = row
        proj[iz] = row
    spp = ctx["spp"]
    out = {}
    for k, w in ctx["weights"].items():
        ndet = ctx["ndet"][k]
        win = sliding_window_view(proj, w.shape[1], axis=1)[:, ::spp][:, :ndet]
        out[k] = np.einsum("zdx,zx->d", win, w) * ctx["cell"]
    return out


def simulate_sweep(spec, weights, geometry, workers=1, metadata=None):
    """Simulate a full rotation sweep over every gap in the geometry.

    weights maps gap -> conditioned WeightGrid (an iterable of grids works
    too).  All grids must share their sampling so detector windows land on
    a common lattice; the lattice step must divide the pitch exactly.
    """
    if workers < 1:
        raise ValueError("workers must be at least 1")
    grids = _normalize_weights(weights, geometry)
    ref = next(iter(grids.values()))
    spp = int(round(1.0 / ref.dx))
    if spp < 1 or abs(spp * ref.dx - 1.0) > 1e-9:
        raise ValueError("1/dx must be an integer number of lattice steps")
    bounds = spec.bounds()
    if bounds is not None:
        _check_scan_circle(bounds, geometry.scan_radius)

    meta = {"phantom_sha256":
            hashlib.sha256(format_phantom(spec).encode("utf-8")).hexdigest()}
    for k in geometry.gaps:
        meta[f"weight_sha256_k{k}"] = hashlib.sha256(
            pack_weight(grids[k])).hexdigest()
    if metadata:
        meta.update({str(k): str(v) for k, v in metadata.items()})

    p = geometry.n_angles
    data = {k: np.zeros((p, geometry.detector_count(k)))
            for k in geometry.gaps}
    if bounds is not None:
        cx, cy, radius = _circumcircle(bounds)
        step = geometry.pitch / 4
        n_nodes = max(1, int(np.ceil(2 * radius / step)))
        n_lattice = max((geometry.detector_count(k) - 1) * spp + grids[k].nx
                        for k in geometry.gaps)
        x_mm = ((-geometry.n + ref.x_origin + np.arange(n_lattice) * ref.dx)
                * geometry.pitch)
        z_heights = (geometry.standoff
                     + (ref.z_origin + np.arange(ref.nz) * ref.dz)
                     * geometry.pitch)
        cell = (ref.dx * geometry.pitch) * (ref.dz * geometry.pitch)
        ctx = {
            "spec": spec,
            "angles": geometry.angles(),
            "center": (cx, cy),
            "radius": radius,
            "n_nodes": n_nodes,
            "x_mm": x_mm,
            "z_heights": z_heights,
            "spp": spp,
            "weights": {k: grids[k].values for k in geometry.gaps},
            "ndet": {k: geometry.detector_count(k) for k in geometry.gaps},
            "cell": cell,
        }
        if workers == 1:
            _set_sweep_context(ctx)
            try:
                rows = [_sweep_angle(j) for j in range(p)]
            finally:
                _set_sweep_context(None)
        else:
            mp = multiprocessing.get_context("fork")
            with mp.Pool(min(workers, p), initializer=_set_sweep_context,
                         initargs=(ctx,)) as pool:
                rows = pool.map(_sweep_angle, range(p))
        for j, out in enumerate(rows):
            for k in geometry.gaps:
                data[k][j] = out[k]
    return SinogramSet(geometry=geometry, angles=geometry.angles(),
                       data=data, metadata=meta)


def quantize(sino, delta=None):
    """Snap every sample to the nearest multiple of delta (ties away from 0).

    delta=None picks the default step: the global peak magnitude over all
    gaps divided by 140.  delta=0 leaves the data untouched.  The applied
    step is recorded on the returned geometry.
    """
    if delta is None:
        peak = max(np.max(np.abs(a)) for a in sino.data.values())
        delta = peak / 140.0
    delta = float(delta)
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    if delta == 0.0:
        data = {k: a.copy() for k, a in sino.data.items()}
    else:
        data = {k: np.copysign(np.floor(np.abs(a) / delta + 0.5), a) * delta
                for k, a in sino.data.items()}
    geometry = replace(sino.geometry, quant_delta=delta)
    return SinogramSet(geometry=geometry, angles=sino.angles.copy(),
                       data=data, metadata=dict(sino.metadata))


def pack_sinogram(sino):
    geom = sino.geometry
    parts = [_ECTS_HEADER.pack(_ECTS_MAGIC, _ECTS_VERSION, geom.n,
                               geom.n_angles, geom.pitch, geom.standoff,
                               geom.quant_delta, len(geom.gaps))]
    for k in geom.gaps:
        parts.append(_GAP_TAG.pack(k))
        parts.append(sino.data[k].astype("<f4").tobytes())
    tail = "".join(f"{k}={v}\n" for k, v in sorted(sino.metadata.items()))
    parts.append(tail.encode("utf-8"))
    return b"".join(parts)


def save_sinogram(sino, path):
    with open(path, "wb") as fh:
        fh.write(pack_sinogram(sino))


def load_sinogram(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _ECTS_HEADER.size:
        raise SinogramFileError("file shorter than the ECTS header")
    magic, version, n, p, pitch, standoff, quant_delta, n_gaps = \
        _ECTS_HEADER.unpack_from(blob)
    if magic != _ECTS_MAGIC:
        raise SinogramFileError(f"bad magic {magic!r}")
    if version != _ECTS_VERSION:
        raise SinogramFileError(f"unsupported version {version}")
    offset = _ECTS_HEADER.size
    data = {}
    for _ in range(n_gaps):
        if offset + _GAP_TAG.size > len(blob):
            raise SinogramFileError("truncated gap table")
        (k,) = _GAP_TAG.unpack_from(blob, offset)
        offset += _GAP_TAG.size
        if k in data:
            raise SinogramFileError(f"duplicate gap {k}")
        count = p * (2 * n + 1 - k)
        end = offset + 4 * count
        if end > len(blob):
            raise SinogramFileError(f"truncated payload for gap {k}")
        data[k] = np.frombuffer(blob[offset:end], dtype="<f4").astype(
            float).reshape(p, 2 * n + 1 - k)
        offset = end
    metadata = {}
    try:
        tail = blob[offset:].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise SinogramFileError(f"bad metadata block: {exc}") from None
    for line in tail.splitlines():
        if not line:
            continue
        if "=" not in line:
            raise SinogramFileError(f"metadata line without '=': {line!r}")
        key, value = line.split("=", 1)
        metadata[key] = value
    try:
        geometry = SensorGeometry(n=n, pitch=pitch, n_angles=p,
                                  standoff=standoff,
                                  gaps=tuple(sorted(data)),
                                  quant_delta=quant_delta)
    except ValueError as exc:
        raise SinogramFileError(f"bad geometry in header: {exc}") from None
    return SinogramSet(geometry=geometry, angles=geometry.angles(),
                       data=data, metadata=metadata)
