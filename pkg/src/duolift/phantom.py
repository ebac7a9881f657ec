"""Synthetic chest phantoms, parallel projections and volume utilities.

Axis convention for every volume is ``(D, H, W)``:

* ``D`` depth, the front-to-back axis collapsed by the frontal view,
* ``H`` height, head-to-foot,
* ``W`` width, left-to-right, collapsed by the lateral view.

A frontal projection is therefore ``H x W`` and a lateral projection is
``H x D``.  Geometry in :class:`PhantomSpec` is given in normalized
coordinates, where voxel ``i`` of an axis with ``n`` voxels sits at
``(i + 0.5) / n * 2 - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

AIR = 0.0
VIEWS = ("frontal", "lateral")
MASK_LABELS = ("lung", "vessel", "body")

# per-level decay of the vessel tree
RADIUS_DECAY = 0.7
LENGTH_DECAY = 0.75


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        check_volume(self.data)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self):
        return self.data.shape


@dataclass
class MaskVolume:
    data: np.ndarray
    label: str = "lung"

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {data.shape}")
        if not np.isin(data, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        if self.label not in MASK_LABELS:
            raise ValueError(f"unknown mask label {self.label!r}")
        self.data = data.astype(np.uint8)

    @property
    def shape(self):
        return self.data.shape


@dataclass
class Projection:
    data: np.ndarray
    view: str = "frontal"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise ValueError(f"projection must be 2D, got shape {self.data.shape}")
        if self.view not in VIEWS:
            raise ValueError(f"view must be one of {VIEWS}, got {self.view!r}")
        if not np.isfinite(self.data).all():
            raise ValueError("projection contains non-finite values")


def check_volume(data: np.ndarray) -> None:
    if data.ndim != 3:
        raise ValueError(f"volume must be 3D, got shape {data.shape}")
    if any(n < 4 or n % 4 for n in data.shape):
        raise ValueError(f"volume dims must be >= 4 and divisible by 4, got {data.shape}")
    if not np.isfinite(data).all():
        raise ValueError("volume contains non-finite values")
    if data.min() < 0.0 or data.max() > 1.0:
        raise ValueError(f"volume values must lie in [0, 1], got [{data.min()}, {data.max()}]")


@dataclass
class Ellipsoid:
    center: tuple[float, float, float]
    axes: tuple[float, float, float]
    intensity: float = 0.0


@dataclass
class Nodule:
    center: tuple[float, float, float]
    radius: float  # voxels
    intensity: float = 0.7


@dataclass
class VesselParams:
    branches: int = 3  # root branches per lung
    depth: int = 2  # bifurcation levels below each root
    radius_range: tuple[float, float] = (0.6, 1.6)  # voxels, (min, root)
    intensity: float = 0.9
    root_length: float = 0.45  # fraction of the lung's height semi-axis


# (depth, height, width) semi-axes in normalized coordinates
BODY_AXES = (0.75, 0.92, 0.9)
LUNG_AXES = (0.56, 0.74, 0.34)
LUNG_OFFSET = 0.43  # lung center distance from the midline along width


def _default_lungs() -> tuple[Ellipsoid, Ellipsoid]:
    return (
        Ellipsoid(center=(0.0, -0.03, -0.43), axes=(0.48, 0.64, 0.3), intensity=0.12),
        Ellipsoid(center=(0.0, -0.03, 0.43), axes=(0.48, 0.64, 0.3), intensity=0.12),
    )


@dataclass
class PhantomSpec:
    seed: int = 0
    dims: tuple[int, int, int] = (32, 32, 32)
    body: Ellipsoid = field(
        default_factory=lambda: Ellipsoid(center=(0.0, 0.0, 0.0), axes=(0.75, 0.92, 0.9), intensity=0.55)
    )
    lungs: tuple[Ellipsoid, Ellipsoid] = field(default_factory=_default_lungs)
    vessels: VesselParams = field(default_factory=VesselParams)
    nodules: list[Nodule] = field(default_factory=list)

    @classmethod
    def random(cls, seed: int, dims=(32, 32, 32), vessels: VesselParams | None = None) -> "PhantomSpec":
        """Jittered chest geometry; every primitive stays inside the volume."""
        rng = np.random.default_rng(seed)
        jit = lambda scale, n=3: rng.uniform(-scale, scale, size=n)  # noqa: E731

        body_axes = np.array(BODY_AXES) * (1 + jit(0.06))
        body = Ellipsoid(
            center=(0.0, 0.0, 0.0),
            axes=tuple(np.minimum(body_axes, 0.95)),
            intensity=float(0.55 + jit(0.05, 1)[0]),
        )
        lung_axes = np.array(LUNG_AXES) * np.array(body.axes) / np.array(BODY_AXES)
        lung_axes = lung_axes * (1 + jit(0.06))
        lungs = []
        for side in (-1, 1):
            offset = LUNG_OFFSET * body.axes[2] / BODY_AXES[2] + jit(0.02, 1)[0]
            c = (float(jit(0.02, 1)[0]), float(-0.03 + jit(0.03, 1)[0]), side * offset)
            lungs.append(Ellipsoid(center=c, axes=tuple(float(a) for a in lung_axes),
                                   intensity=float(0.12 + jit(0.03, 1)[0])))
        lungs = [_fit_inside(lung, body, dims) for lung in lungs]
        nodules = []
        for _ in range(rng.integers(0, 3)):
            lung = lungs[rng.integers(0, 2)]
            u = rng.uniform(-0.4, 0.4, size=3)
            c = tuple(float(lc + ua * la) for lc, ua, la in zip(lung.center, u, lung.axes))
            nodules.append(Nodule(center=c, radius=float(rng.uniform(1.0, 2.0) * dims[0] / 32),
                                  intensity=float(rng.uniform(0.6, 0.8))))
        return cls(seed=seed, dims=tuple(dims), body=body, lungs=tuple(lungs),
                   vessels=vessels or VesselParams(), nodules=nodules)

    def validate(self) -> None:
        if len(self.dims) != 3 or any(n < 4 or n % 4 for n in self.dims):
            raise ValueError(f"dims must be 3 values >= 4 and divisible by 4, got {self.dims}")
        for name, e in [("body", self.body), ("lung[0]", self.lungs[0]), ("lung[1]", self.lungs[1])]:
            if any(a <= 0 for a in e.axes):
                raise ValueError(f"{name} semi-axes must be positive, got {e.axes}")
            for k, (c, a) in enumerate(zip(e.center, e.axes)):
                if c - a < -1.0 or c + a > 1.0:
                    raise ValueError(
                        f"{name} extends outside the volume on axis {k}: center {c}, semi-axis {a}"
                    )
        v = self.vessels
        lo, hi = v.radius_range
        if v.branches < 0 or v.depth < 0:
            raise ValueError("vessel branches and depth must be >= 0")
        if not 0 < lo <= hi:
            raise ValueError(f"vessel radius range must satisfy 0 < min <= max, got {v.radius_range}")
        for n in self.nodules:
            if n.radius <= 0:
                raise ValueError(f"nodule radius must be positive, got {n.radius}")
            for k, c in enumerate(n.center):
                if not -1.0 <= c <= 1.0:
                    raise ValueError(f"nodule center {n.center} outside the volume on axis {k}")


def _fit_inside(lung: Ellipsoid, body: Ellipsoid, dims, wall: int = 2) -> Ellipsoid:
    """Shrink ``lung`` until a ``wall``-voxel tissue layer separates it from
    the body surface, so the lungs are enclosed cavities."""
    from scipy import ndimage

    inner = ndimage.binary_erosion(rasterize_ellipsoid(body, dims), iterations=wall)
    axes = np.asarray(lung.axes, dtype=np.float64)
    for _ in range(40):
        e = Ellipsoid(lung.center, tuple(float(a) for a in axes), lung.intensity)
        if not (rasterize_ellipsoid(e, dims) & ~inner).any():
            return e
        axes *= 0.96
    raise ValueError(f"cannot fit lung centered at {lung.center} inside the body")


def voxel_grid(dims) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normalized voxel-center coordinates, broadcastable to ``dims``."""
    axes = [(np.arange(n) + 0.5) / n * 2.0 - 1.0 for n in dims]
    return np.meshgrid(*axes, indexing="ij", sparse=True)


def rasterize_ellipsoid(e: Ellipsoid, dims) -> np.ndarray:
    z, y, x = voxel_grid(dims)
    r = ((z - e.center[0]) / e.axes[0]) ** 2 + ((y - e.center[1]) / e.axes[1]) ** 2 \
        + ((x - e.center[2]) / e.axes[2]) ** 2
    return r <= 1.0


def to_voxel(p, dims) -> np.ndarray:
    """Normalized coordinate -> continuous voxel index."""
    return (np.asarray(p, dtype=np.float64) + 1.0) / 2.0 * np.asarray(dims) - 0.5


def vessel_segments(spec: PhantomSpec) -> list[tuple[np.ndarray, np.ndarray, float]]:
    """Centerline segments ``(start, end, radius)`` in voxel index units.

    Each lung grows ``branches`` roots from its medial hilum; every segment
    splits into two children until ``depth`` levels are reached.
    """
    v = spec.vessels
    rng = np.random.default_rng([spec.seed, 7])
    r_min, r_root = v.radius_range
    dims = np.asarray(spec.dims, dtype=np.float64)
    segs = []

    def grow(p0, direction, length, radius, level):
        p1 = p0 + direction * length
        segs.append((p0, p1, max(radius, r_min)))
        if level >= v.depth:
            return
        for sign in (-1.0, 1.0):
            # rotate about a random axis perpendicular to the parent
            perp = np.cross(direction, rng.normal(size=3))
            perp /= np.linalg.norm(perp) + 1e-12
            angle = sign * rng.uniform(0.35, 0.7)
            child = np.cos(angle) * direction + np.sin(angle) * perp
            child /= np.linalg.norm(child)
            grow(p1, child, length * LENGTH_DECAY, radius * RADIUS_DECAY, level + 1)

    for lung in spec.lungs:
        center = to_voxel(lung.center, spec.dims)
        semi = np.asarray(lung.axes) * dims / 2.0
        side = 1.0 if lung.center[2] < 0 else -1.0  # points toward the midline
        hilum = center + np.array([0.0, 0.0, 0.55 * side * semi[2]])
        for _ in range(v.branches):
            d = np.array([rng.normal(0, 0.3), rng.uniform(-1.0, 1.0), -side * rng.uniform(0.3, 0.8)])
            d /= np.linalg.norm(d)
            grow(hilum, d, v.root_length * semi[1], r_root, 0)
    return segs


def rasterize_segments(segs, dims) -> np.ndarray:
    idx = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")
    pts = np.stack(idx, axis=-1)
    out = np.zeros(dims, dtype=bool)
    for p0, p1, r in segs:
        d = p1 - p0
        dd = float(d @ d)
        t = np.clip(((pts - p0) @ d) / dd, 0.0, 1.0) if dd > 0 else np.zeros(dims)
        nearest = p0 + t[..., None] * d
        out |= ((pts - nearest) ** 2).sum(-1) <= r * r
    return out


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, MaskVolume, MaskVolume]:
    """Render a phantom; returns ``(volume, lung_mask, vessel_mask)``.

    Lung masks are clipped to the body and vessel masks to the lungs, so
    ``vessel <= lung <= body`` holds voxelwise.  Nodules are drawn inside
    the lungs and count as lung tissue.
    """
    spec.validate()
    dims = tuple(spec.dims)
    body = rasterize_ellipsoid(spec.body, dims)
    vol = np.full(dims, AIR, dtype=np.float32)
    vol[body] = spec.body.intensity

    lung = np.zeros(dims, dtype=bool)
    for e in spec.lungs:
        m = rasterize_ellipsoid(e, dims) & body
        vol[m] = e.intensity
        lung |= m

    if spec.nodules:
        idx = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")
        for n in spec.nodules:
            c = to_voxel(n.center, dims)
            m = sum((g - ci) ** 2 for g, ci in zip(idx, c)) <= n.radius ** 2
            vol[m & lung] = n.intensity

    vessel = np.zeros(dims, dtype=bool)
    if spec.vessels.branches:
        vessel = rasterize_segments(vessel_segments(spec), dims) & lung
        vol[vessel] = spec.vessels.intensity

    return (
        Volume(np.clip(vol, 0.0, 1.0)),
        MaskVolume(lung, label="lung"),
        MaskVolume(vessel, label="vessel"),
    )


def body_mask(spec: PhantomSpec) -> MaskVolume:
    return MaskVolume(rasterize_ellipsoid(spec.body, tuple(spec.dims)), label="body")


def minmax(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    if hi - lo <= 0:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def line_integral(data: np.ndarray, view: str) -> np.ndarray:
    """Unnormalized parallel-beam projection (mean along the view axis)."""
    data = np.asarray(data, dtype=np.float64)
    if view == "frontal":
        return data.mean(axis=0)  # H x W
    if view == "lateral":
        return data.mean(axis=2).T  # H x D
    raise ValueError(f"view must be one of {VIEWS}, got {view!r}")


def project(volume: Volume, view: str) -> Projection:
    return Projection(minmax(line_integral(volume.data, view)).astype(np.float32), view=view)


def _interp_axis(a: np.ndarray, n: int, axis: int) -> np.ndarray:
    m = a.shape[axis]
    if m == n:
        return a
    pos = np.arange(n) * ((m - 1) / (n - 1))
    i0 = np.clip(np.floor(pos).astype(int), 0, m - 2)
    t = pos - i0
    shape = [1] * a.ndim
    shape[axis] = n
    t = t.reshape(shape)
    lo = np.take(a, i0, axis=axis)
    hi = np.take(a, i0 + 1, axis=axis)
    return lo + t * (hi - lo)


def resample(volume: Volume, dims) -> Volume:
    """Trilinear resampling with corner-aligned grids.

    Written as ``lo + t * (hi - lo)`` per axis so constants survive exactly.
    """
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or any(n < 2 for n in dims):
        raise ValueError(f"target dims must be 3 values >= 2, got {dims}")
    src = volume.data
    if dims == src.shape:
        return Volume(src.copy(), volume.spacing)
    out = src.astype(np.float64)
    for axis, n in enumerate(dims):
        out = _interp_axis(out, n, axis)
    out = np.clip(out, src.min(), src.max())
    spacing = tuple(s * (m - 1) / (n - 1) for s, m, n in zip(volume.spacing, src.shape, dims))
    return Volume(out.astype(np.float32), spacing)


def resample_array(data: np.ndarray, dims) -> np.ndarray:
    """:func:`resample` for raw grids of any rank without the Volume checks."""
    src = np.asarray(data)
    out = src.astype(np.float64)
    for axis, n in enumerate(dims):
        out = _interp_axis(out, int(n), axis)
    return np.clip(out, src.min(), src.max()).astype(src.dtype)


def grid_of(x) -> np.ndarray:
    """The raw grid of a Volume / MaskVolume / Projection, or ``x`` itself."""
    if isinstance(x, (Volume, MaskVolume, Projection)):
        return x.data
    return np.asarray(x)


def threshold_segment(volume, t: float, label: str = "lung") -> MaskVolume:
    if not 0.0 < t < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {t}")
    return MaskVolume(grid_of(volume) >= t, label=label)
