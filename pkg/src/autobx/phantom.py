"""Synthetic patient: voxel phantom, abdomen surface and CT-style atlas."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay
from scipy.special import erfc

from . import io as aio
from .geometry import RigidTransform, apply
from .kernels import trilinear_sample

KEYPOINT_NAMES = ("left_chest", "right_chest", "navel")
LESION_RADIUS_RANGE = (2.5, 15.0)


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class Lesion:
    center: tuple
    radius: float
    contrast: float = -80.0
    # > 0 gives a soft, Gaussian-blurred edge of this width (mm)
    edge_width: float = 0.0

    def profile(self, dist):
        """Fraction of ``contrast`` applied at distance ``dist`` from the centre."""
        dist = np.asarray(dist, dtype=float)
        if self.edge_width <= 0:
            return (dist <= self.radius).astype(float)
        return 0.5 * erfc((dist - self.radius) / (math.sqrt(2.0) * self.edge_width))

    @property
    def extent(self):
        return self.radius + 4.0 * self.edge_width


@dataclass(frozen=True, eq=False)
class VoxelPhantom:
    origin: np.ndarray
    spacing: float
    intensities: np.ndarray
    lesions: tuple = ()
    background: float = 128.0
    pose: RigidTransform = field(default_factory=RigidTransform.identity)

    @property
    def dims(self):
        return self.intensities.shape

    @property
    def upper(self):
        return self.origin + (np.array(self.dims) - 1) * self.spacing

    def placed(self, t):
        """The same phantom moved rigidly by ``t`` (world <- world)."""
        return replace(self, pose=t @ self.pose)

    def lesion_centers(self):
        """Lesion centres in world coordinates."""
        if not self.lesions:
            return np.zeros((0, 3))
        return apply(self.pose, np.array([l.center for l in self.lesions], dtype=float))

    def voxel_coords(self, world_points):
        local = apply(self.pose.inverse(), np.atleast_2d(world_points))
        return (local - self.origin) / self.spacing

    def sample(self, world_points, fill=0.0):
        coords = np.ascontiguousarray(self.voxel_coords(world_points), dtype=np.float64)
        return trilinear_sample(self.intensities, coords, fill)

    def lesion_mask(self, index):
        """Boolean grid of voxels whose centre lies inside lesion ``index``."""
        les = self.lesions[index]
        grid = np.indices(self.dims, dtype=float).transpose(1, 2, 3, 0) * self.spacing + self.origin
        return np.linalg.norm(grid - np.asarray(les.center), axis=-1) <= les.radius


@dataclass(frozen=True)
class TorsoShape:
    """Height field of a supine abdomen in phantom coordinates (z up, mm).

    A flat plateau (where the agar insert sits) falls off quadratically toward
    the flanks; two chest mounds and a navel dimple provide landmarks.
    """

    length: float = 300.0
    center_y: float = 100.0
    top: float = 120.0
    plateau_half_width: float = 40.0
    flank_span: float = 55.0
    flank_drop: float = 40.0
    chest_x: float = 40.0
    chest_dy: float = 45.0
    chest_height: float = 30.0
    chest_sigma: float = 25.0
    navel_x: float = 230.0
    navel_depth: float = 10.0
    navel_sigma: float = 12.0

    @property
    def half_width(self):
        return self.plateau_half_width + self.flank_span

    def height(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        dy = np.abs(y - self.center_y)
        over = np.clip(dy - self.plateau_half_width, 0.0, None) / self.flank_span
        z = self.top - self.flank_drop * over**2
        s2 = 2.0 * self.chest_sigma**2
        for side in (1.0, -1.0):
            cy = self.center_y + side * self.chest_dy
            z = z + self.chest_height * np.exp(-((x - self.chest_x) ** 2 + (y - cy) ** 2) / s2)
        n2 = 2.0 * self.navel_sigma**2
        z = z - self.navel_depth * np.exp(-((x - self.navel_x) ** 2 + (y - self.center_y) ** 2) / n2)
        return z

    def keypoints(self):
        pts = {
            "left_chest": (self.chest_x, self.center_y + self.chest_dy),
            "right_chest": (self.chest_x, self.center_y - self.chest_dy),
            "navel": (self.navel_x, self.center_y),
        }
        return {k: np.array([x, y, float(self.height(x, y))]) for k, (x, y) in pts.items()}

    def sample(self, spacing, offset=0.0):
        xs = np.arange(offset, self.length + 1e-9, spacing)
        ys = np.arange(self.center_y - self.half_width + offset,
                       self.center_y + self.half_width + 1e-9, spacing)
        gx, gy = np.meshgrid(xs, ys, indexing="xy")
        gx, gy = gx.ravel(), gy.ravel()
        return np.column_stack([gx, gy, self.height(gx, gy)])

    def sample_random(self, spacing, rng):
        """Uniformly scattered points at the density of a ``spacing`` lattice.

        A depth camera cloud has no lattice structure; matching a lattice
        atlas against a lattice subject makes ICP lock onto half-cell offsets.
        """
        area = self.length * 2.0 * self.half_width
        n = int(round(area / spacing**2))
        x = rng.uniform(0.0, self.length, n)
        y = rng.uniform(self.center_y - self.half_width, self.center_y + self.half_width, n)
        return np.column_stack([x, y, self.height(x, y)])


@dataclass(frozen=True, eq=False)
class SurfaceModel:
    """Camera-visible abdomen surface with a local contact deformation model.

    ``cloud`` and ``keypoints`` are in world coordinates; ``shape`` is the
    undeformed height field in phantom coordinates and ``pose`` maps phantom
    to world. Pressing with force F at a contact point lowers the surface by
    a Gaussian bump of depth F / k_skin and width ``bump_radius``.
    """

    cloud: np.ndarray
    keypoints: dict
    shape: TorsoShape = field(default_factory=TorsoShape)
    pose: RigidTransform = field(default_factory=RigidTransform.identity)
    k_skin: float = 2.0
    bump_radius: float = 20.0

    @property
    def rigid(self):
        return not math.isfinite(self.k_skin)

    def base_z(self, x, y):
        """Undeformed surface height at world (x, y)."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        inv = self.pose.inverse()
        r = self.pose.rotation
        scalar = x.ndim == 0 and y.ndim == 0
        x, y = np.atleast_1d(x), np.atleast_1d(y)
        # fixed-point solve for z such that the local surface point maps to (x, y)
        z = np.full(x.shape, float(self.pose.translation[2] + self.shape.top))
        for _ in range(30 if abs(r[2, 2] - 1.0) > 1e-12 else 1):
            local = apply(inv, np.column_stack([x, y, z]))
            hz = self.shape.height(local[:, 0], local[:, 1])
            surf = apply(self.pose, np.column_stack([local[:, 0], local[:, 1], hz]))
            # correct z along the world vertical by the height gap
            z_new = z + (surf[:, 2] - z) / max(r[2, 2], 0.5)
            if np.all(np.abs(z_new - z) < 1e-10):
                z = z_new
                break
            z = z_new
        return float(z[0]) if scalar else z

    def deformation(self, x, y, probe_force, contact_xy):
        if probe_force <= 0 or self.rigid:
            return np.zeros_like(np.asarray(x, dtype=float)) if np.ndim(x) else 0.0
        cx, cy = contact_xy
        d2 = (np.asarray(x) - cx) ** 2 + (np.asarray(y) - cy) ** 2
        return (probe_force / self.k_skin) * np.exp(-d2 / (2.0 * self.bump_radius**2))

    def surface_z(self, x, y, probe_force=0.0, contact_xy=None):
        """Deformed surface height; the contact defaults to the query point."""
        if contact_xy is None:
            contact_xy = (x, y)
        return self.base_z(x, y) - self.deformation(x, y, probe_force, contact_xy)


def pose_subject(s, t, noise_sigma=0.0, rng=None):
    """Rigidly move a surface by ``t`` and jitter its cloud (keypoints stay exact)."""
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    up = t.rotation[:, 2]
    if np.degrees(np.arccos(np.clip(up[2], -1, 1))) > 30.0 + 1e-9:
        raise ValueError("subject pose must stay within 30 degrees of upright")
    cloud = apply(t, s.cloud)
    if noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng()
        cloud = cloud + rng.normal(0.0, noise_sigma, size=cloud.shape)
    keypoints = {k: apply(t, v) for k, v in s.keypoints.items()}
    return replace(s, cloud=cloud, keypoints=keypoints, pose=t @ s.pose)


def detect_keypoints(s, sigma=2.0, rng=None):
    """Stand-in for camera keypoint detection: ground truth plus Gaussian noise."""
    rng = rng if rng is not None else np.random.default_rng()
    return {k: v + rng.normal(0.0, sigma, size=3) if sigma > 0 else v.copy()
            for k, v in s.keypoints.items()}


@dataclass
class PhantomConfig:
    extent: tuple = (300.0, 200.0, 150.0)
    spacing: float = 0.5
    background: float = 128.0
    lesions: list = field(default_factory=lambda: [
        {"center": [125.0, 92.0, 82.0], "radius": 7.5},
        {"center": [150.0, 100.0, 80.0], "radius": 8.5},
        {"center": [177.0, 95.0, 78.0], "radius": 10.0},
    ])
    cloud_spacing: float = 1.5
    k_skin: float = 2.0
    bump_radius: float = 20.0
    torso: dict = field(default_factory=dict)

    def lesion_objects(self, default_contrast=-80.0):
        out = []
        for spec in self.lesions:
            spec = dict(spec)
            out.append(Lesion(
                center=tuple(float(v) for v in spec.pop("center")),
                radius=float(spec.pop("radius")),
                contrast=float(spec.pop("contrast", default_contrast)),
                edge_width=float(spec.pop("edge_width", 0.0)),
            ))
            if spec:
                raise PhantomError(f"unknown lesion keys: {sorted(spec)}")
        return out


def validate_lesions(lesions, origin, upper):
    for k, les in enumerate(lesions):
        lo, hi = LESION_RADIUS_RANGE
        if not lo <= les.radius <= hi:
            raise PhantomError(f"lesion {k}: radius {les.radius} mm outside [{lo}, {hi}]")
        c = np.asarray(les.center, dtype=float)
        if np.any(c - les.extent < origin) or np.any(c + les.extent > upper):
            raise PhantomError(f"lesion {k} at {tuple(c)} extends outside the volume")
    for a in range(len(lesions)):
        for b in range(a + 1, len(lesions)):
            d = np.linalg.norm(np.subtract(lesions[a].center, lesions[b].center))
            if d < lesions[a].extent + lesions[b].extent:
                raise PhantomError(f"lesions {a} and {b} overlap")


def rasterize(dims, origin, spacing, background, lesions):
    grid = np.full(dims, background, dtype=np.float32)
    for les in lesions:
        c = np.asarray(les.center, dtype=float)
        lo = np.maximum(np.floor((c - les.extent - origin) / spacing).astype(int), 0)
        hi = np.minimum(np.ceil((c + les.extent - origin) / spacing).astype(int) + 1, dims)
        axes = [origin[a] + spacing * np.arange(lo[a], hi[a]) - c[a] for a in range(3)]
        dx, dy, dz = np.meshgrid(*axes, indexing="ij")
        dist = np.sqrt(dx**2 + dy**2 + dz**2)
        sub = grid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        sub += (les.contrast * les.profile(dist)).astype(np.float32)
    return np.clip(np.rint(grid), 0, 255).astype(np.uint8)


def build_phantom(cfg=None, seed=0):
    """Build the voxel phantom and its surface in phantom coordinates.

    Returns ``(phantom, surface, lesion_centers)``; the centres are ground
    truth for scoring only. ``seed`` drives the scatter of the surface cloud.
    """
    cfg = cfg or PhantomConfig()
    extent = np.asarray(cfg.extent, dtype=float)
    if np.any(extent <= 0) or cfg.spacing <= 0:
        raise PhantomError("phantom extent and spacing must be positive")
    if not 0 <= cfg.background <= 255:
        raise PhantomError("background must lie in [0, 255]")
    dims = tuple(int(round(e / cfg.spacing)) + 1 for e in extent)
    origin = np.zeros(3)
    upper = origin + (np.array(dims) - 1) * cfg.spacing
    lesions = cfg.lesion_objects()
    validate_lesions(lesions, origin, upper)
    grid = rasterize(dims, origin, cfg.spacing, cfg.background, lesions)
    phantom = VoxelPhantom(origin=origin, spacing=cfg.spacing, intensities=grid,
                           lesions=tuple(lesions), background=cfg.background)
    shape = TorsoShape(length=float(extent[0]), **cfg.torso)
    kps = shape.keypoints()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    cloud = np.vstack([shape.sample_random(cfg.cloud_spacing, rng), np.array(list(kps.values()))])
    surface = SurfaceModel(cloud=cloud, keypoints=kps, shape=shape,
                           k_skin=float(cfg.k_skin), bump_radius=cfg.bump_radius)
    centers = np.array([l.center for l in lesions], dtype=float).reshape(-1, 3)
    return phantom, surface, centers


@dataclass(frozen=True, eq=False)
class Atlas:
    organs: dict
    skin: np.ndarray
    keypoints: dict
    # height of the table plane under the body, closes the skin hull
    base_z: float = 0.0

    def body_hull_points(self):
        floor = self.skin.copy()
        floor[:, 2] = self.base_z
        return np.vstack([self.skin, floor])

    def transformed(self, t):
        return Atlas(
            organs={k: apply(t, v) for k, v in self.organs.items()},
            skin=apply(t, self.skin),
            keypoints={k: apply(t, v) for k, v in self.keypoints.items()},
            base_z=self.base_z,
        )


def ellipsoid_surface(center, semi_axes, n=800):
    """Fibonacci-lattice samples on an axis-aligned ellipsoid surface."""
    k = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * k / n)
    theta = math.pi * (1 + 5**0.5) * k
    unit = np.column_stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)])
    return np.asarray(center, dtype=float) + unit * np.asarray(semi_axes, dtype=float)


@dataclass
class AtlasConfig:
    organs: dict = field(default_factory=lambda: {
        "liver": {"center": [150.0, 95.0, 92.0], "semi_axes": [35.0, 22.0, 20.0]},
    })
    skin_spacing: float = 4.0
    skin_offset: float = 1.0
    organ_points: int = 800
    # atlas frame <- phantom frame; the registration has to undo this
    offset: list = field(default_factory=lambda: [-150.0, -100.0, 0.0])
    skin_file: str | None = None
    organ_files: dict = field(default_factory=dict)
    keypoints_file: str | None = None
    torso: dict = field(default_factory=dict)
    length: float = 300.0
    # table height for file-based atlases; defaults to the lowest skin point
    base_z: float | None = None

    def offset_transform(self):
        return RigidTransform.from_translation(np.asarray(self.offset, dtype=float))


def check_atlas(atlas):
    if not atlas.organs:
        raise PhantomError("atlas needs at least one organ")
    if set(atlas.keypoints) != set(KEYPOINT_NAMES):
        raise PhantomError(f"atlas keypoints must be exactly {KEYPOINT_NAMES}")
    hull = Delaunay(atlas.body_hull_points())
    for name, pts in atlas.organs.items():
        outside = np.flatnonzero(hull.find_simplex(pts, tol=1e-9) < 0)
        if outside.size:
            i = int(outside[0])
            raise PhantomError(f"organ {name!r} point {i} {tuple(pts[i])} lies outside the skin hull")
    return atlas


def build_atlas(cfg=None):
    """Procedural atlas (ellipsoid organs under the torso skin) or file-based."""
    cfg = cfg or AtlasConfig()
    if cfg.skin_file:
        skin = aio.read_cloud(cfg.skin_file)
        organs = {name: aio.read_cloud(path) for name, path in cfg.organ_files.items()}
        if not cfg.keypoints_file:
            raise PhantomError("file-based atlas needs keypoints_file")
        keypoints = read_atlas_keypoints(cfg.keypoints_file)
        base_z = cfg.base_z if cfg.base_z is not None else float(skin[:, 2].min())
        return check_atlas(Atlas(organs=organs, skin=skin, keypoints=keypoints, base_z=base_z))
    if not cfg.organs:
        raise PhantomError("atlas needs at least one organ")
    shape = TorsoShape(length=cfg.length, **cfg.torso)
    off = cfg.offset_transform()
    organs = {}
    for name, spec in cfg.organs.items():
        organs[name] = apply(off, ellipsoid_surface(spec["center"], spec["semi_axes"], cfg.organ_points))
    skin = apply(off, shape.sample(cfg.skin_spacing, cfg.skin_offset))
    keypoints = {k: apply(off, v) for k, v in shape.keypoints().items()}
    base_z = float(off.translation[2])
    return check_atlas(Atlas(organs=organs, skin=skin, keypoints=keypoints, base_z=base_z))


def read_atlas_keypoints(path):
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise aio.CloudFormatError(f"{path}:{lineno}: expected 'name x y z'")
            out[parts[0]] = np.array([float(v) for v in parts[1:]])
    return out


def save_atlas(atlas, directory):
    """Write ``skin.xyz``, ``organ_<name>.xyz`` and ``keypoints.txt``."""
    d = aio.ensure_dir(directory)
    aio.write_cloud(d / "skin.xyz", atlas.skin)
    for name, pts in atlas.organs.items():
        aio.write_cloud(d / f"organ_{name}.xyz", pts)
    with open(d / "keypoints.txt", "w") as fh:
        for k, v in atlas.keypoints.items():
            fh.write(" ".join([k] + [repr(float(c)) for c in v]) + "\n")
    (d / "base_z.txt").write_text(f"{float(atlas.base_z)!r}\n")
    return d


def load_atlas(directory):
    d = Path(directory)
    organ_files = {p.stem[len("organ_"):]: str(p) for p in sorted(d.glob("organ_*.xyz"))}
    base = d / "base_z.txt"
    cfg = AtlasConfig(skin_file=str(d / "skin.xyz"), organ_files=organ_files,
                      keypoints_file=str(d / "keypoints.txt"),
                      base_z=float(base.read_text()) if base.exists() else None)
    return build_atlas(cfg)
