"""Rigid transforms, the named frame chain and ultrasound pixel mapping.

Frames used throughout the package:

``B``  robot base (world), z up
``E``  end effector / probe tool point
``C``  depth camera
``I``  camera image
``U``  ultrasound probe
``F``  ultrasound image plane

A transform keyed ``(child, parent)`` maps coordinates expressed in
``child`` into ``parent``, so ``T_IB = T_EB @ T_CE @ T_IC``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

ORTHO_REJECT_TOL = 1e-6
ORTHO_REPAIR_TOL = 1e-12

FRAME_NAMES = ("B", "E", "C", "I", "U", "F")


class FrameGraphError(KeyError):
    pass


def _polar(m):
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def orthonormality_defect(r):
    r = np.asarray(r, dtype=float)
    return float(np.max(np.abs(r.T @ r - np.eye(3))))


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rigid motion ``p -> R p + t`` (mm)."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("transform entries must be finite")
        defect = orthonormality_defect(r)
        if defect > ORTHO_REJECT_TOL:
            raise ValueError(f"rotation is not orthonormal (defect {defect:.3g})")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation has determinant -1 (reflection)")
        if defect > ORTHO_REPAIR_TOL:
            r = _polar(r)
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_translation(cls, x, y=None, z=None):
        if y is None:
            return cls(np.eye(3), np.asarray(x, dtype=float))
        return cls(np.eye(3), np.array([x, y, z], dtype=float))

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=float)
        if m.shape != (4, 4):
            raise ValueError("expected a 4x4 homogeneous matrix")
        if not np.allclose(m[3], [0, 0, 0, 1], atol=1e-12):
            raise ValueError("bottom row of a homogeneous transform must be [0 0 0 1]")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_axis_angle(cls, axis, angle_rad, translation=(0.0, 0.0, 0.0)):
        return cls(rotation_about(axis, angle_rad), translation)

    @classmethod
    def from_line(cls, line):
        """Parse the 12-number row-major text form (9 rotation + 3 translation)."""
        vals = [float(v) for v in line.replace(",", " ").split()]
        if len(vals) != 12:
            raise ValueError(f"transform line needs 12 numbers, got {len(vals)}")
        return cls(np.array(vals[:9]).reshape(3, 3), vals[9:])

    def to_line(self):
        vals = list(self.rotation.ravel()) + list(self.translation)
        return " ".join(repr(float(v)) for v in vals)

    @property
    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self):
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other):
        return compose(self, other)

    def __matmul__(self, other):
        if isinstance(other, RigidTransform):
            return compose(self, other)
        return NotImplemented

    def apply(self, points):
        return apply(self, points)

    def rotation_angle_deg(self):
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))

    def __repr__(self):
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def compose(a, b):
    """Matrix product ``a @ b``: apply ``b`` first, then ``a``."""
    r = a.rotation @ b.rotation
    t = a.rotation @ b.translation + a.translation
    if orthonormality_defect(r) > ORTHO_REPAIR_TOL:
        r = _polar(r)
    return RigidTransform(r, t)


def apply(t, points):
    """Apply a transform to one point (3,) or many (N, 3)."""
    p = np.asarray(points, dtype=float)
    if p.ndim == 1:
        return t.rotation @ p + t.translation
    return p @ t.rotation.T + t.translation


def rotation_about(axis, angle_rad):
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0:
        raise ValueError("rotation axis must be nonzero")
    k = axis / n
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle_rad) * kx + (1 - np.cos(angle_rad)) * (kx @ kx)


def random_rotation(rng, max_angle_deg=180.0):
    """Rotation about a uniformly random axis by an angle uniform in [0, max]."""
    axis = rng.normal(size=3)
    angle = np.radians(rng.uniform(0.0, max_angle_deg))
    return rotation_about(axis, angle)


def random_transform(rng, max_angle_deg=180.0, max_translation=100.0):
    return RigidTransform(
        random_rotation(rng, max_angle_deg),
        rng.uniform(-max_translation, max_translation, size=3),
    )


def rotation_error_deg(a, b):
    """Angle of the relative rotation between two rotation matrices."""
    r = np.asarray(a) @ np.asarray(b).T
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


class FrameGraph:
    """Named frames connected by rigid transforms.

    Queries walk the graph in either direction (inverting edges as needed);
    asking for a pair with no connecting path raises ``FrameGraphError``.
    """

    def __init__(self, edges=None):
        self._edges = {}
        for (child, parent), t in (edges or {}).items():
            self.set(child, parent, t)

    def set(self, child, parent, transform):
        if child == parent:
            raise ValueError("a frame cannot be its own parent")
        self._edges[(child, parent)] = transform

    @property
    def frames(self):
        names = set()
        for c, p in self._edges:
            names.update((c, p))
        return names

    def transform(self, child, parent):
        """Return the transform mapping ``child`` coordinates into ``parent``."""
        if child == parent:
            if child not in self.frames:
                raise FrameGraphError(f"unknown frame {child!r}")
            return RigidTransform.identity()
        # BFS over frames; each queue entry holds T_parent<-current
        seen = {parent}
        queue = deque([(parent, RigidTransform.identity())])
        while queue:
            name, t_parent_name = queue.popleft()
            for nb, t_nb_to_name in self._neighbours_into(name):
                if nb in seen:
                    continue
                t = compose(t_parent_name, t_nb_to_name)
                if nb == child:
                    return t
                seen.add(nb)
                queue.append((nb, t))
        raise FrameGraphError(f"no transform chain between {child!r} and {parent!r}")

    def _neighbours_into(self, name):
        # yields (other, T_name<-other)
        for (c, p), t in self._edges.items():
            if p == name:
                yield c, t
            elif c == name:
                yield p, t.inverse()

    @classmethod
    def from_config(cls, section):
        """Build from a mapping ``{"<child>_<parent>": "12 numbers", ...}``.

        Accepts either the ``frames`` table itself or a flat mapping with
        ``frames.<child>_<parent>`` keys.
        """
        graph = cls()
        for key, value in section.items():
            name = key.split(".", 1)[1] if key.startswith("frames.") else key
            child, _, parent = name.partition("_")
            if not child or not parent:
                raise ValueError(f"frame key {key!r} must look like <child>_<parent>")
            if isinstance(value, str):
                t = RigidTransform.from_line(value)
            else:
                vals = np.asarray(value, dtype=float).ravel()
                if vals.size != 12:
                    raise ValueError(f"frame {key!r} needs 12 numbers, got {vals.size}")
                t = RigidTransform(vals[:9].reshape(3, 3), vals[9:])
            graph.set(child, parent, t)
        return graph


@dataclass(frozen=True)
class ImagingGeometry:
    width: int = 512
    height: int = 512
    spacing_x: float = 0.2
    spacing_y: float = 0.2
    center_column: float | None = None

    def __post_init__(self):
        if self.spacing_x <= 0 or self.spacing_y <= 0:
            raise ValueError("pixel spacing must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")
        if self.center_column is None:
            object.__setattr__(self, "center_column", self.width / 2)

    @property
    def depth_mm(self):
        return self.height * self.spacing_y


@dataclass(frozen=True)
class VoxelPoint:
    position: np.ndarray
    intensity: float

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float).reshape(3)
        if not np.all(np.isfinite(p)):
            raise ValueError("voxel position must be finite")
        if not 0.0 <= self.intensity <= 255.0:
            raise ValueError("voxel intensity must lie in [0, 255]")
        object.__setattr__(self, "position", p)


def pixel_to_frame(px, ee_position, g=ImagingGeometry()):
    """Map image pixel ``(x, y)`` to the 3D point in the ultrasound frame.

    x_F = x_EE + (c - x) * Sx,  y_F = y_EE,  z_F = z_EE + y * Sy
    with ``c`` the centre column (256 for a 512-wide image).
    """
    x, y = px
    if not (0 <= x < g.width and 0 <= y < g.height):
        raise ValueError(f"pixel {px} outside {g.width}x{g.height} image")
    ee = np.asarray(ee_position, dtype=float)
    return np.array([
        ee[0] + (g.center_column - x) * g.spacing_x,
        ee[1],
        ee[2] + y * g.spacing_y,
    ])


def pixels_to_frame(xs, ys, g=ImagingGeometry(), ee_position=(0.0, 0.0, 0.0)):
    """Vectorised ``pixel_to_frame`` (no range check); returns (N, 3)."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    ee = np.asarray(ee_position, dtype=float)
    out = np.empty(xs.shape + (3,))
    out[..., 0] = ee[0] + (g.center_column - xs) * g.spacing_x
    out[..., 1] = ee[1]
    out[..., 2] = ee[2] + ys * g.spacing_y
    return out


def frame_to_world(p_frame, t_fb):
    return apply(t_fb, p_frame)


# Image frame F relative to the probe U: lateral axis along the probe x axis,
# depth along -z_probe (the probe's z axis is the outward skin normal).
IMAGE_FROM_PROBE = RigidTransform(np.diag([1.0, -1.0, -1.0]))

# Probe orientation for an upright probe on a level surface with the default
# y_global = (0, 1, 0): columns x=(-1,0,0), y=(0,-1,0), z=(0,0,1).
UPRIGHT_PROBE = np.array([[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]])

MAPPING_MODES = ("literal", "oriented")


def image_pose(ee_pose, probe_mount=None):
    """T_FB = T_EB . T_UE . T_FU for an end-effector pose."""
    mount = probe_mount if probe_mount is not None else RigidTransform.identity()
    return compose(compose(ee_pose, mount), IMAGE_FROM_PROBE)


def literal_image_pose(t_fb):
    """Same image origin, orientation replaced by the upright nominal.

    This is the mapping that keeps ``y_F = y_EE`` in world coordinates
    whatever the probe tilt.
    """
    r = UPRIGHT_PROBE @ IMAGE_FROM_PROBE.rotation
    return RigidTransform(r, t_fb.translation)


def pixels_to_world(xs, ys, t_fb, g=ImagingGeometry(), mode="literal"):
    """Pixel -> frame -> world for arrays of pixel coordinates."""
    if mode not in MAPPING_MODES:
        raise ValueError(f"mapping mode must be one of {MAPPING_MODES}")
    pose = literal_image_pose(t_fb) if mode == "literal" else t_fb
    return apply(pose, pixels_to_frame(xs, ys, g).reshape(-1, 3))


def world_to_pixel(points, t_fb, g=ImagingGeometry(), mode="oriented"):
    """Inverse of ``pixels_to_world``: returns (x, y, out_of_plane_mm) arrays."""
    pose = literal_image_pose(t_fb) if mode == "literal" else t_fb
    local = apply(pose.inverse(), np.atleast_2d(points))
    x = g.center_column - local[:, 0] / g.spacing_x
    y = local[:, 2] / g.spacing_y
    return x, y, local[:, 1]
