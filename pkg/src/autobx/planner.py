"""Scan trajectory planning over the ROI and quasi-static execution.

Execution models contact with a spring (force = k_skin * penetration) and a
viscoelastic memory: every contact leaves a dent that creeps toward
``retention * F / k_skin`` with time constant ``creep_tau``. The summed dent
field is soft-capped at ``max_sag``. Position control follows the plan
blindly and loses contact once the surface has sagged below it; impedance
control searches along the probe axis for the target force.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.spatial import cKDTree

from .geometry import RigidTransform, orthonormality_defect

Y_GLOBAL = np.array([0.0, 1.0, 0.0])
X_GLOBAL = np.array([1.0, 0.0, 0.0])
UP = np.array([0.0, 0.0, 1.0])


class PlanningError(ValueError):
    pass


def fit_plane(cloud, p, radius, tree=None):
    """Least-squares plane through the cloud points within ``radius`` of ``p``.

    Returns ``(centroid, outward unit normal)``.
    """
    cloud = np.asarray(cloud, dtype=float)
    tree = tree if tree is not None else cKDTree(cloud)
    nb = cloud[tree.query_ball_point(np.asarray(p, dtype=float), radius)]
    if len(nb) < 3:
        raise PlanningError(f"only {len(nb)} neighbours within {radius} mm; need 3")
    c = nb.mean(axis=0)
    centered = nb - c
    w, v = np.linalg.eigh(centered.T @ centered / len(nb))
    if w[1] <= 1e-12 * max(w[2], 1e-300):
        raise PlanningError("neighbourhood is collinear; normal undefined")
    n = v[:, 0]
    if n @ UP < 0:
        n = -n
    return c, n / np.linalg.norm(n)


def estimate_normal(cloud, p, radius, tree=None):
    """Outward unit normal of the plane fitted to cloud points within ``radius`` of ``p``."""
    return fit_plane(cloud, p, radius, tree)[1]


def local_frame(z_local, y_global=Y_GLOBAL):
    """Probe orientation with columns (x_local, y_local, z_local).

    x = z x y_g / |z x y_g|, y = z x x / |z x x|. When z is parallel to
    ``y_global`` the base x axis is substituted. Returns ``(matrix, fallback_used)``.
    """
    z = np.asarray(z_local, dtype=float)
    z = z / np.linalg.norm(z)
    yg = np.asarray(y_global, dtype=float)
    fallback = False
    cx = np.cross(z, yg)
    if np.linalg.norm(cx) < 1e-6:
        fallback = True
        cx = np.cross(z, X_GLOBAL)
    x = cx / np.linalg.norm(cx)
    cy = np.cross(z, x)
    y = cy / np.linalg.norm(cy)
    return np.column_stack([x, y, z]), fallback


@dataclass(frozen=True, eq=False)
class ScanPose:
    position: np.ndarray
    orientation: np.ndarray
    index: tuple
    fallback: bool = False

    @property
    def transform(self):
        return RigidTransform(self.orientation, self.position)

    @property
    def z_local(self):
        return self.orientation[:, 2]


@dataclass(eq=False)
class ScanTrajectory:
    poses: list
    grid_shape: tuple
    safety_workspace: tuple | None = None

    def __len__(self):
        return len(self.poses)

    def __iter__(self):
        return iter(self.poses)


def _grid_axis(lo, hi, step):
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return lo + step * np.arange(n)


SNAP_MODES = ("project", "nearest")


def plan_trajectory(roi_points, cloud, spacing=5.0, normal_radius=10.0,
                    y_global=Y_GLOBAL, safety_workspace=None, snap_distance=None, snap="project"):
    """Serpentine grid of surface poses over the ROI's xy bounding box.

    ``spacing`` is a scalar or ``(along_x, along_y)``. Nodes with no ROI point
    within ``snap_distance`` (default: the smaller spacing) or outside the
    ``(xmin, xmax, ymin, ymax)`` safety workspace are dropped. ``snap``
    chooses the pose position: ``nearest`` takes the nearest ROI point,
    ``project`` keeps the node's xy and lifts it onto the local fitted plane
    (keeps image planes evenly spaced).
    """
    if snap not in SNAP_MODES:
        raise PlanningError(f"snap must be one of {SNAP_MODES}")
    roi = np.asarray(roi_points, dtype=float).reshape(-1, 3)
    if len(roi) == 0:
        raise PlanningError("empty ROI")
    sx, sy = (spacing, spacing) if np.isscalar(spacing) else spacing
    reach = min(sx, sy) if snap_distance is None else snap_distance
    xs = _grid_axis(roi[:, 0].min(), roi[:, 0].max(), sx)
    ys = _grid_axis(roi[:, 1].min(), roi[:, 1].max(), sy)
    roi_tree = cKDTree(roi[:, :2])
    cloud = np.asarray(cloud, dtype=float)
    cloud_tree = cKDTree(cloud)
    poses = []
    for i, y in enumerate(ys):
        cols = range(len(xs)) if i % 2 == 0 else range(len(xs) - 1, -1, -1)
        for j in cols:
            d, k = roi_tree.query([xs[j], y])
            if d > reach + 1e-9:
                continue
            p = roi[k]
            c, n = fit_plane(cloud, p, normal_radius, cloud_tree)
            if snap == "project":
                if abs(n[2]) < 1e-6:
                    raise PlanningError("vertical surface patch; cannot project the grid node")
                x, yy = xs[j], y
                p = np.array([x, yy, c[2] - (n[0] * (x - c[0]) + n[1] * (yy - c[1])) / n[2]])
            if safety_workspace is not None:
                x0, x1, y0, y1 = safety_workspace
                if not (x0 <= p[0] <= x1 and y0 <= p[1] <= y1):
                    continue
            o, fb = local_frame(n, y_global)
            poses.append(ScanPose(position=p.copy(), orientation=o, index=(i, j), fallback=fb))
    if not poses:
        raise PlanningError("no trajectory poses survive the safety workspace and ROI checks")
    return ScanTrajectory(poses=poses, grid_shape=(len(ys), len(xs)),
                          safety_workspace=tuple(safety_workspace) if safety_workspace else None)


@dataclass
class ControllerParams:
    mode: str = "impedance"
    stiffness: float = 1.5  # N/mm, impedance spring (reported; quasi-static model)
    damping: float = 0.05  # N s/mm, kept for interface completeness
    target_contact_force: float = 4.0
    force_safety_threshold: float = 12.0
    step_settle_tolerance: float = 0.25
    position_preload: float = 1.0  # mm pressed below the planned point in position mode
    compliance_range: float = 15.0
    probe_speed: float = 20.0  # mm/s
    settle_time: float = 0.3
    approach_speed: float = 10.0  # mm/s while regulating force
    regulation_time: float = 0.2
    # surface memory
    retention: float = 0.2
    creep_tau: float = 8.0
    max_sag: float = 3.0
    dent_radius: float | None = 60.0  # creep footprint; None: the surface bump radius

    def __post_init__(self):
        if self.mode not in ("position", "impedance"):
            raise ValueError("controller mode must be 'position' or 'impedance'")
        if self.mode == "impedance" and not (
                self.force_safety_threshold > self.target_contact_force > 0):
            raise ValueError("impedance mode needs threshold > target_contact_force > 0")
        if self.probe_speed <= 0 or self.approach_speed <= 0:
            raise ValueError("speeds must be positive")


@dataclass(eq=False)
class ExecutedStep:
    commanded: ScanPose
    achieved: np.ndarray
    contact: bool
    contact_force: float
    step_time: float
    elapsed: float
    aborted: bool = False

    @property
    def pose(self):
        return RigidTransform(self.commanded.orientation, self.achieved)


class SurfaceMemory:
    """Accumulated dents left by earlier contacts (viscoelastic creep)."""

    def __init__(self, radius, retention, tau, cap):
        self.radius = radius
        self.retention = retention
        self.tau = tau
        self.cap = cap
        self._xy = []
        self._depth = []
        self._t = []

    def add(self, xy, penetration, t):
        if penetration > 0 and self.retention > 0:
            self._xy.append(xy)
            self._depth.append(self.retention * penetration)
            self._t.append(t)

    def sag(self, x, y, t):
        if not self._xy:
            return 0.0
        xy = np.asarray(self._xy)
        age = np.maximum(t - np.asarray(self._t), 0.0)
        grown = np.asarray(self._depth) * (1.0 - np.exp(-age / self.tau) if self.tau > 0 else 1.0)
        d2 = (xy[:, 0] - x) ** 2 + (xy[:, 1] - y) ** 2
        raw = float(np.sum(grown * np.exp(-d2 / (2.0 * self.radius**2))))
        if self.cap and self.cap > 0:
            return self.cap * (1.0 - math.exp(-raw / self.cap))
        return raw


def _seat(cmd, z_ax, surface, memory, t, target_pen, span):
    """Point on the line ``cmd - s z_ax`` (|s| <= span) penetrating the live surface by ``target_pen``.

    Returns ``(point, s, state, excess)`` with state ``seated``, ``pushed``
    (surface beyond the range above) or ``unreachable``.
    """
    def gap(s):
        p = cmd - s * z_ax
        return surface.base_z(p[0], p[1]) - memory.sag(p[0], p[1], t) - p[2] - target_pen

    g_lo, g_hi = gap(-span), gap(span)
    if g_lo > 0:
        return cmd + span * z_ax, -span, "pushed", g_lo
    if g_hi < 0:
        return cmd - span * z_ax, span, "unreachable", 0.0
    s = 0.0 if abs(gap(0.0)) < 1e-12 else brentq(gap, -span, span, xtol=1e-9)
    return cmd - s * z_ax, s, "seated", 0.0


def execute(traj, surface, ctrl, seed=None, start=None):
    """Run the trajectory step by step; deterministic for a given input.

    ``seed`` is unused by the quasi-static model and kept for interface
    stability. ``start`` is the probe position before the first step.
    """
    memory = SurfaceMemory(ctrl.dent_radius or surface.bump_radius, 0.0 if surface.rigid else ctrl.retention,
                           ctrl.creep_tau, ctrl.max_sag)
    tol = ctrl.step_settle_tolerance
    steps = []
    t = 0.0
    prev = np.asarray(start if start is not None else traj.poses[0].position, dtype=float)
    for pose in traj:
        z_ax = pose.z_local
        if ctrl.mode == "position":
            cmd = pose.position - ctrl.position_preload * z_ax
            dt = np.linalg.norm(cmd - prev) / ctrl.probe_speed + ctrl.settle_time
            t += dt
            live = surface.base_z(cmd[0], cmd[1]) - memory.sag(cmd[0], cmd[1], t)
            pen = live - cmd[2]
            achieved = cmd
            if surface.rigid:
                # nothing yields: the probe stops where it meets the surface
                contact = pen >= -tol
                if contact:
                    achieved = _seat(pose.position, z_ax, surface, memory, t, 0.0, ctrl.compliance_range)[0]
                force = 0.0
            else:
                contact = pen >= 0.0
                force = surface.k_skin * max(pen, 0.0)
        else:
            cmd = pose.position
            dt = np.linalg.norm(cmd - prev) / ctrl.probe_speed + ctrl.settle_time
            t_arrive = t + dt
            target_pen = 0.0 if surface.rigid else ctrl.target_contact_force / surface.k_skin
            achieved, s, state, excess = _seat(cmd, z_ax, surface, memory, t_arrive, target_pen,
                                               ctrl.compliance_range)
            if state == "pushed":
                # surface above the compliance range: probe is pushed back
                pen = excess + target_pen
                contact = True
                force = math.inf if surface.rigid else surface.k_skin * pen
            elif state == "unreachable":
                pen = 0.0
                contact = False
                force = 0.0
            else:
                pen = target_pen
                contact = True
                force = 0.0 if surface.rigid else ctrl.target_contact_force
            dt += abs(s) / ctrl.approach_speed + ctrl.regulation_time
            t += dt
        aborted = force > ctrl.force_safety_threshold
        if contact and not aborted:
            memory.add((achieved[0], achieved[1]), pen, t)
        steps.append(ExecutedStep(commanded=pose, achieved=np.asarray(achieved, dtype=float),
                                  contact=bool(contact), contact_force=float(force),
                                  step_time=float(dt), elapsed=float(t), aborted=bool(aborted)))
        prev = achieved
    return steps


def check_pose(pose, tol=1e-9):
    o = pose.orientation
    return orthonormality_defect(o) <= tol and abs(np.linalg.det(o) - 1.0) <= tol and o[2, 2] > 0
