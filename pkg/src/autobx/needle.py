"""Needle guide model: insertion angle, guide calibration, planning and insertion."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import cv2
import numpy as np
from scipy.optimize import brentq

from .geometry import ImagingGeometry, apply, rotation_about, world_to_pixel

MAX_DEPTH = 100.0


class NeedleError(ValueError):
    pass


def insertion_angle(p_target, p_insertion, p_tool):
    """Angle in degrees between (target - insertion) and (target - tool)."""
    v_ins = np.asarray(p_target, dtype=float) - np.asarray(p_insertion, dtype=float)
    v_tool = np.asarray(p_target, dtype=float) - np.asarray(p_tool, dtype=float)
    return vector_angle(v_ins, v_tool)


def vector_angle(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise NeedleError("target coincides with insertion/tool point")
    # atan2 form: same angle as the clamped arccos, without its loss of precision near 0 and 180
    a, b = np.asarray(a, dtype=float) / na, np.asarray(b, dtype=float) / nb
    return math.degrees(math.atan2(float(np.linalg.norm(np.cross(a, b))), float(np.dot(a, b))))


@dataclass(frozen=True)
class GuideCalibration:
    beta0: float  # deg / px
    beta1: float  # deg
    residual: float  # RMS deg
    n_samples: int

    def angle(self, row):
        return self.beta0 * row + self.beta1

    def row(self, angle):
        if self.beta0 == 0:
            raise NeedleError("calibration slope is zero; angle does not determine a row")
        return (angle - self.beta1) / self.beta0


def calibrate_guide(samples):
    """Ordinary least squares fit of angle = beta0 * row + beta1.

    ``samples`` is a sequence of ``(angle_deg, row_px)`` pairs.
    """
    s = np.asarray(samples, dtype=float).reshape(-1, 2)
    if len(s) < 2:
        raise NeedleError("calibration needs at least 2 samples")
    theta, y = s[:, 0], s[:, 1]
    if np.ptp(y) == 0:
        raise NeedleError("all samples share one pixel row; slope undefined (vertical line)")
    # centred normal equations are better conditioned than raw lstsq here
    ym, tm = y.mean(), theta.mean()
    dy = y - ym
    beta0 = float(np.dot(dy, theta - tm) / np.dot(dy, dy))
    beta1 = float(tm - beta0 * ym)
    res = theta - (beta0 * y + beta1)
    return GuideCalibration(beta0, beta1, float(np.sqrt(np.mean(res**2))), len(s))


def affine_samples(beta0, beta1, angles):
    """(angle, row) pairs lying exactly on angle = beta0 * row + beta1."""
    return [(float(a), (float(a) - beta1) / beta0) for a in angles]


@dataclass(frozen=True)
class GuideGeometry:
    """Needle guide pivot in the probe frame (x lateral, z along the outward normal)."""

    pivot_lateral: float = 40.0
    pivot_height: float = 10.0
    max_depth: float = MAX_DEPTH
    insertion_speed: float = 5.0  # mm/s
    setup_time: float = 2.0  # s to set the guide angle

    def pivot(self, probe_pose):
        return apply(probe_pose, np.array([self.pivot_lateral, 0.0, self.pivot_height]))

    def guide_angle(self, probe_pose, p_target):
        """Angle of the needle line from the probe's inward axis, degrees."""
        down = -probe_pose.rotation[:, 2]
        return vector_angle(np.asarray(p_target, dtype=float) - self.pivot(probe_pose), down)


def render_guide_samples(guide, angles, g=None):
    """Calibration sweep: draw the needle at each guide angle, read its row.

    The needle is drawn into a blank frame of a probe at the origin; the
    recorded row is where it crosses the centre column.
    """
    g = g or ImagingGeometry()
    out = []
    for a in angles:
        img = np.zeros((g.height, g.width), np.uint8)
        t = math.radians(a)
        # pivot in image pixels: lateral offset maps to columns, height above row 0
        px = g.center_column - guide.pivot_lateral / g.spacing_x
        py = -guide.pivot_height / g.spacing_y
        # image x grows opposite to the probe's lateral axis, so the needle heads to +col
        dx, dy = math.sin(t) / g.spacing_x, math.cos(t) / g.spacing_y
        n = 4.0 * max(g.width, g.height)
        p0 = (int(round(px * 16)), int(round(py * 16)))
        p1 = (int(round((px + n * dx) * 16)), int(round((py + n * dy) * 16)))
        cv2.line(img, p0, p1, 255, 1, cv2.LINE_AA, shift=4)
        col = img[:, int(g.center_column)]
        if col.max() == 0:
            continue
        rows = np.flatnonzero(col == col.max())
        out.append((float(a), float(rows.mean())))
    return out


@dataclass(eq=False)
class NeedlePlan:
    p_target: np.ndarray
    p_insertion: np.ndarray
    p_tool: np.ndarray
    v_insertion: np.ndarray
    v_tool: np.ndarray
    theta: float
    depth: float
    guide_angle: float = 0.0
    pivot: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def direction(self):
        return self.v_insertion / np.linalg.norm(self.v_insertion)

    def to_dict(self):
        out = {}
        for k in ("p_target", "p_insertion", "p_tool", "v_insertion", "v_tool", "pivot"):
            out[k] = [float(v) for v in getattr(self, k)]
        out.update(theta=float(self.theta), depth=float(self.depth), guide_angle=float(self.guide_angle))
        return out


def plan_insertion(centroid, surface, probe_pose, guide=None):
    """Skin entry on the guide line from the pivot through ``centroid``.

    ``probe_pose`` is the probe (tool) pose in the world; its origin is the
    tool point used for the insertion angle.
    """
    guide = guide or GuideGeometry()
    target = np.asarray(centroid, dtype=float)
    if target[2] >= surface.base_z(target[0], target[1]):
        raise NeedleError("target is above the skin surface")
    pivot = guide.pivot(probe_pose)
    span = np.linalg.norm(target - pivot)
    u = (target - pivot) / span

    def gap(s):
        p = pivot + s * u
        return p[2] - surface.base_z(p[0], p[1])

    if gap(0.0) <= 0:
        raise NeedleError("guide pivot is below the skin")
    s_entry = brentq(gap, 0.0, span, xtol=1e-10)
    entry = pivot + s_entry * u
    tool = np.asarray(probe_pose.translation, dtype=float)
    v_ins = target - entry
    v_tool = target - tool
    depth = float(np.linalg.norm(v_ins))
    if depth > guide.max_depth:
        raise NeedleError(f"target beyond guide reach ({depth:.1f} mm > {guide.max_depth:.0f} mm)")
    return NeedlePlan(p_target=target, p_insertion=entry, p_tool=tool, v_insertion=v_ins,
                      v_tool=v_tool, theta=vector_angle(v_ins, v_tool), depth=depth,
                      guide_angle=guide.guide_angle(probe_pose, target), pivot=pivot)


@dataclass(eq=False)
class InsertionResult:
    points: np.ndarray
    tip: np.ndarray
    misalignment_deg: float
    axis: np.ndarray

    def lateral_error(self, target):
        d = np.asarray(target, dtype=float) - self.points[0]
        return float(np.linalg.norm(d - np.dot(d, self.axis) * self.axis))


def simulate_insertion(plan, misalignment_sigma=0.0, seed=None, n_samples=20):
    """Insert a rigid needle along a randomly tilted axis to the planned depth."""
    if n_samples < 10:
        raise NeedleError("at least 10 needle samples are emitted")
    rng = np.random.default_rng(seed)
    u = plan.direction
    angle = abs(rng.normal(0.0, misalignment_sigma)) if misalignment_sigma > 0 else 0.0
    # perpendicular axis from a random direction
    r = rng.normal(size=3)
    perp = r - np.dot(r, u) * u
    if np.linalg.norm(perp) < 1e-9:
        perp = np.cross(u, [1.0, 0.0, 0.0] if abs(u[0]) < 0.9 else [0.0, 1.0, 0.0])
    perp /= np.linalg.norm(perp)
    axis = rotation_about(perp, math.radians(angle)) @ u if angle > 0 else u.copy()
    t = np.linspace(0.0, plan.depth, n_samples)
    pts = plan.p_insertion + t[:, None] * axis
    tip = pts[-1].copy()
    return InsertionResult(points=pts, tip=tip, misalignment_deg=float(angle), axis=axis)


def needle_row_in_frame(plan, probe_image_pose, g=None):
    """Pixel row where the planned needle crosses the image centre column (diagnostic)."""
    g = g or ImagingGeometry()
    x, y, _ = world_to_pixel(np.vstack([plan.p_insertion, plan.p_target]), probe_image_pose, g)
    if abs(x[1] - x[0]) < 1e-12:
        return float(y[0])
    s = (g.center_column - x[0]) / (x[1] - x[0])
    return float(y[0] + s * (y[1] - y[0]))
