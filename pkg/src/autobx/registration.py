"""Atlas-to-subject registration: keypoint initialisation, ICP, ROI extraction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, Delaunay, cKDTree

from .geometry import RigidTransform, apply
from .phantom import KEYPOINT_NAMES

log = logging.getLogger(__name__)


class RegistrationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Correspondence3:
    source: np.ndarray
    target: np.ndarray
    labels: tuple = KEYPOINT_NAMES

    def __post_init__(self):
        src = np.asarray(self.source, dtype=float).reshape(3, 3)
        dst = np.asarray(self.target, dtype=float).reshape(3, 3)
        if sorted(self.labels) != sorted(KEYPOINT_NAMES) or len(set(self.labels)) != 3:
            raise RegistrationError(f"labels must be exactly {KEYPOINT_NAMES}")
        for name, pts in (("source", src), ("target", dst)):
            area = 0.5 * np.linalg.norm(np.cross(pts[1] - pts[0], pts[2] - pts[0]))
            if area <= 1.0:
                raise RegistrationError(f"{name} keypoints are collinear (triangle area {area:.3g} mm^2)")
        object.__setattr__(self, "source", src)
        object.__setattr__(self, "target", dst)

    @classmethod
    def from_dicts(cls, source, target):
        labels = tuple(KEYPOINT_NAMES)
        missing = [k for k in labels if k not in source or k not in target]
        if missing:
            raise RegistrationError(f"missing keypoints: {missing}")
        return cls(np.array([source[k] for k in labels]), np.array([target[k] for k in labels]), labels)


def rigid_fit(source, target):
    """Least-squares rigid motion taking ``source`` rows onto ``target`` rows.

    Centroid subtraction, SVD of the cross-covariance, and a sign fix on the
    smallest singular direction so the result is never a reflection.
    """
    src = np.asarray(source, dtype=float)
    dst = np.asarray(target, dtype=float)
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, cd - r @ cs)


def initial_transform(c):
    """Rigid transform aligning the three atlas keypoints to the subject's."""
    t = rigid_fit(c.source, c.target)
    log.debug("keypoint residual %.4f mm", correspondence_rms(c, t))
    return t


def correspondence_rms(c, t):
    return float(np.sqrt(np.mean(np.sum((apply(t, c.source) - c.target) ** 2, axis=1))))


@dataclass
class IcpParams:
    max_iterations: int = 60
    convergence_delta: float = 1e-5
    max_pair_distance: float = 25.0
    workers: int = 1
    # doubling line search along each closed-form step
    accelerate: bool = True
    max_doublings: int = 6


@dataclass(eq=False)
class IcpResult:
    transform: RigidTransform
    iterations: int
    rms_history: list = field(default_factory=list)
    converged: bool = False
    inlier_fraction: float = 0.0


def nearest_neighbors(tree, points, workers=1):
    dist, idx = tree.query(points, k=1, workers=workers)
    return dist, idx


def truncated_rms(dist, cap):
    """RMS with each squared distance capped at ``cap**2``, over all points.

    Using the full point count as denominator makes the ICP cost monotone
    under alternating pairing and closed-form updates.
    """
    return float(np.sqrt(np.mean(np.minimum(dist, cap) ** 2)))


def icp_refine(source, target, init=None, params=None):
    """Point-to-point ICP of ``source`` onto ``target`` starting from ``init``.

    ``rms_history[k]`` is the truncated RMS after the k-th closed-form update
    (entry 0 is the cost at ``init``).
    """
    params = params or IcpParams()
    source = np.asarray(source, dtype=float)
    target = np.asarray(target, dtype=float)
    if len(source) < 10 or len(target) < 10:
        raise RegistrationError("ICP needs at least 10 points in each cloud")
    t = init if init is not None else RigidTransform.identity()
    tree = cKDTree(target)
    cap = params.max_pair_distance

    def cost(tr):
        d, i = nearest_neighbors(tree, apply(tr, source), params.workers)
        return truncated_rms(d, cap), d, i

    rms, dist, idx = cost(t)
    history = [rms]
    converged = False
    iterations = 0
    for iterations in range(1, params.max_iterations + 1):
        inliers = dist <= cap
        if not inliers.any():
            raise RegistrationError("clouds disjoint under init: no pairs within max_pair_distance")
        step = rigid_fit(apply(t, source)[inliers], target[idx[inliers]])
        t_new = step @ t
        rms, dist, idx = cost(t_new)
        if params.accelerate:
            # slide further along a consistent step while the cost keeps dropping
            s = step
            for _ in range(params.max_doublings):
                s = s @ s
                trial = cost(s @ t)
                if trial[0] >= rms:
                    break
                t_new, (rms, dist, idx) = s @ t, trial
        t = t_new
        history.append(rms)
        if abs(history[-2] - history[-1]) < params.convergence_delta:
            converged = True
            break
    inliers = dist <= cap
    return IcpResult(transform=t, iterations=iterations, rms_history=history,
                     converged=converged, inlier_fraction=float(np.mean(inliers)))


ROI_MODES = ("dilated", "prism", "literal")


@dataclass(eq=False)
class RoiPatch:
    points: np.ndarray
    indices: np.ndarray
    organ: str
    hull_vertices: np.ndarray
    margin: float
    mode: str


def auto_margin(organ_world, subject_cloud, extra=5.0, radius=10.0):
    """Skin-to-organ-top distance plus ``extra`` mm."""
    top = organ_world[np.argmax(organ_world[:, 2])]
    d_xy = np.hypot(subject_cloud[:, 0] - top[0], subject_cloud[:, 1] - top[1])
    near = subject_cloud[d_xy <= radius]
    if len(near) == 0:
        near = subject_cloud[[int(np.argmin(d_xy))]]
    return float(max(np.median(near[:, 2]) - top[2], 0.0) + extra)


def extract_roi(subject_cloud, atlas, organ, reg, mode="dilated", margin=None, tol=1e-7):
    """Surface points of the subject above the registered organ.

    ``dilated``: inside the organ hull with every face pushed out by
    ``margin`` (default: organ-top-to-skin distance + 5 mm).
    ``prism``: xy inside the organ's projected hull grown by ``margin``
    (default 5 mm). ``literal``: inside the undilated hull.
    """
    if organ not in atlas.organs:
        raise RegistrationError(f"organ {organ!r} not in atlas")
    if mode not in ROI_MODES:
        raise RegistrationError(f"ROI mode must be one of {ROI_MODES}")
    cloud = np.asarray(subject_cloud, dtype=float)
    organ_pts = apply(reg, atlas.organs[organ])
    hull = ConvexHull(organ_pts)
    if mode == "literal":
        margin = 0.0
    elif margin is None:
        margin = auto_margin(organ_pts, cloud) if mode == "dilated" else 5.0

    if mode == "prism":
        hull2 = ConvexHull(organ_pts[:, :2])
        a, b = hull2.equations[:, :2], hull2.equations[:, 2]
        inside = np.all(cloud[:, :2] @ a.T + b <= margin + tol, axis=1)
    else:
        a, b = hull.equations[:, :3], hull.equations[:, 3]
        inside = np.all(cloud @ a.T + b <= margin + tol, axis=1)
    idx = np.flatnonzero(inside)
    if idx.size == 0:
        raise RegistrationError("organ not reachable from surface: empty ROI")
    return RoiPatch(points=cloud[idx], indices=idx, organ=organ,
                    hull_vertices=organ_pts[hull.vertices], margin=float(margin), mode=mode)


def points_in_hull(points, hull_points):
    """Containment oracle via Delaunay simplices (independent of face equations)."""
    return Delaunay(hull_points).find_simplex(points, tol=1e-9) >= 0


def register(atlas, subject_cloud, subject_keypoints, params=None, source=None):
    """Keypoint initialisation followed by ICP of the atlas skin onto the subject."""
    c = Correspondence3.from_dicts(atlas.keypoints, subject_keypoints)
    init = initial_transform(c)
    src = atlas.skin if source is None else source
    return icp_refine(src, subject_cloud, init, params)
