"""Per-frame lesion detection, voxelisation into world space and clustering.

Per frame: median + Gaussian denoise, depth-gain levelling, polarity
normalisation (lesions bright), Canny edges, circle Hough voting, then the
circular-intensity rejection test ``I(r + 2d) < I(r + d) < I(r)`` where
``I(x)`` is the mean over the disc of radius ``x``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import cv2
import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .geometry import pixels_to_world
from .kernels import hough_center_votes


@dataclass(frozen=True)
class CirParams:
    r_min: int = 8
    r_max: int = 60
    accumulator_threshold: float = 0.45
    delta: int = 5
    intensity_floor: float | None = None  # I0; None: background + 2 sigma per frame
    polarity: str = "dark"
    disc_mode: str = "disc"
    edge_sigma: float = 3.0  # extra smoothing for the edge map only
    canny_low: float = 8.0
    canny_high: float = 16.0
    max_candidates: int = 20
    min_edge_contrast: float = 3.0  # supporting-edge gradient / frame median gradient
    radial_alignment: float = 0.7
    depth_levelling: bool = True

    def __post_init__(self):
        if self.r_min < 3:
            raise ValueError("r_min must be at least 3 px")
        if self.r_max < self.r_min:
            raise ValueError("r_max must be >= r_min")
        if self.delta < 1:
            raise ValueError("delta must be at least 1 px")
        if self.polarity not in ("bright", "dark"):
            raise ValueError("polarity must be 'bright' or 'dark'")
        if self.disc_mode not in ("disc", "annulus"):
            raise ValueError("disc_mode must be 'disc' or 'annulus'")
        if not 0 < self.accumulator_threshold <= 1.5:
            raise ValueError("accumulator_threshold is a fraction of the circumference")

    def check_geometry(self, g):
        if 2 * (self.r_max + 2 * self.delta) >= min(g.width, g.height):
            raise ValueError("r_max + 2 delta does not fit in the image")


@dataclass(eq=False)
class DetectedTarget:
    center: tuple  # (x, y) pixels
    radius: float
    means: tuple  # I(r), I(r + delta), I(r + 2 delta)
    accepted: bool
    votes: int = 0
    support: float = 0.0
    edge_contrast: float = 0.0


def cir_accepts(means):
    i_r, i_rd, i_r2d = means
    return bool(i_r2d < i_rd < i_r)


@dataclass(eq=False)
class FrameAnalysis:
    targets: list
    normalized: np.ndarray
    valid: np.ndarray
    background: float
    sigma: float
    threshold: float


def preprocess(pixels, params):
    """Denoise, level depth gain and normalise polarity.

    Returns ``(image, valid)``; pixels without echo (zero) are filled with
    the background so they produce no edges.
    """
    raw = np.asarray(pixels, dtype=np.uint8)
    med = cv2.medianBlur(raw, 5)
    img = cv2.GaussianBlur(med.astype(np.float32), (3, 3), 0)
    valid = med > 0
    if not valid.any():
        return np.zeros_like(img), valid
    if params.depth_levelling:
        masked = np.where(valid, img, np.nan)
        with np.errstate(all="ignore"):
            row_med = np.nanmedian(masked, axis=1)
        ref = np.nanmedian(row_med)
        gain = np.where(np.isfinite(row_med) & (row_med > 0), ref / row_med, 1.0)
        img = img * gain[:, None].astype(np.float32)
    if params.polarity == "dark":
        img = 255.0 - img
    bg = float(np.median(img[valid]))
    img = np.where(valid, img, bg).astype(np.float32)
    return img, valid


def background_stats(img, valid):
    v = img[valid]
    bg = float(np.median(v))
    sigma = 1.4826 * float(np.median(np.abs(v - bg)))
    return bg, sigma


def disc_mean(img, cx, cy, radius, inner=None):
    """Mean of ``img`` over pixels within ``radius`` of (cx, cy) (annulus if ``inner``)."""
    h, w = img.shape
    r = int(math.ceil(radius)) + 1
    x0, x1 = max(int(cx) - r, 0), min(int(cx) + r + 1, w)
    y0, y1 = max(int(cy) - r, 0), min(int(cy) + r + 1, h)
    if x0 >= x1 or y0 >= y1:
        return float("nan")
    yy, xx = np.mgrid[y0:y1, x0:x1]
    d = np.hypot(xx - cx, yy - cy)
    mask = d <= radius
    if inner is not None:
        mask &= d > inner
    sel = img[y0:y1, x0:x1][mask]
    return float(sel.mean()) if sel.size else float("nan")


def ring_means(img, cx, cy, r, delta, mode="disc"):
    radii = (r, r + delta, r + 2 * delta)
    if mode == "annulus":
        return tuple(disc_mean(img, cx, cy, x, inner=x - delta) for x in radii)
    return tuple(disc_mean(img, cx, cy, x) for x in radii)


def _fit_circle(xs, ys):
    """Algebraic (Kasa) least-squares circle; returns (cx, cy, r) or None."""
    if len(xs) < 6:
        return None
    a = np.column_stack([xs, ys, np.ones_like(xs)])
    b = xs**2 + ys**2
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    cx, cy = sol[0] / 2, sol[1] / 2
    r2 = sol[2] + cx**2 + cy**2
    if r2 <= 0:
        return None
    return cx, cy, math.sqrt(r2)


def hough_circles(img, params):
    """Circle candidates ``(cx, cy, r, votes, support)`` from gradient voting."""
    h, w = img.shape
    sm = cv2.GaussianBlur(img, (0, 0), params.edge_sigma) if params.edge_sigma > 0 else img
    dx16 = cv2.Sobel(np.clip(sm, 0, 255).astype(np.uint8), cv2.CV_16S, 1, 0, ksize=3)
    dy16 = cv2.Sobel(np.clip(sm, 0, 255).astype(np.uint8), cv2.CV_16S, 0, 1, ksize=3)
    edges = cv2.Canny(dx16, dy16, params.canny_low, params.canny_high, L2gradient=True)
    ey, ex = np.nonzero(edges)
    if ey.size == 0:
        return []
    gx = cv2.Sobel(sm, cv2.CV_64F, 1, 0, ksize=3)[ey, ex]
    gy = cv2.Sobel(sm, cv2.CV_64F, 0, 1, ksize=3)[ey, ex]
    mag = np.hypot(gx, gy)
    ok = mag > 1e-9
    ey, ex, gx, gy, mag = ey[ok], ex[ok], gx[ok], gy[ok], mag[ok]
    ux, uy = gx / mag, gy / mag
    full = np.hypot(cv2.Sobel(sm, cv2.CV_64F, 1, 0, ksize=3), cv2.Sobel(sm, cv2.CV_64F, 0, 1, ksize=3))
    noise_grad = max(float(np.median(full)), 1e-3)
    acc = hough_center_votes(ey, ex, uy, ux, params.r_min, params.r_max, h, w, True)
    votes = ndimage.uniform_filter(acc.astype(np.float64), size=3) * 9.0
    size = 2 * params.r_min + 1
    peaks = (votes == ndimage.maximum_filter(votes, size=size, mode="constant"))
    min_votes = params.accumulator_threshold * 2.0 * math.pi * params.r_min
    peaks &= votes >= min_votes
    py, px = np.nonzero(peaks)
    order = np.lexsort((px, py, -votes[py, px]))[: params.max_candidates]
    out = []
    taken = []
    for k in order:
        cy, cx = float(py[k]), float(px[k])
        if any(math.hypot(cx - tx, cy - ty) <= params.r_min for tx, ty, _ in taken):
            continue
        dx, dy = ex - cx, ey - cy
        d = np.hypot(dx, dy)
        near = (d >= params.r_min - 1.5) & (d <= params.r_max + 1.5) & (d > 0)
        radial = np.abs((dx * ux + dy * uy)[near] / d[near]) >= params.radial_alignment
        dn = d[near][radial]
        if dn.size == 0:
            continue
        hist = np.bincount(np.rint(dn).astype(int), minlength=params.r_max + 3)
        radii = np.arange(params.r_min, params.r_max + 1)
        band = hist[radii - 1] + hist[radii] + hist[radii + 1]
        support = band / (2.0 * math.pi * radii)
        # innermost supported radius: the boundary that encloses the core
        ok = support >= params.accumulator_threshold
        nb_lo = np.r_[-np.inf, support[:-1]]
        nb_hi = np.r_[support[1:], -np.inf]
        ok &= (support >= nb_lo) & (support >= nb_hi)
        if not ok.any():
            continue
        best = int(np.flatnonzero(ok)[0])
        r = float(radii[best])
        # a weaker circle overlapping a stronger candidate's CIR disc is its flank
        if any(math.hypot(cx - tx, cy - ty) < r + tr + 2 * params.delta for tx, ty, tr in taken):
            continue
        sel = near.copy()
        sel[near] = radial & (np.abs(d[near] - r) <= 2.0)
        contrast = float(mag[sel].mean()) / noise_grad if sel.any() else 0.0
        if contrast < params.min_edge_contrast:
            continue
        fit = _fit_circle(ex[sel].astype(float), ey[sel].astype(float))
        if fit is not None and math.hypot(fit[0] - cx, fit[1] - cy) <= 3.0 and abs(fit[2] - r) <= 3.0:
            cx, cy, r = fit
        taken.append((cx, cy, r))
        out.append((cx, cy, r, int(votes[py[k], px[k]]), float(support[best]), contrast))
    return out


def analyze_frame(frame, params=None):
    params = params or CirParams()
    params.check_geometry(frame.geometry)
    img, valid = preprocess(frame.pixels, params)
    if not valid.any():
        return FrameAnalysis([], img, valid, 0.0, 0.0, math.inf)
    bg, sigma = background_stats(img, valid)
    thr = params.intensity_floor if params.intensity_floor is not None else bg + 2.0 * sigma
    targets = []
    for cx, cy, r, votes, support, contrast in hough_circles(img, params):
        means = ring_means(img, cx, cy, r, params.delta, params.disc_mode)
        targets.append(DetectedTarget(center=(cx, cy), radius=r, means=means,
                                      accepted=cir_accepts(means), votes=votes, support=support,
                                      edge_contrast=contrast))
    return FrameAnalysis(targets, img, valid, bg, sigma, thr)


def detect_in_frame(frame, params=None):
    """Circle candidates for one frame; ``accepted`` marks those passing CIR."""
    return analyze_frame(frame, params).targets


@dataclass(eq=False)
class TargetVoxelSet:
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    intensities: np.ndarray = field(default_factory=lambda: np.zeros(0))
    frame_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __len__(self):
        return len(self.positions)

    @classmethod
    def concatenate(cls, sets):
        sets = [s for s in sets if len(s)]
        if not sets:
            return cls()
        return cls(np.vstack([s.positions for s in sets]),
                   np.concatenate([s.intensities for s in sets]),
                   np.concatenate([s.frame_indices for s in sets]))


def target_pixel_mask(targets, analysis):
    """Pixels inside any accepted circle whose normalised intensity exceeds I0."""
    img = analysis.normalized
    h, w = img.shape
    mask = np.zeros((h, w), dtype=bool)
    for t in targets:
        if not t.accepted:
            continue
        cx, cy = t.center
        r = t.radius
        x0, x1 = max(int(math.floor(cx - r)), 0), min(int(math.ceil(cx + r)) + 1, w)
        y0, y1 = max(int(math.floor(cy - r)), 0), min(int(math.ceil(cy + r)) + 1, h)
        if x0 >= x1 or y0 >= y1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        mask[y0:y1, x0:x1] |= np.hypot(xx - cx, yy - cy) <= r
    return mask & analysis.valid & (img > analysis.threshold)


def voxelize_targets(targets, frame, params=None, analysis=None, frame_index=0,
                     mapping="literal"):
    """World-space points for the qualifying pixels of accepted targets."""
    if not any(t.accepted for t in targets):
        return TargetVoxelSet()
    analysis = analysis or analyze_frame(frame, params)
    ys, xs = np.nonzero(target_pixel_mask(targets, analysis))
    if ys.size == 0:
        return TargetVoxelSet()
    pos = pixels_to_world(xs, ys, frame.probe_pose, frame.geometry, mapping)
    inten = np.clip(analysis.normalized[ys, xs], 0, 255).astype(float)
    return TargetVoxelSet(pos, inten, np.full(ys.size, frame_index, dtype=int))


class VolumeAccumulator:
    """Append-only store of target voxels from many frames."""

    def __init__(self):
        self._sets = []

    def add(self, voxel_set):
        if len(voxel_set):
            self._sets.append(voxel_set)

    def __len__(self):
        return sum(len(s) for s in self._sets)

    def raw(self):
        return TargetVoxelSet.concatenate(self._sets)

    def voxels(self, resolution=1.0):
        """Merge points sharing a ``resolution``-mm cell (mean position, max intensity)."""
        allp = self.raw()
        if not len(allp):
            return allp
        cells = np.floor(allp.positions / resolution).astype(np.int64)
        uniq, inv = np.unique(cells, axis=0, return_inverse=True)
        inv = inv.ravel()
        n = len(uniq)
        counts = np.bincount(inv, minlength=n).astype(float)
        pos = np.column_stack([np.bincount(inv, allp.positions[:, a], n) / counts for a in range(3)])
        inten = np.zeros(n)
        np.maximum.at(inten, inv, allp.intensities)
        first = np.full(n, np.iinfo(np.int64).max)
        np.minimum.at(first, inv, allp.frame_indices)
        return TargetVoxelSet(pos, inten, first)


@dataclass(frozen=True)
class DbscanParams:
    epsilon: float = 3.0
    min_points: int = 20

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.min_points < 1:
            raise ValueError("min_points must be at least 1")


@dataclass(eq=False)
class TargetCluster:
    label: int
    members: np.ndarray  # indices into the clustered point array
    positions: np.ndarray
    centroid: np.ndarray

    @property
    def size(self):
        return len(self.members)


def dbscan(points, epsilon, min_points, workers=1):
    """DBSCAN labels (-1 = noise); a point's own position counts toward ``min_points``.

    Border points join the cluster of their nearest core point (ties broken by
    the core point's coordinates), which makes the partition independent of
    input order. Clusters are numbered by their smallest member index.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(pts)
    labels = np.full(n, -1, dtype=int)
    if n == 0:
        return labels
    tree = cKDTree(pts)
    nbrs = tree.query_ball_point(pts, epsilon, workers=workers)
    core = np.fromiter((len(nb) >= min_points for nb in nbrs), dtype=bool, count=n)
    comp = np.full(n, -1, dtype=int)
    ncomp = 0
    for i in np.flatnonzero(core):
        if comp[i] != -1:
            continue
        comp[i] = ncomp
        stack = [i]
        while stack:
            j = stack.pop()
            for k in nbrs[j]:
                if core[k] and comp[k] == -1:
                    comp[k] = ncomp
                    stack.append(k)
        ncomp += 1
    for i in np.flatnonzero(~core):
        cands = [k for k in nbrs[i] if core[k]]
        if not cands:
            continue
        best = min(cands, key=lambda k: (float(np.sum((pts[k] - pts[i]) ** 2)), tuple(pts[k])))
        comp[i] = comp[best]
    # renumber by smallest member index
    order = {}
    for i in range(n):
        c = comp[i]
        if c >= 0 and c not in order:
            order[c] = len(order)
    for i in range(n):
        if comp[i] >= 0:
            labels[i] = order[comp[i]]
    return labels


def cluster(points, params=None, workers=1):
    """DBSCAN over 3D positions; returns clusters with arithmetic-mean centroids."""
    params = params or DbscanParams()
    pts = points.positions if isinstance(points, TargetVoxelSet) else np.asarray(points, dtype=float)
    pts = pts.reshape(-1, 3)
    labels = dbscan(pts, params.epsilon, params.min_points, workers)
    out = []
    for lab in range(labels.max() + 1 if labels.size else 0):
        idx = np.flatnonzero(labels == lab)
        out.append(TargetCluster(label=lab, members=idx, positions=pts[idx],
                                 centroid=pts[idx].mean(axis=0)))
    return out
