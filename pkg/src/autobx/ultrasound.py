"""B-mode-like frame synthesis by slicing the voxel phantom at the probe pose."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import ImagingGeometry, RigidTransform, apply, pixels_to_frame
from .kernels import trilinear_sample


@dataclass(frozen=True)
class NoiseModel:
    speckle_sigma: float = 0.15
    artifact_rate: float = 0.2
    attenuation: float = 0.05  # dB/mm, amplitude
    seed: int = 0
    ring_inner: tuple = (12.0, 40.0)  # px
    ring_thickness: tuple = (4.0, 8.0)
    ring_gain: tuple = (-110.0, -70.0)  # gray levels added on the annulus (lesion polarity)

    def __post_init__(self):
        for name in ("speckle_sigma", "artifact_rate", "attenuation"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.artifact_rate > 1:
            raise ValueError("artifact_rate is a per-frame probability (<= 1)")


@dataclass(eq=False)
class UltrasoundFrame:
    pixels: np.ndarray
    probe_pose: RigidTransform
    geometry: ImagingGeometry = field(default_factory=ImagingGeometry)
    timestamp: float = 0.0
    off_body: bool = False
    coupled: bool = True
    artifacts: list = field(default_factory=list)

    def __post_init__(self):
        if self.pixels.shape != (self.geometry.height, self.geometry.width):
            raise ValueError("frame pixels do not match the imaging geometry")


def frame_rng(run_seed, frame_index):
    """Independent stream per frame, so frames can be rendered in any order."""
    return np.random.default_rng(np.random.SeedSequence([int(run_seed), int(frame_index)]))


def frame_points(t_fb, g):
    ys, xs = np.mgrid[0:g.height, 0:g.width]
    return apply(t_fb, pixels_to_frame(xs.ravel(), ys.ravel(), g))


def ring_artifact(shape, rng, noise):
    """Bright annulus with an untouched core; returns (additive image, params)."""
    h, w = shape
    a = rng.uniform(*noise.ring_inner)
    b = a + rng.uniform(*noise.ring_thickness)
    gain = rng.uniform(*noise.ring_gain)
    margin = b + 2
    cy = rng.uniform(margin, h - margin)
    cx = rng.uniform(margin, w - margin)
    yy, xx = np.mgrid[0:h, 0:w]
    r = np.hypot(yy - cy, xx - cx)
    img = np.where((r >= a) & (r <= b), gain, 0.0)
    return img, {"center": (cx, cy), "inner": a, "outer": b, "gain": gain}


def render_frame(phantom, probe_pose, g=None, noise=None, rng=None, timestamp=0.0):
    """Slice ``phantom`` on the image plane ``probe_pose`` (T_FB).

    Trilinear sampling, depth attenuation, multiplicative Gaussian speckle,
    then (with probability ``artifact_rate``) one ring echo artifact.
    """
    g = g or ImagingGeometry()
    noise = noise or NoiseModel()
    rng = rng if rng is not None else np.random.default_rng(noise.seed)
    pts = frame_points(probe_pose, g)
    coords = np.ascontiguousarray(phantom.voxel_coords(pts), dtype=np.float64)
    inside = np.all((coords >= 0) & (coords <= np.array(phantom.dims) - 1), axis=1)
    if not inside.any():
        return UltrasoundFrame(np.zeros((g.height, g.width), np.uint8), probe_pose, g,
                               timestamp, off_body=True)
    img = trilinear_sample(phantom.intensities, coords, 0.0).reshape(g.height, g.width)
    if noise.attenuation > 0:
        depth = np.arange(g.height) * g.spacing_y
        img = img * (10.0 ** (-noise.attenuation * depth / 20.0))[:, None]
    artifacts = []
    if noise.artifact_rate > 0 and rng.random() < noise.artifact_rate:
        ring, params = ring_artifact(img.shape, rng, noise)
        img = img + ring * (img > 0)
        artifacts.append(params)
    if noise.speckle_sigma > 0:
        img = img * (1.0 + rng.normal(0.0, noise.speckle_sigma, size=img.shape))
    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return UltrasoundFrame(pixels, probe_pose, g, timestamp, artifacts=artifacts)


def blank_frame(probe_pose, g=None, timestamp=0.0):
    """What the probe returns without acoustic coupling: no echo."""
    g = g or ImagingGeometry()
    return UltrasoundFrame(np.zeros((g.height, g.width), np.uint8), probe_pose, g,
                           timestamp, coupled=False)


def synthetic_target_frame(kind, rng, g=None, noise=None, background=128.0, contrast=-80.0):
    """Flat tissue frame with one Gaussian-profile lesion or one flat-core ring.

    Both use the lesion polarity (``contrast`` sign). Returns ``(frame, truth)``
    with truth holding the pixel centre and characteristic radius.
    """
    g = g or ImagingGeometry()
    noise = noise or NoiseModel()
    h, w = g.height, g.width
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "lesion":
        s = rng.uniform(10.0, 20.0)
        cx, cy = rng.uniform(3 * s, w - 3 * s), rng.uniform(3 * s, h - 3 * s)
        r2 = (xx - cx) ** 2 + (yy - cy) ** 2
        img = background + contrast * np.exp(-r2 / (2.0 * s * s))
        truth = {"kind": kind, "center": (cx, cy), "radius": s}
    elif kind == "ring":
        ring, params = ring_artifact((h, w), rng, noise)
        img = background + np.sign(contrast) * np.abs(ring)
        truth = {"kind": kind, "center": params["center"], "radius": params["inner"]}
    else:
        raise ValueError("kind must be 'lesion' or 'ring'")
    if noise.speckle_sigma > 0:
        img = img * (1.0 + rng.normal(0.0, noise.speckle_sigma, size=img.shape))
    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return UltrasoundFrame(pixels, RigidTransform.identity(), g), truth
