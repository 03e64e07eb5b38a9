import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial import cKDTree

from autobx.geometry import RigidTransform, apply, random_transform, rotation_error_deg
from autobx.phantom import KEYPOINT_NAMES, Atlas, build_atlas, ellipsoid_surface
from autobx.registration import (
    Correspondence3, IcpParams, RegistrationError, extract_roi, icp_refine, initial_transform,
    points_in_hull, register, rigid_fit,
)

seeds = st.integers(0, 2**32 - 1)


def kp(points):
    return dict(zip(KEYPOINT_NAMES, np.asarray(points, dtype=float)))


TRI = np.array([[0.0, 0, 0], [100, 0, 0], [0, 80, 10]])


def test_initial_transform_examples():
    c = Correspondence3.from_dicts(kp(TRI), kp(TRI))
    assert np.allclose(initial_transform(c).matrix, np.eye(4), atol=1e-12)
    c = Correspondence3.from_dicts(kp(TRI), kp(TRI + [10, 0, 0]))
    t = initial_transform(c)
    assert np.allclose(t.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(t.translation, [10, 0, 0], atol=1e-12)


@given(seeds)
def test_initial_transform_exact_for_rigid_motion(seed):
    t = random_transform(np.random.default_rng(seed), 180, 300)
    c = Correspondence3.from_dicts(kp(TRI), kp(apply(t, TRI)))
    got = initial_transform(c)
    assert np.max(np.abs(got.matrix - t.matrix)) < 1e-9


def test_correspondence_validation():
    with pytest.raises(RegistrationError, match="collinear"):
        Correspondence3(np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]]), TRI)
    with pytest.raises(RegistrationError, match="labels"):
        Correspondence3(TRI, TRI, ("a", "b", "c"))
    with pytest.raises(RegistrationError, match="missing"):
        Correspondence3.from_dicts({"navel": TRI[0]}, kp(TRI))


@given(seeds)
def test_rigid_fit_never_reflects(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(8, 3))
    b = a * [1, 1, -1]  # mirror image: best proper rotation, not the reflection
    assert np.linalg.det(rigid_fit(a, b).rotation) > 0


def blob(rng, n=600):
    return ellipsoid_surface([0, 0, 0], [60, 40, 25], n) + rng.normal(0, 0.01, (n, 3))


def test_icp_self_registration(rng):
    pts = blob(rng)
    r = icp_refine(pts, pts, RigidTransform.identity())
    assert r.converged and r.iterations == 1
    assert r.rms_history[-1] < 1e-9
    assert np.allclose(r.transform.matrix, np.eye(4), atol=1e-9)


@given(seeds)
def test_icp_recovers_nearby_transform(seed):
    rng = np.random.default_rng(seed)
    src = ellipsoid_surface([0, 0, 0], [60, 40, 25], 1500)
    truth = RigidTransform.from_axis_angle(rng.normal(size=3), math.radians(rng.uniform(0, 15)),
                                           rng.uniform(-15, 15, 3))
    init = RigidTransform.from_axis_angle(rng.normal(size=3), math.radians(rng.uniform(0, 10)),
                                          rng.uniform(-20, 20, 3) / math.sqrt(3)) @ truth
    # init is within 10 deg / 20 mm of the truth
    r = icp_refine(src, apply(truth, src), init, IcpParams(200, 1e-10, 50))
    h = np.array(r.rms_history)
    assert np.all(np.diff(h) <= 1e-9)
    if r.rms_history[-1] < 1e-3:
        assert rotation_error_deg(r.transform.rotation, truth.rotation) < 0.5
        assert np.linalg.norm(r.transform.translation - truth.translation) < 1.0


def test_icp_flip_reports_honestly(rng):
    src = ellipsoid_surface([0, 0, 0], [60, 40, 25], 800)
    flip = RigidTransform.from_axis_angle([1, 0, 0], math.pi)
    r = icp_refine(src, src, flip, IcpParams(5, 1e-12, 50))
    assert r.iterations <= 5
    assert r.converged == (abs(r.rms_history[-2] - r.rms_history[-1]) < 1e-12)


def test_icp_errors():
    pts = np.random.default_rng(0).normal(size=(50, 3))
    with pytest.raises(RegistrationError, match="at least 10"):
        icp_refine(pts[:5], pts)
    with pytest.raises(RegistrationError, match="disjoint"):
        icp_refine(pts, pts + 1000, RigidTransform.identity(), IcpParams(max_pair_distance=5))


def test_icp_pairs_match_brute_force(rng):
    # tree pairing is exact: compare against dense distances
    src, dst = rng.normal(size=(300, 3)), rng.normal(size=(400, 3))
    d_tree, i_tree = cKDTree(dst).query(src)
    dense = np.linalg.norm(src[:, None] - dst[None], axis=2)
    assert np.array_equal(i_tree, dense.argmin(axis=1))
    assert np.allclose(d_tree, dense.min(axis=1))


def flat_skin(spacing=2.0, z=100.0):
    xs, ys = np.meshgrid(np.arange(0, 200.1, spacing), np.arange(0, 120.1, spacing))
    return np.column_stack([xs.ravel(), ys.ravel(), np.full(xs.size, z)])


def organ_atlas(center=(100, 60, 60), axes=(30, 20, 15)):
    skin = flat_skin()
    return Atlas(organs={"liver": ellipsoid_surface(center, axes, 600)}, skin=skin,
                 keypoints=kp([[20, 20, 100], [20, 100, 100], [180, 60, 100]]), base_z=0.0)


def test_roi_prism_is_bounded_by_hull_xy():
    atlas = organ_atlas()
    cloud = flat_skin()
    roi = extract_roi(cloud, atlas, "liver", RigidTransform.identity(), mode="prism", margin=5.0)
    assert len(roi.points) > 0
    # analytic oracle: ellipse grown by the margin contains every ROI point
    dx, dy = roi.points[:, 0] - 100, roi.points[:, 1] - 60
    assert np.all((dx / 35) ** 2 + (dy / 25) ** 2 <= 1 + 1e-9)
    inner = ((cloud[:, 0] - 100) / 29) ** 2 + ((cloud[:, 1] - 60) / 19) ** 2 <= 1
    assert set(np.flatnonzero(inner)) <= set(roi.indices)


def test_roi_dilated_default_margin_reaches_skin():
    atlas = organ_atlas()
    roi = extract_roi(flat_skin(), atlas, "liver", RigidTransform.identity())
    top = atlas.organs["liver"][:, 2].max()
    assert roi.margin == pytest.approx(100 - top + 5)
    assert len(roi.points) > 0
    assert np.all(np.isin(roi.points, flat_skin()).all(axis=1))


def test_roi_literal_and_unreachable():
    atlas = organ_atlas()
    with pytest.raises(RegistrationError, match="not reachable"):
        extract_roi(flat_skin(), atlas, "liver", RigidTransform.identity(), mode="literal")
    away = RigidTransform.from_translation(1000, 0, 0)
    with pytest.raises(RegistrationError, match="not reachable"):
        extract_roi(flat_skin(), atlas, "liver", away, mode="prism")
    with pytest.raises(RegistrationError):
        extract_roi(flat_skin(), atlas, "kidney", RigidTransform.identity())


def test_roi_full_body_hull_is_whole_cloud():
    atlas = build_atlas()
    atlas = Atlas(organs={"skin": atlas.body_hull_points()}, skin=atlas.skin,
                  keypoints=atlas.keypoints, base_z=atlas.base_z)
    roi = extract_roi(atlas.skin, atlas, "skin", RigidTransform.identity(), mode="literal")
    assert len(roi.points) == len(atlas.skin)


@given(seeds)
def test_hull_face_test_agrees_with_delaunay(seed):
    rng = np.random.default_rng(seed)
    hull = rng.normal(size=(40, 3)) * [30, 20, 10]
    q = rng.normal(size=(200, 3)) * [35, 25, 12]
    atlas = Atlas(organs={"o": hull}, skin=q, keypoints=kp(TRI))
    try:
        roi = extract_roi(q, atlas, "o", RigidTransform.identity(), mode="literal", tol=0.0)
        got = set(roi.indices)
    except RegistrationError:
        got = set()
    want = set(np.flatnonzero(points_in_hull(q, hull)))
    # points within float noise of a face may differ
    from scipy.spatial import ConvexHull
    eq = ConvexHull(hull).equations
    margin = np.max(q @ eq[:, :3].T + eq[:, 3], axis=1)
    ambiguous = set(np.flatnonzero(np.abs(margin) < 1e-7))
    assert got - ambiguous == want - ambiguous


def test_register_end_to_end_small(rng):
    atlas = build_atlas()
    truth = RigidTransform.from_axis_angle([0, 0, 1], math.radians(8), [12, -9, 4])
    subject = apply(truth, atlas.skin) + rng.normal(0, 0.3, atlas.skin.shape)
    kps = {k: apply(truth, v) for k, v in atlas.keypoints.items()}
    r = register(atlas, subject, kps, IcpParams(), source=atlas.skin)
    assert rotation_error_deg(r.transform.rotation, truth.rotation) < 0.5
    assert np.all(np.diff(r.rms_history) <= 1e-9)
