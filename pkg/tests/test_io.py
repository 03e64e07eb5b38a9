import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from autobx import io as aio
from autobx.geometry import RigidTransform, random_transform
from autobx.ultrasound import UltrasoundFrame

finite = st.floats(-1e6, 1e6, allow_nan=False)


@given(arrays(np.float64, st.tuples(st.integers(0, 30), st.just(3)), elements=finite))
def test_cloud_round_trip_is_exact(tmp_path_factory, pts):
    path = tmp_path_factory.mktemp("c") / "c.xyz"
    aio.write_cloud(path, pts)
    assert np.array_equal(aio.read_cloud(path), pts.reshape(-1, 3))


@pytest.mark.parametrize("body, line", [
    ("2\n1 2 3\n", 3),
    ("x\n", 1),
    ("1\n1 2\n", 2),
    ("1\n1 2 z\n", 2),
    ("1\n1 2 3\n4 5 6\n", 3),
    ("", 1),
])
def test_cloud_errors_carry_line_numbers(tmp_path, body, line):
    path = tmp_path / "bad.xyz"
    path.write_text(body)
    with pytest.raises(aio.CloudFormatError, match=f":{line}:"):
        aio.read_cloud(path)


def test_transform_and_keypoints_round_trip(tmp_path, rng):
    t = random_transform(rng)
    aio.write_transform(tmp_path / "t.txt", t)
    assert np.array_equal(aio.read_transform(tmp_path / "t.txt").matrix, t.matrix)
    src = {"navel": np.array([1.0, 2, 3]), "left_chest": np.array([4.0, 5, 6])}
    dst = {k: v + 0.5 for k, v in src.items()}
    aio.write_keypoints(tmp_path / "k.txt", src, dst)
    s2, d2 = aio.read_keypoints(tmp_path / "k.txt")
    assert all(np.array_equal(s2[k], src[k]) and np.array_equal(d2[k], dst[k]) for k in src)


def test_frame_sequence_round_trip(tmp_path, rng):
    frames = [UltrasoundFrame(rng.integers(0, 256, (512, 512), dtype=np.uint8), random_transform(rng))
              for _ in range(3)]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        aio.write_frame_sequence(tmp_path / "seq", frames)
    assert (tmp_path / "seq" / "frame_00002.pgm").read_bytes()[:2] == b"P5"
    back = list(aio.iter_frame_sequence(tmp_path / "seq"))
    assert [i for i, _, _ in back] == [0, 1, 2]
    for (_, px, pose), f in zip(back, frames):
        assert np.array_equal(px, f.pixels)
        assert np.array_equal(pose.matrix, f.probe_pose.matrix)


def test_missing_pose_sidecar(tmp_path):
    aio.write_pgm(tmp_path / "frame_00000.pgm", np.zeros((4, 4), np.uint8))
    with pytest.raises(FileNotFoundError):
        list(aio.iter_frame_sequence(tmp_path))
