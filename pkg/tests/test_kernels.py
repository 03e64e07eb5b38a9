import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from autobx import kernels
from autobx.kernels import python_backend, compiled_backend

needs_ext = pytest.mark.skipif(compiled_backend is None, reason="compiled extension not built")


def test_trilinear_oracle():
    vol = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    pts = np.array([[0.5, 1.0, 2.5], [1.0, 2.0, 3.0], [-1.0, 0, 0], [0.25, 0.5, 0.75]])
    out = python_backend.trilinear_sample(vol, pts, fill=-7.0)
    # the volume is affine in its indices, so interpolation reproduces 12i + 4j + k
    exp = [12 * 0.5 + 4 + 2.5, 12 + 8 + 3, -7.0, 3 + 2 + 0.75]
    assert np.allclose(out, exp)


@needs_ext
@given(st.integers(0, 10_000))
def test_trilinear_parity(seed):
    rng = np.random.default_rng(seed)
    vol = rng.integers(0, 256, (7, 9, 5)).astype(np.uint8)
    pts = rng.uniform(-1.5, 9.5, (200, 3))
    a = python_backend.trilinear_sample(vol, pts, 3.0)
    b = compiled_backend.trilinear_sample(vol, pts, 3.0)
    assert np.allclose(a, b, atol=1e-9)


@needs_ext
@given(st.integers(0, 10_000), st.booleans())
def test_hough_parity(seed, both):
    rng = np.random.default_rng(seed)
    n = 300
    rows, cols = rng.uniform(0, 120, n), rng.uniform(0, 160, n)
    ang = rng.uniform(0, 2 * np.pi, n)
    args = (rows, cols, np.sin(ang), np.cos(ang), 4, 20, 120, 160, both)
    assert np.array_equal(python_backend.hough_center_votes(*args), compiled_backend.hough_center_votes(*args))


def test_hough_votes_reach_center():
    t = np.linspace(0, 2 * np.pi, 90, endpoint=False)
    rows, cols = 50 + 15 * np.sin(t), 60 + 15 * np.cos(t)
    # inward gradients
    acc = kernels.hough_center_votes(rows, cols, -np.sin(t), -np.cos(t), 10, 20, 100, 120, False)
    r, c = np.unravel_index(np.argmax(acc), acc.shape)
    assert (r, c) == (50, 60) and acc[r, c] >= 80


def test_env_var_selects_python():
    code = "from autobx import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, AUTOBX_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
    env.pop("AUTOBX_PURE_PYTHON")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == ("cython" if compiled_backend is not None else "python")
