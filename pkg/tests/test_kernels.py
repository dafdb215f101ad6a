"""Numba and NumPy kernel paths must agree on identical inputs."""

import os
import subprocess
import sys

import numpy as np
import pytest

from zrcg import kernels


@pytest.fixture(params=[np.float32, np.float64], ids=["f32", "f64"])
def dtype(request):
    return request.param


def _gru_weights(rng, d, dtype):
    Ws = [(rng.standard_normal((d, d)) * 0.4).astype(dtype) for _ in range(6)]
    bs = [(rng.standard_normal(d) * 0.1).astype(dtype) for _ in range(3)]
    return Ws, bs


def test_gru_forward_paths_agree(dtype):
    rng = np.random.default_rng(7)
    X = rng.standard_normal((5, 6, 4)).astype(dtype)
    lengths = np.array([6, 1, 3, 5, 2], dtype=np.int64)
    Ws, bs = _gru_weights(rng, 4, dtype)
    args = (X, lengths, Ws[0], Ws[1], bs[0], Ws[2], Ws[3], bs[1], Ws[4], Ws[5], bs[2])
    out_nb = kernels.gru_forward_nb(*args)
    out_np = kernels.gru_forward_np(*args)
    for a, b in zip(out_nb, out_np):
        np.testing.assert_allclose(np.asarray(a), np.asarray(b), rtol=3e-5, atol=3e-6)


def test_gru_backward_paths_agree(dtype):
    rng = np.random.default_rng(8)
    X = rng.standard_normal((4, 5, 3)).astype(dtype)
    lengths = np.array([5, 2, 4, 1], dtype=np.int64)
    Ws, bs = _gru_weights(rng, 3, dtype)
    fargs = (X, lengths, Ws[0], Ws[1], bs[0], Ws[2], Ws[3], bs[1], Ws[4], Ws[5], bs[2])
    caches = kernels.gru_forward_nb(*fargs)[1:]
    dH = rng.standard_normal((4, 3)).astype(dtype)
    bargs = (X, lengths, *caches, Ws[0], Ws[1], Ws[2], Ws[3], Ws[4], Ws[5], dH)
    g_nb = kernels.gru_backward_nb(*bargs)
    g_np = kernels.gru_backward_np(*bargs)
    for a, b in zip(g_nb, g_np):
        np.testing.assert_allclose(np.asarray(a), np.asarray(b), rtol=3e-4, atol=3e-5)


@pytest.mark.parametrize("include_self", [False, True])
def test_entropy_paths_agree(dtype, include_self):
    rng = np.random.default_rng(9)
    E = rng.standard_normal((7, 4)).astype(dtype)
    h_nb, d_nb = kernels.entropy_nb(E, 0.25, include_self, 1e-12)
    h_np, d_np = kernels.entropy_np(E, 0.25, include_self, 1e-12)
    assert abs(h_nb - h_np) < 1e-6
    np.testing.assert_allclose(np.asarray(d_nb), np.asarray(d_np), rtol=2e-4, atol=2e-5)


def test_rank_paths_agree(dtype):
    rng = np.random.default_rng(10)
    U = rng.standard_normal((9, 5)).astype(dtype)
    items = rng.standard_normal((30, 5)).astype(dtype)
    truth = rng.integers(0, 30, 9)
    negs = rng.integers(0, 30, (9, 11))
    r_nb = np.asarray(kernels.rank_nb(U, items, truth, negs))
    r_np = np.asarray(kernels.rank_np(U, items, truth, negs))
    np.testing.assert_array_equal(r_nb, r_np)


def test_kmeans_assign_paths_agree(dtype):
    rng = np.random.default_rng(11)
    X = rng.standard_normal((40, 6)).astype(dtype)
    C = rng.standard_normal((5, 6)).astype(dtype)
    l_nb, d_nb = kernels.kmeans_assign_nb(X, C)
    l_np, d_np = kernels.kmeans_assign_np(X, C)
    np.testing.assert_array_equal(np.asarray(l_nb), np.asarray(l_np))
    np.testing.assert_allclose(np.asarray(d_nb), np.asarray(d_np), rtol=1e-5)


def test_env_flag_zero_forces_numpy_path():
    code = (
        "import zrcg.backend as b, zrcg.kernels as k; "
        "assert not b.NUMBA_AVAILABLE; "
        "assert k.entropy is k.entropy_np and k.gru_forward is k.gru_forward_np "
        "and k.rank_against is k.rank_np and k.kmeans_assign is k.kmeans_assign_np"
    )
    env = dict(os.environ, ZRCG_NUMBA="0")
    subprocess.run([sys.executable, "-c", code], check=True, env=env)


def test_env_flag_one_forces_numba_path():
    import zrcg.backend as backend

    if not backend.NUMBA_AVAILABLE:
        pytest.skip("numba unavailable in this environment")
    code = (
        "import zrcg.kernels as k; "
        "assert k.gru_forward is k.gru_forward_nb and k.entropy is k.entropy_nb"
    )
    env = dict(os.environ, ZRCG_NUMBA="1")
    subprocess.run([sys.executable, "-c", code], check=True, env=env)


def test_default_selection_uses_numba_for_loop_bound_kernels():
    import zrcg.backend as backend

    if not backend.NUMBA_AVAILABLE or backend.FORCE_NUMBA:
        pytest.skip("requires default (unforced) numba-available selection")
    assert kernels.entropy is kernels.entropy_nb
    assert kernels.rank_against is kernels.rank_nb
    assert kernels.kmeans_assign is kernels.kmeans_assign_nb
    # BLAS-backed batched matmuls win for the recurrence at engine widths.
    assert kernels.gru_forward is kernels.gru_forward_np
