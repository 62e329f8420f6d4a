import numpy as np
import pytest

from colorflux import _kernels_py, kernels


def direct_conv(x, w, b):
    """Zero-padded 'same' cross-correlation by explicit loops."""
    B, ci, H, W = x.shape
    co, _, k, _ = w.shape
    r = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)))
    out = np.zeros((B, co, H, W))
    for n in range(B):
        for o in range(co):
            for i in range(H):
                for j in range(W):
                    out[n, o, i, j] = np.sum(xp[n, :, i:i + k, j:j + k] * w[o]) + b[o]
    return out


def backends():
    names = ["numpy"]
    try:
        from colorflux import _kernels  # noqa: F401

        names.append("cython")
    except ImportError:
        pass
    return names


@pytest.fixture(params=backends())
def backend(request):
    prev = kernels.backend()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(prev)


@pytest.mark.parametrize("k", [1, 3])
def test_forward_matches_direct_loops(backend, k):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 5, 6))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    np.testing.assert_allclose(kernels.conv2d_forward(x, w, b), direct_conv(x, w, b), rtol=0, atol=1e-12)


def test_backward_is_the_adjoint(backend):
    # <conv(x), dy> is bilinear, so its partial derivatives follow from finite differences exactly
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    dy = rng.standard_normal((2, 4, 5, 5))
    dx, dw, db = kernels.conv2d_backward(x, w, dy)

    def f(xx, ww, bb):
        return float(np.sum(direct_conv(xx, ww, bb) * dy))

    h = 1e-6
    for arr, grad, idxs in ((x, dx, [(0, 1, 2, 3), (1, 2, 0, 0), (1, 0, 4, 4)]),
                            (w, dw, [(0, 0, 0, 0), (3, 2, 1, 2), (1, 1, 2, 0)]),
                            (b, db, [(0,), (3,)])):
        for idx in idxs:
            orig = arr[idx]
            arr[idx] = orig + h
            up = f(x, w, b)
            arr[idx] = orig - h
            down = f(x, w, b)
            arr[idx] = orig
            assert grad[idx] == pytest.approx((up - down) / (2 * h), rel=1e-7, abs=1e-7)


def test_backends_agree():
    if "cython" not in backends():
        pytest.skip("compiled core not built")
    from colorflux import _kernels

    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 16, 8, 8))
    w = rng.standard_normal((16, 16, 3, 3))
    b = rng.standard_normal(16)
    dy = rng.standard_normal((3, 16, 8, 8))
    np.testing.assert_allclose(_kernels.conv2d_forward(x, w, b), _kernels_py.conv2d_forward(x, w, b), atol=1e-12)
    for a, c in zip(_kernels.conv2d_backward(x, w, dy), _kernels_py.conv2d_backward(x, w, dy)):
        np.testing.assert_allclose(a, c, atol=1e-11)


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        kernels.set_backend("fortran")
