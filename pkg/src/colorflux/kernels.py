"""Backend selection for the convolution hot loop.

The compiled core is used when importable. Set ``COLORFLUX_BACKEND`` to
``numpy`` or ``cython`` to force one; forcing ``cython`` without a built
extension raises ImportError.
"""
import os

from . import _kernels_py


def _load(name):
    if name == "numpy":
        return _kernels_py
    if name == "cython":
        from . import _kernels

        return _kernels
    if name == "auto":
        try:
            from . import _kernels

            return _kernels
        except ImportError:
            return _kernels_py
    raise ValueError(f"unknown COLORFLUX_BACKEND {name!r}")


_impl = _load(os.environ.get("COLORFLUX_BACKEND", "auto"))


def set_backend(name: str) -> str:
    """Switch backend at runtime; returns the active backend name."""
    global _impl
    _impl = _load(name)
    return _impl.BACKEND


def backend() -> str:
    return _impl.BACKEND


def conv2d_forward(x, w, b):
    return _impl.conv2d_forward(x, w, b)


def conv2d_backward(x, w, dy):
    return _impl.conv2d_backward(x, w, dy)
