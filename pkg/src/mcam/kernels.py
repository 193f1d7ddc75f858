"""Hot-kernel backend selection.

The compiled extension is used when it imports cleanly; otherwise, or when
``MCAM_PURE_PYTHON`` is set to a non-empty value, the NumPy implementation
takes over. Both expose the same functions.
"""

import importlib
import logging
import os

log = logging.getLogger(__name__)

_NAMES = {"compiled": "mcam._ckernels", "python": "mcam._pykernels"}


def load_backend(name):
    """Import a backend module by name ("compiled" or "python")."""
    return importlib.import_module(_NAMES[name])


def _select():
    if not os.environ.get("MCAM_PURE_PYTHON"):
        try:
            return "compiled", load_backend("compiled")
        except ImportError:
            log.debug("compiled kernels unavailable; using NumPy fallback")
    return "python", load_backend("python")


BACKEND, _impl = _select()

conv2d_forward = _impl.conv2d_forward
conv2d_grad_input = _impl.conv2d_grad_input
conv2d_grad_weight = _impl.conv2d_grad_weight
batchnorm_forward = _impl.batchnorm_forward
batchnorm_backward = _impl.batchnorm_backward
