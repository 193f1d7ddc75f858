"""Monotonicity-constrained attention (MCAM) for compact EEG classifiers.

A small reverse-mode autodiff engine (``mcam.tensor``) with compiled
convolution / batch-norm kernels (``mcam.kernels``), an EEGNet backbone with
SE, CBAM, QKV and MCAM attention (``mcam.models``), data handling, training,
statistics and sensitivity analyses, all behind the ``mcam`` command.
"""

__version__ = "0.1.0"

from mcam.errors import MCAMError  # noqa: E402,F401
from mcam.kernels import BACKEND  # noqa: E402,F401
