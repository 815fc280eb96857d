"""Backend selection for the element kernels.

The compiled extension is used when it imports; set ``GLCOUPLING_PURE=1`` to
force the numpy path.
"""

import os

from glcoupling import _kernels_py

if os.environ.get("GLCOUPLING_PURE"):
    _impl = _kernels_py
else:
    try:
        from glcoupling import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = "compiled" if _impl is not _kernels_py else "python"
POISSON = _kernels_py.POISSON
ELASTICITY = _kernels_py.ELASTICITY

element_matrices = _impl.element_matrices
reference_rule = _kernels_py.reference_rule
