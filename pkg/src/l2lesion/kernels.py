"""Backend selection for the pooling kernels.

The compiled extension is used when importable; set
``L2LESION_PURE_PYTHON=1`` to force the numpy fallback.
"""
import os

from . import _pykernels as python_backend

compiled_backend = None
if os.environ.get("L2LESION_PURE_PYTHON", "") in ("", "0"):
    try:
        from . import _ckernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

backend = compiled_backend or python_backend
BACKEND = "compiled" if compiled_backend is not None else "python"


def use_backend(name: str) -> None:
    """Switch the process-wide backend: ``"compiled"`` or ``"python"``."""
    global backend, BACKEND
    if name == "compiled":
        if compiled_backend is None:
            raise RuntimeError("compiled kernels are not built")
        backend = compiled_backend
    elif name == "python":
        backend = python_backend
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = name


def available_backends() -> list:
    return ["compiled", "python"] if compiled_backend is not None else ["python"]
