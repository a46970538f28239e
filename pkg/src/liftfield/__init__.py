"""liftfield: lifting noisy per-view 2D instance labels into a 3D field.

Submodules are imported lazily so the command line can configure threading
before numpy loads.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "autodiff",
    "fields",
    "rendering",
    "losses",
    "training",
    "clustering",
    "metrics",
    "tracking",
    "scenegen",
    "fileio",
    "cli",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
