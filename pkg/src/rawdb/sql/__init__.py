from .parser import parse  # noqa: F401
