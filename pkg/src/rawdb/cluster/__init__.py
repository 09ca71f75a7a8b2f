from .coordinator import Coordinator  # noqa: F401
from .worker import Worker  # noqa: F401
