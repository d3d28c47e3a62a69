"""Config-driven pipeline for end-to-end distributed system performance tests."""

from .config import ConfigRoot, load_workspace, write_out

__version__ = "0.1.0"

__all__ = ["ConfigRoot", "load_workspace", "write_out", "__version__"]
