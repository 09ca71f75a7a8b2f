"""rawdb: interactive-speed SQL over raw CSV with piggybacked metadata."""

__version__ = "0.1.0"
