"""Lifting-feasibility reasoning for a small humanoid: a precomputed table of
validated lifting trajectories plus trial-lift identification of unknown boxes."""
from importlib import metadata

try:
    __version__ = metadata.version("artifact")
except metadata.PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0"
