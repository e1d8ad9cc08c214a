"""Python bindings for the phub parameter-server core."""

from ._phub import *  # noqa: F401,F403
from ._phub import PhubError, run_experiment  # noqa: F401
