"""Prototype-guided latent steering for a small decoder-only model."""

from ._core import (
    Session,
    __version__,
    apply_override,
    default_config,
    run_all,
    run_stage,
    run_sweep,
)

__all__ = [
    "Session",
    "__version__",
    "apply_override",
    "default_config",
    "run_all",
    "run_stage",
    "run_sweep",
]
