"""Single-server loss systems in a finite random environment."""

from envq.env_core import EnvironmentSpec, ModelSpec, QueueSpec, ValidationReport, i_w, validate

__all__ = [
    "EnvironmentSpec",
    "ModelSpec",
    "QueueSpec",
    "ValidationReport",
    "i_w",
    "validate",
]
