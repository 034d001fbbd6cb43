"""Exporter-specific error types.

Shared failure categories (config, input, integrity) reuse the engine
taxonomy so CLI exit codes stay consistent across both tools.
"""

from patchtag import PatchTagError


class UnsupportedCheckpointError(PatchTagError):
    """Source checkpoint does not match a recognized layout."""
