class DivergenceError(RuntimeError):
    """A training loss became non-finite."""

    def __init__(self, message: str, components: dict | None = None):
        super().__init__(message)
        self.components = components or {}


class CheckpointError(RuntimeError):
    """A checkpoint file is corrupt, truncated or from an incompatible format version."""
