"""Shared exception types."""


class NonFiniteError(RuntimeError):
    """A forward pass, loss, or sampler produced NaN or infinite values."""
