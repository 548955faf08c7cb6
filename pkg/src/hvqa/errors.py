"""Base exception for the package; concrete errors live next to their modules."""


class HvqaError(Exception):
    """Root of all package-specific errors."""
