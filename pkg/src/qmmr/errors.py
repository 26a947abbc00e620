class ValidationError(ValueError):
    """Raised when inputs violate a structural contract (shapes, probabilities, ranges)."""
