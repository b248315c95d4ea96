"""Exception types shared across the package."""


class ShapeMismatch(ValueError):
    pass


class SizeMismatch(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """Raised as soon as a NaN or Inf shows up in a forward/backward pass or update."""


def check_finite(name, *arrays):
    import numpy as np

    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite values in {name}")
