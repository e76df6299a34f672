"""Exception types raised across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration value."""


class NonFiniteError(FloatingPointError):
    """A model evaluation overflowed (diode exponential out of range)."""


class NoConvergence(RuntimeError):
    """Newton / active-set iteration failed to converge.

    ``step`` carries the index of the failing timestep when known.
    """

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class WindowTooSmall(ValueError):
    """LOESS window holds fewer points than the local polynomial needs."""


class InsufficientClassMass(RuntimeError):
    """Dataset balancing targets cannot be met with the available samples."""


class EmptyClass(ValueError):
    """A label is absent from the evaluation set."""


class Diverged(RuntimeError):
    """Training loss became non-finite."""


class LayoutMismatch(ValueError):
    """Model and dataset disagree on the feature layout."""
