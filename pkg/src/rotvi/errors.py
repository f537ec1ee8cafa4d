"""Exception hierarchy.

Input problems (bad shapes, invalid parameters, unknown presets) derive from
``InputError``; failures of the numerics themselves derive from
``NumericalError``. The CLI maps the two families to exit codes 1 and 2.
"""


class InputError(ValueError):
    """Invalid user-supplied data or parameters."""


class ConfigurationError(InputError):
    """A configuration that cannot be used, e.g. a collinear dictionary."""


class TheoremInapplicable(InputError):
    """The hypotheses of a closed-form bound are not satisfied."""


class NumericalError(RuntimeError):
    """A numerical routine failed (divergence, singularity, iteration cap)."""


class SingularMapError(NumericalError):
    """A transport map has a non-positive derivative somewhere."""


class InvariantViolation(NumericalError):
    """A structural invariant (e.g. orthogonality) no longer holds."""
