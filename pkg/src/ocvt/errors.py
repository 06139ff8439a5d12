"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A config value violates a structural requirement (names the offending field)."""


class SplitError(ValueError):
    """A split specification is inconsistent (overlapping noun/verb sets, bad counts)."""


class ShapeError(ValueError):
    """Tensor shapes do not conform to the module contract."""


class BoxValidationError(ValueError):
    """Box coordinates outside [0, 1] or otherwise malformed."""


class ProbeSpecError(ValueError):
    """Probe feature source incompatible with the requested task."""


class TrainingAbortError(RuntimeError):
    """Raised when a loss term becomes non-finite; names the term."""

    def __init__(self, term: str, value: float):
        self.term = term
        self.value = value
        super().__init__(f"non-finite loss term '{term}' (value={value}); aborting training")
