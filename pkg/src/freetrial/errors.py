"""Exception types shared across the package."""


class FreeTrialError(RuntimeError):
    """Base class for runtime failures inside the pipeline."""


class DataError(ValueError):
    """Input data could not be parsed, filtered or validated."""


class DivergenceError(FreeTrialError):
    """A trained parameter became non-finite or exploded."""


class ActionSpaceExhausted(FreeTrialError):
    """No available leaf remains in the user tree."""


class FilterRetriesExhausted(FreeTrialError):
    """The user filter rejected every candidate within the retry budget."""
