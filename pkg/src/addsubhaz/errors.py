"""Exception hierarchy.

Two branches matter for the CLI exit-code contract: `InputError` (bad data
or configuration, exit 2) and `NumericError` (estimation became impossible
on valid input, exit 3).
"""


class AddSubHazError(Exception):
    """Base class for all package errors."""


class InputError(AddSubHazError):
    """Invalid input data, schema, or configuration."""


class NumericError(AddSubHazError):
    """Estimation failed for numerical/statistical reasons."""


# -- dataset / ingestion -----------------------------------------------------

class MissingColumn(InputError):
    pass


class NonPositiveTime(InputError):
    pass


class UnknownCauseCode(InputError):
    pass


class EmptyCluster(InputError):
    pass


class TauBeyondFollowUp(InputError):
    pass


# -- censoring ---------------------------------------------------------------

class GhatZeroBeforeTau(NumericError):
    pass


class DivisionByZeroGhat(NumericError):
    pass


class CensoringTimeUnavailable(InputError):
    pass


# -- fitting / variance ------------------------------------------------------

class SingularDesign(NumericError):
    pass


class NoEventsForCause(InputError):
    pass


class BootstrapFitFailure(NumericError):
    pass


# -- goodness of fit ---------------------------------------------------------

class DegenerateCovariate(InputError):
    pass


# -- simulation --------------------------------------------------------------

class RejectionBudgetExceeded(NumericError):
    pass


class InvalidProbability(NumericError):
    pass


class RootNotBracketed(NumericError):
    pass
