"""Exception hierarchy shared by every module of the package."""


class SSPIWOError(Exception):
    """Base class for all errors raised by this package."""


class DistributionError(SSPIWOError, ValueError):
    """Invalid distribution parameters or out-of-support values."""


class FixtureError(SSPIWOError, ValueError):
    """A tabular model file or table violates its schema or an invariant.

    ``invariant`` names the violated rule (e.g. ``"row-sum"``).
    """

    def __init__(self, message, invariant=None):
        super().__init__(message)
        self.invariant = invariant


class ZeroEvidenceError(SSPIWOError, ValueError):
    """The observation has zero marginal probability under the model."""


class EnumerationBudgetError(SSPIWOError, RuntimeError):
    """Exact tuple enumeration would exceed the configured budget."""


class NonFiniteWeightError(SSPIWOError, FloatingPointError):
    """An importance log-weight came out NaN or +inf.

    ``sample`` carries the offending latent draw for debugging.
    """

    def __init__(self, message, sample=None):
        super().__init__(message)
        self.sample = sample


class ObjectiveError(SSPIWOError, ValueError):
    """Unknown flavor, invalid spec, or a precondition of an objective failed."""


class EstimatorMismatchError(ObjectiveError):
    """A gradient estimator was requested for an objective it cannot serve."""


class GradientCheckError(SSPIWOError, AssertionError):
    """Finite differences disagree with the analytic gradient, or the
    objective closure is not deterministic."""


class DataError(SSPIWOError, ValueError):
    """Malformed corpus input, empty corpus, or an impossible subset request."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class TrainingDivergedError(SSPIWOError, RuntimeError):
    """The training loss became NaN; ``snapshot`` holds the diagnostics."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class ManifestError(SSPIWOError, ValueError):
    """Experiment manifest or CLI configuration is invalid."""
