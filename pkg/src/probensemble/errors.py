"""Exception types shared across the package.

Every contract violation raises one of these instead of a bare ValueError so
callers (and the CLI exit-code mapping) can tell configuration mistakes,
protocol violations and numerical blow-ups apart.
"""


class ProbEnsembleError(Exception):
    """Base class for all package-specific errors."""


# --- validation / numeric ---------------------------------------------------

class AllZeroError(ProbEnsembleError):
    """Normalization requested for a vector whose entries are all zero."""


class LengthMismatchError(ProbEnsembleError):
    """Two sequences that must have equal length do not."""


class EmptyMatrixError(ProbEnsembleError):
    """A confusion matrix with zero total count was given to a metric."""


class DivergenceError(ProbEnsembleError):
    """Training produced a non-finite loss."""


class DimensionMismatchError(ProbEnsembleError):
    """Feature dimensions of a model and a sample disagree."""


class ShapeMismatchError(ProbEnsembleError):
    """Models with different parameter shapes cannot be averaged."""


class InvalidSpecError(ProbEnsembleError):
    """A dataset specification violates its invariants."""


# --- wire format / broker ---------------------------------------------------

class WireFormatError(ProbEnsembleError):
    """Base class for serialization failures."""


class BadMagicError(WireFormatError):
    pass


class BadVersionError(WireFormatError):
    pass


class TruncatedError(WireFormatError):
    pass


class SimplexViolationError(WireFormatError):
    """Decoded probabilities are not a simplex at wire tolerance."""


class OversizeError(WireFormatError):
    """Serialized message would exceed the 2^31-byte cap."""


class BrokerUnavailableError(ProbEnsembleError):
    """Publish/subscribe attempted after broker shutdown."""


# --- aggregation / optimizers ----------------------------------------------

class InconsistentCError(ProbEnsembleError):
    """Contributions in one round disagree on the number of classes."""


class DuplicateClientError(ProbEnsembleError):
    """Two contributions in one alignment come from the same client."""


class EmptyAlignmentError(ProbEnsembleError):
    """Fusion requested on an alignment with no samples or no models."""


class SingleClassError(ProbEnsembleError):
    """Stacking requires at least two distinct labels."""


class OrderMismatchError(ProbEnsembleError):
    """Stacking prediction with a different model order than at fit time."""


class BadCutError(ProbEnsembleError):
    """One-point crossover cut index outside [1, M)."""


class EmptyContextError(ProbEnsembleError):
    """Optimizer fitness context holds no samples."""


# --- distillation / coordinator --------------------------------------------

class SampleMismatchError(ProbEnsembleError):
    """Two per-sample probability tables cover different sample ids."""


class InsufficientContributionsError(ProbEnsembleError):
    """The contribution threshold was never met within the wait budget."""


class FutureRoundError(ProbEnsembleError):
    """A contribution arrived tagged with a round later than the current one."""


class NotEligibleError(ProbEnsembleError):
    """Aggregation requested before the contribution threshold was reached."""


class ScenarioMismatchError(ProbEnsembleError):
    """Paradigm comparison across runs with different scenario seeds."""


# --- harness ----------------------------------------------------------------

class ConfigError(ProbEnsembleError):
    """Base class for scenario-file problems (CLI exit code 2)."""


class ParseError(ConfigError):
    """Scenario file is syntactically malformed; message carries line context."""


class ValidationError(ConfigError):
    """Scenario file parsed but violates the schema; lists all violations."""


class MissingArtifactError(ProbEnsembleError):
    """Replay check pointed at a directory without the expected artifacts."""
