"""Exception types shared across the toolkit.

Every error raised by canids derives from CanidsError so callers can catch
the whole family at once; the CLI maps parse-side errors to exit code 2 and
model-side errors to exit code 3.
"""


class CanidsError(Exception):
    """Base class for all canids errors."""


# --- log parsing ---------------------------------------------------------

class ParseError(CanidsError):
    """A CAN log line could not be turned into a valid record."""


class MalformedLine(ParseError):
    """Wrong column count, out-of-range field, or unknown class label."""


class BadHex(ParseError):
    """A hex field contains a non-hex digit or a malformed byte token."""


class DlcMismatch(ParseError):
    """Payload byte count disagrees with the DLC field (or DLC out of [0,8])."""


class NonFiniteTimestamp(ParseError):
    """Timestamp is NaN, infinite, or negative."""


# --- synthetic traffic ---------------------------------------------------

class EmptyProfile(CanidsError):
    """A traffic profile with no message IDs."""


class WindowOutOfRange(CanidsError):
    """An attack window lies outside the generated traffic horizon."""


# --- features ------------------------------------------------------------

class NegativeInterval(CanidsError):
    """Timestamps regress within one arbitration ID — corrupt input."""


class WrongWidth(CanidsError):
    """A feature matrix does not have the expected column count."""


class EmptyMatrix(CanidsError):
    """An operation that needs data received zero rows."""


# --- metrics -------------------------------------------------------------

class LengthMismatch(CanidsError):
    """Parallel sequences differ in length."""


class DegenerateLabels(CanidsError):
    """ROC AUC requested with only one class present."""


# --- models --------------------------------------------------------------

class EmptyData(CanidsError):
    """A model was asked to fit on zero rows."""


class NonBinaryLabels(CanidsError):
    """Labels outside {0, 1} passed to a binary classifier."""


class WidthMismatch(CanidsError):
    """Query width differs from the width the model was fitted with."""


class UnfitModel(CanidsError):
    """score/predict called before fit."""


class KTooLarge(CanidsError):
    """k exceeds the number of reference points."""


class TooFewSamples(CanidsError):
    """Fewer rows than the estimator's minimum (e.g. rows <= dimensions)."""


class SingularCovariance(CanidsError):
    """Covariance not invertible even after ridge regularization."""


class BadSubsample(CanidsError):
    """Isolation-forest subsample size invalid for the data."""


class NonFiniteActivation(CanidsError):
    """A network forward pass produced NaN or infinity."""


class DivergedTraining(CanidsError):
    """Training loss became non-finite."""


class EmptyLosses(CanidsError):
    """Threshold requested over an empty loss sequence."""


class DegenerateValidation(CanidsError):
    """Threshold fine-tuning needs both classes in the validation set."""


class MissingLabels(CanidsError):
    """A supervised model was fitted without labels."""


# --- harness -------------------------------------------------------------

class EmptySplit(CanidsError):
    """A requested split would leave a partition empty."""


class EmptyGrid(CanidsError):
    """Grid search over zero parameter combinations."""


class ReportInconsistent(CanidsError):
    """A report row's metrics do not recompute from its stored counts."""


class IoError(CanidsError):
    """Report or model file could not be read or written."""


class ConfigError(CanidsError):
    """An experiment config file is invalid."""
