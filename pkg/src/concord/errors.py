"""Exception hierarchy shared by every module in the package."""


class ConcordError(Exception):
    """Base class for all package errors."""


class NoComparablePairs(ConcordError):
    """The concordance index is undefined for the given records."""


class DegenerateTest(ConcordError):
    """A hypothesis test has no information (e.g. zero events)."""


class NoEvents(ConcordError):
    """The Cox partial likelihood is undefined without observed events."""


class NonFinite(ConcordError):
    """An optimizer produced a non-finite objective."""


class SchemaMismatch(ConcordError):
    """Inputs do not match the feature schema a model was fitted on."""


class DimensionMismatch(ConcordError):
    """A patch embedding has the wrong dimension for the aggregator."""


class UntrainedComponent(ConcordError):
    """A fusion stage was requested before its inputs were trained."""


class PlanMismatch(ConcordError):
    """Two cross-validation reports were produced from different fold plans."""


class TooFewEvents(ConcordError):
    """Not enough events to stratify folds by event status."""


class ParseError(ConcordError):
    """A cohort file could not be parsed."""


class AlignmentError(ConcordError):
    """Cohort files disagree on the set of patient ids."""


class VersionMismatch(ConcordError):
    """A checkpoint or report was written with another format version."""


class CorruptCheckpoint(ConcordError):
    """A checkpoint failed to decode or its checksum does not match."""
