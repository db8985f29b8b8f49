class SiraError(Exception):
    """Base class for every error raised by the toolkit."""


class GraphError(SiraError):
    """Malformed graph document or structural violation."""


class LoweringError(GraphError):
    """A compound operator could not be lowered."""


class IntervalError(SiraError):
    """Invalid interval arithmetic request."""


class AnalysisError(SiraError):
    """Scaled-integer range analysis failed."""


class StreamlineError(SiraError):
    """Scale and bias aggregation could not be applied."""


class ThresholdError(SiraError):
    """A layer tail cannot be turned into a threshold table."""


class AccumulatorError(SiraError):
    """Accumulator width cannot be bounded."""


class CostModelError(SiraError):
    """Invalid cost model configuration or fit request."""


class ExecutionError(SiraError):
    """Concrete execution of a graph failed."""


class VerificationError(SiraError):
    """An observed value escaped its analyzed range."""
