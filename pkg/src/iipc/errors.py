"""Exception taxonomy shared across the engine."""


class IipcError(Exception):
    """Base class for all engine-raised errors."""


class TraceParseError(IipcError):
    """A trace-corpus line could not be parsed; message names the field."""


class BackendError(IipcError):
    """A model backend failed (transport, HTTP status, exhausted script)."""


class CassetteMissError(BackendError):
    """Replay was asked for a request that was never recorded."""


class TemplateError(IipcError):
    """Prompt rendering failed: missing or unexpected placeholder."""


class ResponseFormatError(IipcError):
    """A model response did not match the expected surface form."""


class EngineError(IipcError):
    """Engine-side failure distinct from a candidate program's own error."""


class InvariantViolation(IipcError):
    """A state-machine contract was broken by the caller."""
