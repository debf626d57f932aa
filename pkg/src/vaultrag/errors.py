"""Exception types shared across the service."""


class VaultError(Exception):
    """Base class for every error raised by this package."""


class NotFound(VaultError):
    """Referenced record, file, or object does not exist."""


class Forbidden(VaultError):
    """Caller lacks the grant required for the operation."""


class DuplicateIdentifier(VaultError):
    """Record or collection identifier is already taken."""


class UnknownUser(VaultError):
    """Referenced user id is not registered."""


class InvalidObjectType(VaultError):
    """Object type is not one of record/collection."""


class UnsupportedMediaKind(VaultError):
    """Text extraction attempted on a media kind we cannot handle."""


class MalformedJson(VaultError):
    """Input did not parse as a JSON document."""


class DuplicateId(VaultError):
    """Chunk id already present in the index."""


class DimensionMismatch(VaultError):
    """Vector length does not match the configured index dimension."""


class IoFailure(VaultError):
    """Snapshot file could not be read or written."""


class CorruptSnapshot(VaultError):
    """Snapshot checksum or framing check failed."""


class UpstreamUnavailable(VaultError):
    """Transient model-service failure; safe to retry."""


class UpstreamRejected(VaultError):
    """Model service rejected the request; not retryable."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class ContextOverflow(VaultError):
    """Chat request exceeded the model context window."""


class EmptyQuery(VaultError):
    """Search query was empty."""


class EmbedderUnavailable(VaultError):
    """Embedding service unreachable; search cannot degrade past this."""


class LlmUnavailable(VaultError):
    """Chat model unreachable."""


class ExtractionFailed(VaultError):
    """Content extraction raised while processing a sync event."""


class UnknownTool(VaultError):
    """Tool name is not one of the registered tools."""


class BadArguments(VaultError):
    """Tool arguments do not match the tool's schema."""


class AnswerFormatExhausted(VaultError):
    """Assistant kept producing malformed answers past the retry limit.

    Carries ``answer``: a fallback payload with empty sources that the API
    layer can still render to the user.
    """

    def __init__(self, message: str, answer=None):
        super().__init__(message)
        self.answer = answer
