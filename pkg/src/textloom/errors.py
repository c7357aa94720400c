"""Exception hierarchy shared across the pipeline stages."""


class PipelineError(Exception):
    """Base class for all textloom errors."""


class ConfigError(PipelineError):
    """Invalid or incomplete run configuration."""


class EmptyCorpusError(PipelineError):
    """A corpus operation received or produced zero usable records."""


class TemplateLookupError(PipelineError):
    """No template registered for the requested (kind, task, language)."""


class RenderError(PipelineError):
    """A template placeholder was referenced but not supplied."""

    def __init__(self, placeholder: str, message: str | None = None):
        self.placeholder = placeholder
        super().__init__(message or f"missing placeholder: {placeholder!r}")


class ExtractionError(PipelineError):
    """Base class for structured-output extraction failures."""


class JsonNotFoundError(ExtractionError):
    """No parseable JSON object was found in the model output."""


class SchemaFieldError(ExtractionError):
    """A required key is missing or empty in the parsed object."""

    def __init__(self, key: str, message: str | None = None):
        self.key = key
        super().__init__(message or f"missing or empty required key: {key!r}")


class ScoreRangeError(ExtractionError):
    """An inspection score is not an integer in 1..5 after coercion."""


class VerdictError(ExtractionError):
    """A yes/no verdict could not be read from the judge output."""


class BackendError(PipelineError):
    """Base class for completion-backend failures."""


class TransportError(BackendError):
    """Transport-level failure that survived the retry budget."""


class BackendTimeoutError(TransportError):
    """Request timed out on every attempt."""


class ProtocolError(BackendError):
    """The endpoint answered, but not in the chat-completions wire format."""


class GenerationFailed(PipelineError):
    """A synthesis call exhausted its parse-retry budget.

    Carries every raw model text so the reject log can keep them.
    """

    def __init__(self, reason: str, attempts: list[str]):
        self.reason = reason
        self.attempts = attempts
        super().__init__(f"generation failed after {len(attempts)} attempt(s): {reason}")


class PreconditionError(PipelineError):
    """An operation was called on a record in the wrong state."""


class StageDependencyError(PipelineError):
    """A pipeline stage was invoked before the stage it depends on."""

    def __init__(self, stage: str, missing: str):
        self.stage = stage
        self.missing = missing
        super().__init__(f"stage {stage!r} needs artifact from {missing!r}; run that stage first")
