"""Exception types shared across the package.

Argument/precondition violations raise plain ``ValueError``; the classes here
cover failures of external components (matchers, denoiser backends, VLM and
scorer endpoints) that callers are expected to catch and recover from.
"""


class SetFuseError(Exception):
    """Base class for package-specific errors."""


class ConfigError(SetFuseError):
    """Run configuration could not be validated; message carries key paths."""


class BackendUnavailable(SetFuseError):
    """A pluggable component (denoiser, matcher, extractor) cannot be used.

    Carries the component name so callers can report exactly what is missing.
    """

    def __init__(self, component: str, reason: str):
        self.component = component
        self.reason = reason
        super().__init__(f"{component}: {reason}")


class VlmError(SetFuseError):
    """A VLM/scorer client failed; never raised with partial text attached."""


class HookContractViolation(SetFuseError):
    """A feature interceptor altered tensor shape, which hooks must not do."""


class StageError(SetFuseError):
    """Wraps a failure inside a pipeline run with stage attribution."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
