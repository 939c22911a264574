"""
Exception hierarchy shared by every subsystem.

Each error carries the process exit code the CLI returns for it, the same way
an HTTP error carries its status code.
"""


class GscError(Exception):
    """Base error with a human-readable detail and a CLI exit code"""

    exit_code = 1

    def __init__(self, detail: str, exit_code: int | None = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class InvalidArgumentError(GscError, ValueError):
    exit_code = 2


class ConfigError(InvalidArgumentError):
    pass


class PhaseOrderError(InvalidArgumentError):
    pass


class UnknownTokenError(InvalidArgumentError):
    pass


class MissingArtifactError(GscError):
    exit_code = 3


class CorruptStreamError(GscError, ValueError):
    exit_code = 4


class BadMagicError(CorruptStreamError):
    pass


class UnsupportedVersionError(CorruptStreamError):
    pass


class DigestMismatchError(CorruptStreamError):
    pass


class TruncatedStreamError(CorruptStreamError):
    pass


class TrainingDivergedError(GscError):
    exit_code = 5


class GenerationError(GscError):
    """Scene placement could not satisfy its constraints"""


class EvaluationError(GscError):
    """A per-C pipeline evaluation failed; carries the offending channel count"""

    def __init__(self, detail: str, channel_count: int):
        super().__init__(detail)
        self.channel_count = channel_count
