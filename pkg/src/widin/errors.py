"""Exception types shared across the package."""


class WidinError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(WidinError, ValueError):
    pass


class DegenerateInput(WidinError, ValueError):
    """Raised when an operation would divide by a (near) zero norm."""


class NumericalError(WidinError, FloatingPointError):
    """Non-finite values appeared where finite ones are required."""


class UnknownToken(WidinError, KeyError):
    def __init__(self, word: str):
        super().__init__(word)
        self.word = word

    def __str__(self) -> str:
        return f"unknown token {self.word!r}"


class ConfigError(WidinError, ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class MissingArtifact(WidinError, FileNotFoundError):
    pass


class StageError(WidinError, RuntimeError):
    """A training stage was invoked before its prerequisites ran."""


class ArtifactError(WidinError):
    code = 10


class BadMagic(ArtifactError):
    code = 11


class VersionMismatch(ArtifactError):
    code = 12


class ChecksumError(ArtifactError):
    code = 13


class KindMismatch(ArtifactError):
    code = 14


class EncoderMismatch(ArtifactError):
    """A checkpoint was trained against a different frozen encoder."""

    code = 15
