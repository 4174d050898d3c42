"""Exception hierarchy shared by all modules; the CLI maps it to exit codes."""


class UttsError(Exception):
    """Base class for every error raised by the project."""

    exit_code = 3


class ConfigError(UttsError):
    """Invalid configuration file, flag or value."""

    exit_code = 2


class GateError(UttsError):
    """A sanity gate (e.g. oracle recognizer accuracy) failed; the run is aborted."""

    exit_code = 4


class StageError(UttsError):
    """A pipeline stage failed; wraps the original exception with the stage name."""

    exit_code = 3

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")


class RunLockedError(UttsError):
    """Another process owns the run directory."""


# signal
class SignalError(UttsError):
    pass


class EmptyWaveformError(SignalError):
    pass


class InvalidStftConfigError(SignalError):
    pass


class NonColaError(SignalError):
    pass


class FilterbankError(SignalError):
    pass


class WavFormatError(SignalError):
    pass


# textproc
class TextError(UttsError):
    pass


class InventoryError(TextError):
    pass


class G2PError(TextError):
    pass


class EmptyReferenceError(TextError):
    pass


# toylang
class CorpusError(UttsError):
    pass


# grad
class GradError(UttsError):
    pass


class ShapeError(GradError):
    pass


class NonFiniteError(GradError):
    pass


class MissingGradientError(GradError):
    pass


class CheckpointError(GradError):
    pass


# feats
class FeatureError(UttsError):
    pass


# asru
class GanDivergedError(UttsError):
    pass


# selftrain
class AlignmentError(UttsError):
    pass


class CtcError(UttsError):
    pass


# tts
class TtsError(UttsError):
    pass


# data hygiene
class TranscriptAccessError(UttsError):
    pass


# pipeline
class ArtifactError(UttsError):
    """A run directory lacks the artifacts an operation needs."""
