"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class EchoMarkError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class InputError(EchoMarkError, ValueError):
    """Invalid argument values: mismatched rates, zero energy, bad lengths."""

    exit_code = 2


class ConfigurationError(InputError):
    """An STFT or option configuration that violates its invariants."""


class FormatError(EchoMarkError):
    """Unreadable or unsupported file contents (WAV, JSON, CSV)."""

    exit_code = 3


class InsufficientDecayError(InputError):
    """The energy decay curve never reaches the level needed for a T60 fit."""


class EmbedError(InputError):
    """The RIR cannot carry a watermark (e.g. its late field is silent)."""


class AlreadyWatermarkedError(EmbedError):
    """Embedding was requested on an RIR that already carries a payload."""


class NonFiniteLossError(EchoMarkError):
    """The optimizer produced a NaN or infinite loss."""

    exit_code = 4


class ConvergenceError(EchoMarkError):
    """Raised by the CLI when a fit ends without converging."""

    exit_code = 4
