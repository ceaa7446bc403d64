"""Exception hierarchy shared by all spocr modules.

Each class carries the process exit code the CLI maps it to:
0 success, 2 config, 3 training abort, 4 data/geometry, 5 protocol.
"""


class SpocrError(Exception):
    exit_code = 1


class GeometryError(SpocrError):
    """Scene / pattern / measurement dimensions disagree."""

    exit_code = 4


class InputError(SpocrError):
    """Non-finite values or malformed payloads in an input."""

    exit_code = 4


class ModeError(SpocrError):
    """Pattern entries violate the declared modulation mode."""

    exit_code = 4


class DegenerateSignalError(SpocrError):
    """Zero-power signal cannot be given a finite SNR."""

    exit_code = 4


class ConfigError(SpocrError):
    """Invalid model or run configuration."""

    exit_code = 2


class NumericError(SpocrError):
    """Non-finite activations appeared during a forward pass."""

    exit_code = 3


class FeasibilityError(SpocrError):
    """Label cannot be aligned to the available timesteps."""

    exit_code = 4


class OracleScopeError(SpocrError):
    """Brute-force enumeration would exceed its size bound."""

    exit_code = 4


class ProtocolError(SpocrError):
    """Training-stage transition out of order."""

    exit_code = 5


class RenderingError(SpocrError):
    """A glyph is missing from the renderer's font map."""

    exit_code = 4


class TrainingAbort(SpocrError):
    """Training diverged; carries the last finite checkpoint."""

    exit_code = 3

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
