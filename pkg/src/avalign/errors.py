"""Exception taxonomy shared across the package.

The CLI maps these onto its exit codes: InputError -> 2, ConfigError -> 3,
ModeError -> 4, VerificationError -> 5.
"""


class AvalignError(Exception):
    """Base class for all package errors."""


class ShapeError(AvalignError, ValueError):
    """Tensor/array shapes incompatible with the requested operation."""


class InputError(AvalignError, ValueError):
    """Bad external input: malformed file, too-short waveform, silent signal."""


class ContractError(AvalignError, RuntimeError):
    """A documented precondition was violated by the caller."""


class ConfigError(AvalignError, ValueError):
    """Inconsistent configuration, e.g. AU head invoked while disabled."""


class ModeError(AvalignError, ValueError):
    """Operation requires a different model mode (audio vs audio-visual)."""


class VerificationError(AvalignError, RuntimeError):
    """A self-check (gradient check, invariant scan) failed."""


class NanError(AvalignError, RuntimeError):
    """Non-finite value produced during training."""
