"""Exception hierarchy shared across the toolkit."""


class EnfaceError(Exception):
    """Base class for all toolkit errors."""


class ParameterError(EnfaceError):
    """Invalid CKKS parameters (bad ring degree, non-NTT-friendly prime...)."""


class CapacityError(EnfaceError):
    """More values than available ciphertext slots."""


class LevelError(EnfaceError):
    """Level mismatch between operands or against key material."""


class DepthExhaustedError(LevelError):
    """An operation required a level that the modulus chain cannot provide."""

    def __init__(self, operation: str, message: str | None = None):
        self.operation = operation
        super().__init__(message or f"depth exhausted in {operation!r}")


class ScaleMismatchError(EnfaceError):
    """Addition operands whose scales differ beyond tolerance."""


class MissingRotationKeyError(EnfaceError):
    """A rotation step has no key and no power-of-two decomposition."""


class LayoutError(EnfaceError):
    """Tensor shape or packing layout mismatch."""


class CompileError(EnfaceError):
    """Model container rejected: malformed, inconsistent, or over budget."""


class FingerprintError(EnfaceError):
    """Encrypted material bound to a different compiled model."""


class ProtocolError(EnfaceError):
    """Client/server wire protocol violation, with a numeric error code."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class DegenerateInputError(EnfaceError):
    """Zero-norm feature fed to exact normalization."""
