"""Exception hierarchy shared across the codec."""


class CodecError(Exception):
    """Base class for all rescodec errors."""


class ShapeError(CodecError):
    """Tensor-shape mismatch in the compute engine."""


class GradError(CodecError):
    """Invalid backward call (non-scalar loss, missing graph)."""


class OptimizerError(CodecError):
    """Optimizer step rejected (NaN/Inf gradients, state mismatch)."""


class CoderError(CodecError):
    """Arithmetic-coder failure (bad PMF, symbol out of range)."""


class TruncatedStreamError(CoderError):
    """Decoder ran past the end of a bitstream."""


class SupportError(CodecError):
    """Residual value outside the coded alphabet."""


class ImageFormatError(CodecError):
    """Malformed or unsupported PPM/PGM file."""


class ContainerError(CodecError):
    """Malformed container bytes."""


class CheckpointError(CodecError):
    """Malformed, truncated or incompatible checkpoint file."""


class HashMismatchError(CodecError):
    """Container was produced with a different model checkpoint."""


class ChecksumError(CodecError):
    """Decoded image failed the container's content checksum."""


class BackendError(CodecError):
    """Lossy backend failure (external tool error, dim mismatch)."""


class TrainingDivergedError(CodecError):
    """Loss became non-finite; last good checkpoint was retained."""
