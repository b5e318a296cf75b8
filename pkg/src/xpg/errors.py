"""Exception types shared across the package."""


class XpgError(Exception):
    """Base class for all package errors."""


class OutOfRangeError(XpgError):
    """A tensor id lies outside the model geometry."""


class ContainerFormatError(XpgError):
    """A weight or compressed container is malformed."""


class DoubleMapError(XpgError):
    """A page that already has a block was mapped again."""


class PoolExhaustedError(XpgError):
    """No free block of the required kind; signals a protocol bug."""


class NotMappedError(XpgError):
    """Unmap of a page that has no block."""


class PageFaultError(XpgError):
    """A read went through a page that is not resident."""


class OddLengthError(XpgError):
    """bf16 payloads must contain an even number of bytes."""


class EmptyHistogramError(XpgError):
    """A Huffman table cannot be built from zero samples."""


class SymbolNotInTableError(XpgError):
    """An exponent byte has no codeword in the table (table/model mismatch)."""


class TruncatedStreamError(XpgError):
    """A compressed bitstream ended before all values were decoded."""

    def __init__(self, message, byte_offset=None, tensor_id=None):
        super().__init__(message)
        self.byte_offset = byte_offset
        self.tensor_id = tensor_id


class InvalidCodeError(XpgError):
    """A bit pattern does not correspond to any codeword."""


class CapacityExceededError(XpgError):
    """A placement assigns more bytes to a backend than it can hold."""


class BackendMissError(XpgError):
    """A tensor id is absent from the placement plan."""


class InfeasibleConfigError(XpgError):
    """The device budget cannot hold even the mandatory two-layer window."""


class ConfigError(XpgError):
    """A run configuration failed validation."""


class DeadlockError(XpgError):
    """An event wait exceeded its deadline; the pipeline protocol is stuck."""
