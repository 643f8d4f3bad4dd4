"""Exception types shared across the codec."""


class VoxCodecError(Exception):
    """Base class for all voxcodec errors."""


class ContractViolation(VoxCodecError):
    """An operation was invoked with arguments that violate its contract."""


class DecodeError(VoxCodecError):
    """A bitstream or substream could not be decoded."""


class PlyParseError(VoxCodecError):
    """A PLY file is malformed.  Carries the offending line or byte offset."""

    def __init__(self, message, *, line=None, offset=None):
        if line is not None:
            message = f"{message} (line {line})"
        elif offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.line = line
        self.offset = offset
