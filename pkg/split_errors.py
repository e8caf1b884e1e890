#!/usr/bin/env python3
"""
Error hierarchy shared by every slimsplit module.
The CLI maps these families onto exit codes.
"""


class SplitError(Exception):
    """Base class for all slimsplit errors"""


class ConfigError(SplitError):
    """Invalid or unknown configuration value"""


class GraphError(SplitError):
    """Gradient requested for a tensor the recorded graph never saw"""


class ModelError(SplitError):
    """Model construction or execution failure"""


class ShapeError(ModelError):
    """Tensor shapes do not line up"""

    def __init__(self, message, expected=None, actual=None):
        if expected is not None or actual is not None:
            message = f"{message} (expected {expected}, got {actual})"
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class ModelSpecError(ModelError):
    """Malformed BlockSpec list"""


class CheckpointError(ModelError):
    """Unreadable or mismatched checkpoint file"""


class NonFiniteLossError(ModelError):
    """Training produced a NaN/inf loss"""

    def __init__(self, size, value):
        super().__init__(f"non-finite distillation loss {value} at ensemble size s={size}")
        self.size = size
        self.value = value


class CodecError(SplitError):
    """Invalid quantization parameters or symbol payload"""


class ProtocolError(SplitError):
    """Wire protocol failure"""


class BadMagicError(ProtocolError):
    pass


class UnsupportedVersionError(ProtocolError):
    pass


class TruncatedFrameError(ProtocolError):
    """Not enough bytes yet; `needed` tells the caller how many more to read"""

    def __init__(self, needed, have):
        super().__init__(f"truncated frame: have {have} bytes, need {needed} more")
        self.needed = needed
        self.have = have


class FrameInvariantError(ProtocolError):
    pass


class SessionClosedError(ProtocolError):
    """Transport went away, possibly mid-frame"""

    def __init__(self, message, last_seq=None):
        super().__init__(f"{message} (last complete seq: {last_seq})")
        self.last_seq = last_seq


class ControllerError(SplitError):
    """Performance table lookups that cannot be answered"""
