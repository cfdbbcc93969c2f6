"""Exception hierarchy shared across the package."""


class StreamKVError(Exception):
    """Base class for all package errors."""


class ShapeError(StreamKVError, ValueError):
    pass


class ConfigError(StreamKVError, ValueError):
    pass


class DegenerateInputError(StreamKVError, ValueError):
    pass


class MaskError(StreamKVError, ValueError):
    pass


class VocabError(StreamKVError, ValueError):
    pass


class OrderingError(StreamKVError, ValueError):
    pass


class StorageError(StreamKVError, OSError):
    pass


class FrameNotFoundError(StreamKVError, KeyError):
    def __init__(self, frame_index: int, reason: str = "unknown frame"):
        super().__init__(f"frame {frame_index}: {reason}")
        self.frame_index = frame_index


class CorruptionError(StorageError):
    def __init__(self, frame_index: int, path=None, detail: str = "checksum mismatch"):
        super().__init__(f"frame {frame_index} corrupted ({detail}) at {path}")
        self.frame_index = frame_index
        self.path = path


class CapacityError(StreamKVError, ValueError):
    pass


class UndefinedMetricError(StreamKVError, ValueError):
    pass


class SpecError(StreamKVError, ValueError):
    pass


class BackpressureError(StreamKVError, RuntimeError):
    pass
