"""Exception types shared across the toolkit."""


class BeardiagError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(BeardiagError):
    """Invalid configuration, hyperparameters, or command arguments."""


class ShapeError(BeardiagError):
    """Array or tensor shapes are inconsistent with an operation's contract."""


class SegmentBoundsError(BeardiagError):
    """Requested segment index lies outside the recording."""


class EmptySignalError(BeardiagError):
    """Recording is too short to yield even one segment."""


class DegenerateSegmentError(BeardiagError):
    """All-zero segment; normalization is undefined and the sensor is suspect."""


class FrequencyRangeError(BeardiagError):
    """Frequency outside the representable range of the aligned spectrum."""


class FormatError(BeardiagError):
    """Binary file violates its declared layout (bad magic, truncation, ...)."""


class PersistenceError(BeardiagError):
    """Reference store or registry on disk is missing, corrupt, or inconsistent."""


class RejectedReferenceError(BeardiagError):
    """Reference candidate is not fault-free or not from the training split."""


class MissingReferenceError(BeardiagError):
    """No fault-free reference is stored for the requested working condition."""


class LabelError(BeardiagError):
    """Fault label outside the supported class range."""


class DataError(BeardiagError):
    """Dataset is empty or otherwise unusable for training."""
