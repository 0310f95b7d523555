"""Exception hierarchy shared across the engine."""


class CertSegError(Exception):
    """Base class for every error raised by this package."""


class DomainError(CertSegError, ValueError):
    """A parameter lies outside its mathematical domain."""


class OutOfRangeError(CertSegError, ValueError):
    """Array values violate the declared value range."""


class ShapeMismatchError(CertSegError, ValueError):
    """Array shapes are inconsistent with the declared geometry."""


class SigmaOutOfRange(DomainError):
    """Requested noise level exceeds the schedule's terminal noise level."""


class NonAscendingThresholds(DomainError):
    """Segmentation thresholds must be strictly ascending."""


class ModelOutputError(CertSegError):
    """A model handle returned labels or tensors violating its contract."""


class EmptyDatasetError(CertSegError):
    """Aggregation requested over zero images."""


class NsegFormatError(CertSegError, ValueError):
    """Malformed NSEG header or payload."""


class BridgeError(CertSegError):
    """Base class for external-process bridge failures."""


class BridgeTimeout(BridgeError):
    pass


class BridgeProcessExit(BridgeError):
    pass


class BridgeBadShape(BridgeError):
    pass


class ProtocolViolation(BridgeError):
    pass
