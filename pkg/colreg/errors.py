"""
Errors - exception hierarchy shared by every CoLReg module
"""


class ColRegError(Exception):
    """Base class for all errors raised by this package"""


class ConfigError(ColRegError):
    pass


# Data

class DataError(ColRegError):
    pass


class MissingFile(DataError):
    def __init__(self, path):
        super().__init__(f"Missing file: {path}")
        self.path = path


class ManifestMismatch(DataError):
    pass


class PatchTooLarge(DataError):
    pass


class LeakageError(DataError):
    pass


# Geometry

class DegenerateCorners(ColRegError):
    pass


class SingularHomography(ColRegError):
    pass


# Models

class ShapeMismatch(ColRegError):
    pass


class ShapeNotDivisible(ColRegError):
    pass


class ArchitectureMismatch(ColRegError):
    pass


class TimestepOutOfRange(ColRegError):
    pass


class EmptyMask(ColRegError):
    pass


class ProvenanceMismatch(ColRegError):
    pass


# Pipeline

class CheckpointMissing(ColRegError):
    def __init__(self, path):
        super().__init__(f"Checkpoint not found: {path}")
        self.path = path


class ChainIntegrityError(ColRegError):
    pass


class FrozenNetworkMutated(ColRegError):
    pass


class StageFailure(ColRegError):
    def __init__(self, stage: str, it: int, cause: BaseException):
        super().__init__(f"Stage {stage} (it={it}) failed: {cause}")
        self.stage = stage
        self.it = it
        self.cause = cause
