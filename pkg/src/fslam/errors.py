"""Exception hierarchy shared by all fslam modules."""


class FslamError(Exception):
    """Base class for every error raised by fslam."""


# geometry
class GeometryError(FslamError, ValueError):
    pass


class DegenerateBaseline(GeometryError):
    pass


class LowParallax(GeometryError):
    pass


class InsufficientMatches(GeometryError):
    pass


class NoConsensus(GeometryError):
    pass


class DegenerateConfiguration(GeometryError):
    pass


class TooFewAssociations(GeometryError):
    pass


class CollinearDegenerate(GeometryError):
    pass


# features
class ConfigTooDeep(FslamError, ValueError):
    pass


class VariantMismatch(FslamError, ValueError):
    pass


class FeatureFileError(FslamError):
    pass


class MissingFrame(FeatureFileError, KeyError):
    pass


class MalformedRecord(FeatureFileError, ValueError):
    pass


class MixedDescriptorLength(FeatureFileError, ValueError):
    pass


# tracking
class InitializationFailed(FslamError):
    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)


class LostTracking(FslamError):
    def __init__(self, inliers: int, minimum: int):
        self.inliers = inliers
        super().__init__(f"tracking lost ({inliers} inliers < {minimum})")


# place recognition
class CorpusTooSmall(FslamError, ValueError):
    pass


class InsufficientInliers(FslamError):
    pass


class VocabularyFileError(FslamError, ValueError):
    pass


# evaluation / io
class TrajectoryTooShort(FslamError, ValueError):
    pass


class TrajectoryParseError(FslamError, ValueError):
    def __init__(self, path, line_no: int, message: str):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class DatasetError(FslamError):
    pass


class MissingFiles(DatasetError, FileNotFoundError):
    pass


class MalformedCalibration(DatasetError, ValueError):
    pass


class CountMismatch(DatasetError, ValueError):
    pass


class UnreadableInput(FslamError, OSError):
    pass


class UnwritableOutput(FslamError, OSError):
    pass


class ConfigError(FslamError, ValueError):
    pass
