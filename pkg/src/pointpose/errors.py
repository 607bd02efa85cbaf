"""Exception types shared across the package."""


class PointPoseError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(PointPoseError):
    """Array shapes are inconsistent with the declared contract."""


class DegenerateRotationError(PointPoseError):
    """A 6D rotation cannot be decoded (zero or parallel input vectors)."""


class InvalidRotationError(PointPoseError):
    """A matrix is not a proper rotation (orthonormal, det +1)."""


class InvalidSkeletonError(PointPoseError):
    """Skeleton edges do not form a connected acyclic tree over the joints."""


class DatasetFormatError(PointPoseError):
    """On-disk dataset is corrupt or disagrees with its manifest."""


class EmptySegmentationError(PointPoseError):
    """Depth segmentation produced no foreground pixels."""


class EmptyResultError(PointPoseError):
    """A point-cloud filter removed every cluster."""


class EmptyInputError(PointPoseError):
    """An operation requiring nonempty point sets received an empty one."""


class NumericalError(PointPoseError):
    """A non-finite value appeared in training or sampling."""


class ConfigError(PointPoseError):
    """Experiment configuration is missing, malformed, or inconsistent."""
