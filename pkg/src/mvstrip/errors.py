"""Exception and warning types shared across the package."""


class VolumeIOError(OSError):
    """A NIfTI file could not be read or written."""


class DegenerateInputError(ValueError):
    """Input carries too little information for the requested operation."""


class ConfigurationError(ValueError):
    """A network or run configuration violates its invariants."""


class CheckpointError(RuntimeError):
    """A checkpoint is corrupt, incompatible, or used for the wrong view."""


class TrainingError(RuntimeError):
    """Training diverged or could not start."""


class EmptyMaskWarning(UserWarning):
    """A predicted or post-processed mask has no foreground voxels."""
