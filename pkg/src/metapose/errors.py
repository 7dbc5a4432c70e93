"""Exception types raised across the solver stack."""


class MetaPoseError(Exception):
    """Base class for all library errors."""


class DegenerateRotation(MetaPoseError):
    pass


class NotARotation(MetaPoseError):
    pass


class DegeneratePose(MetaPoseError):
    pass


class AlignmentFailed(MetaPoseError):
    pass


class EmptyHeatmap(MetaPoseError):
    pass


class NoActiveTerms(MetaPoseError):
    pass


class ShapeMismatch(MetaPoseError):
    pass


class TrainingDiverged(MetaPoseError):
    pass


class InvalidConfig(MetaPoseError):
    pass


class SchemaError(MetaPoseError):
    """A scene, solution or model document does not match its schema."""


class IncompatibleModel(MetaPoseError):
    """A trained model cannot be applied to a scene (joint or mixture count differs)."""
