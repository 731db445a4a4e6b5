"""Exception types shared across the package."""


class LiftFeasError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(LiftFeasError, ValueError):
    pass


class ConfigError(LiftFeasError, ValueError):
    """A configuration file is malformed or violates a model invariant."""


class SchemaMismatch(ConfigError):
    def __init__(self, found, expected, what="file"):
        self.found = found
        self.expected = expected
        super().__init__(f"{what} schema_version {found!r} does not match expected {expected!r}")


class CorruptFile(LiftFeasError, ValueError):
    pass


class Unreachable(LiftFeasError):
    """Grip point lies outside the kinematic reach of the arm chain."""


class InfeasiblePose(LiftFeasError):
    """The pose optimizer could not satisfy every constraint."""


class OutOfRange(LiftFeasError, ValueError):
    pass


class IndexOutOfBounds(LiftFeasError, IndexError):
    pass


class NotGripping(LiftFeasError):
    pass


class NotLifted(LiftFeasError):
    pass


class ZeroMass(LiftFeasError):
    pass


class GripOffBox(LiftFeasError):
    pass


class CopOutsidePlate(LiftFeasError, ValueError):
    pass
