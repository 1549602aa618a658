"""Exception hierarchy shared by every igolab module."""


class IgoError(Exception):
    """Base class; ``module`` names the originating subsystem."""

    module = "igolab"


class DivergedTrajectory(IgoError, FloatingPointError):
    module = "sde"

    def __init__(self, t, component, message=None):
        self.t = t
        self.component = component
        super().__init__(message or f"non-finite value at t={t!r}, component {component}")


class InvalidCapture(IgoError, ValueError):
    module = "sde"


class ShapeMismatch(IgoError, ValueError):
    module = "nn"

    def __init__(self, expected, got, what="input"):
        self.expected = expected
        self.got = got
        super().__init__(f"{what} shape mismatch: expected {expected}, got {got}")


class StaleTape(IgoError, RuntimeError):
    module = "nn"


class OddDim(IgoError, ValueError):
    module = "nn"


class NonFiniteTensor(IgoError, FloatingPointError):
    module = "nn"


class ZeroVariance(IgoError, ValueError):
    module = "score"


class DegenerateDiffusion(IgoError, ValueError):
    module = "score"


class EmptyIterateList(IgoError, ValueError):
    module = "score"


class DivergedTraining(IgoError, FloatingPointError):
    module = "score"

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"loss became non-finite at step {step}")


class DivergedSample(IgoError, FloatingPointError):
    module = "sampling"


class StepSizeUnderflow(IgoError, RuntimeError):
    module = "sampling"


class ZeroVector(IgoError, ValueError):
    module = "downstream"


class ConfigError(IgoError, ValueError):
    module = "cli"


class VersionMismatch(IgoError, RuntimeError):
    module = "cli"
