"""Exception types raised across the package."""


class GraspError(Exception):
    """Base class for all estimation and pipeline failures."""


class OutOfRange(GraspError, ValueError):
    """Grasp angles fall outside the admissible +/- pi/4 range."""


class TooFewPoints(GraspError, ValueError):
    pass


class InsufficientPoints(GraspError):
    """Cloud too small for the fixed-size network input; the sample is skipped."""


class Degenerate(GraspError):
    """Minimal solver input is coplanar or ill-conditioned."""


class NoConsensus(GraspError):
    pass


class EmptyAccumulator(GraspError):
    pass


class DegenerateOutput(GraspError):
    """Predicted radius below the floor, which signals defective sensor data."""


class EmptyDataset(GraspError, ValueError):
    pass


class DatasetFormatError(GraspError, ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class CheckpointError(GraspError, ValueError):
    pass
