"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input violates a documented precondition."""


class BehindCameraError(ValidationError):
    """Point has non-positive depth in the camera frame."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values.

    ``stage`` names the pipeline stage where the problem was detected.
    """

    def __init__(self, message, stage=None):
        super().__init__(message if stage is None else f"[{stage}] {message}")
        self.stage = stage
