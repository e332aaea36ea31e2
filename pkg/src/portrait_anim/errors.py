class PortraitAnimError(Exception):
    pass


class InvalidRigError(PortraitAnimError, ValueError):
    pass


class InvalidParamsError(PortraitAnimError, ValueError):
    pass


class ShapeMismatchError(PortraitAnimError, ValueError):
    pass


class CheckpointError(PortraitAnimError):
    pass


class NonFiniteError(PortraitAnimError, FloatingPointError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class SplitContaminationError(PortraitAnimError, ValueError):
    pass
