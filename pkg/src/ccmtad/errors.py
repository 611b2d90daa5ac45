"""Exception hierarchy shared by every ccmtad module."""


class CCMTADError(Exception):
    """Base class for all library errors."""


class InsufficientDataError(CCMTADError, ValueError):
    pass


class ContractViolation(CCMTADError, ValueError):
    """An input broke a documented precondition (shape, symmetry, ...)."""


class DegenerateFitError(CCMTADError, ValueError):
    pass


class ParseError(CCMTADError, ValueError):
    def __init__(self, message, row=None, col=None):
        super().__init__(message)
        self.row = row
        self.col = col


class FormatError(CCMTADError, ValueError):
    pass


class UnfillableError(CCMTADError, ValueError):
    def __init__(self, channel):
        super().__init__(f"channel {channel!r} starts with NaN; cannot forward-fill")
        self.channel = channel


class SpecError(CCMTADError, ValueError):
    pass


class InfeasibleAllocation(CCMTADError, ValueError):
    pass


class TrainingDiverged(CCMTADError, RuntimeError):
    def __init__(self, epoch, batch):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class CalibrationError(CCMTADError, ValueError):
    pass


class DegenerateConfig(CCMTADError, ValueError):
    pass


class HeuristicUnavailable(CCMTADError):
    """The alpha_max heuristic could not be computed; search the full range."""


class UndefinedMetric(CCMTADError, ValueError):
    pass


class ChannelMismatch(CCMTADError):
    pass
