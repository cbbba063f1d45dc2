"""Exception types raised across the toolkit."""


class DpncError(Exception):
    pass


class BudgetExceeded(DpncError):
    """A strict ledger refused a charge that would overrun its target."""


class DataExhausted(DpncError):
    """A without-replacement cursor ran out of fresh samples."""


class SampleBudgetInfeasible(DpncError):
    """Population batch sizes cannot fit in half of the dataset."""


class ParamsInfeasible(DpncError):
    pass


class RejectionStall(DpncError):
    """The inner rejection sampler stopped accepting proposals."""


class ConstantOverflow(DpncError, OverflowError):
    pass
