# Copyright (c) the django-ddrm authors.
# Licensed under the BSD license.


class DDRMError(Exception):
    """Base class for every error raised by the ddrm package."""


class ContractViolation(DDRMError, ValueError):
    """A caller broke an operation's precondition."""


class ScheduleError(ContractViolation):
    pass


class DatasetError(DDRMError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = 'line %d: %s' % (line, message)
        super().__init__(message)


class ColdUserError(DDRMError, LookupError):
    def __init__(self, user):
        self.user = user
        super().__init__('user %d has no training positives' % user)


class CheckpointError(DDRMError, ValueError):
    pass


class TrainingDiverged(DDRMError, ArithmeticError):
    def __init__(self, message, last_good=None, epoch=None, records=None):
        self.last_good = last_good
        self.epoch = epoch
        self.records = list(records or [])
        super().__init__(message)
