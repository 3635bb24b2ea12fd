"""Exception hierarchy shared by every module."""


class CollectiveKVError(Exception):
    """Base class for all package errors."""


class ShapeError(CollectiveKVError, ValueError):
    pass


class UsageError(CollectiveKVError, ValueError):
    pass


class UndefinedMetricError(CollectiveKVError, ValueError):
    pass


class NumericError(CollectiveKVError, ArithmeticError):
    pass


class CacheMissError(CollectiveKVError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "cache miss"


class StorageError(CollectiveKVError, OSError):
    pass
