"""Exception hierarchy and CLI exit codes."""


class MtrsegError(Exception):
    exit_code = 1


class ConfigError(MtrsegError, ValueError):
    exit_code = 2


class ScheduleError(ConfigError):
    pass


class ShapeError(MtrsegError, ValueError):
    exit_code = 2


class CapacityError(ShapeError):
    pass


class NumericError(MtrsegError, ArithmeticError):
    exit_code = 3


class VersionError(MtrsegError):
    exit_code = 5


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4
EXIT_VERSION = 5
