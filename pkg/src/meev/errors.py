"""Exception types shared across the package.

Invalid arguments raise plain ``ValueError``; the classes below mark the
error families the command line maps to distinct exit codes.
"""


class MeevError(Exception):
    exit_code = 1
    label = "error"


class ConfigError(MeevError):
    exit_code = 2
    label = "config error"


class DataError(MeevError):
    exit_code = 3
    label = "data error"


class EvaluationError(MeevError):
    exit_code = 4
    label = "runtime error"


class VersionError(MeevError):
    exit_code = 5
    label = "version error"


class ShapeContractError(MeevError, ValueError):
    """A backbone produced feature maps of the wrong size."""

    exit_code = 4
    label = "runtime error"


class NonFiniteLossError(MeevError):
    exit_code = 4
    label = "runtime error"
