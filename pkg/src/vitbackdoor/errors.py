"""Exception hierarchy shared by every subpackage.

Each class carries a short ``category`` string that the CLI prints on failure
and maps to a distinct exit code.
"""


class BackdoorToolkitError(Exception):
    category = "error"
    exit_code = 1


class DimensionError(BackdoorToolkitError, ValueError):
    category = "dimension"
    exit_code = 2


class ConfigurationError(BackdoorToolkitError, ValueError):
    category = "configuration"
    exit_code = 3


class FormatError(BackdoorToolkitError, ValueError):
    category = "format"
    exit_code = 4


class InputError(BackdoorToolkitError, ValueError):
    category = "input"
    exit_code = 5


class TrainingError(BackdoorToolkitError, RuntimeError):
    category = "training"
    exit_code = 6


class CalibrationError(BackdoorToolkitError, ValueError):
    category = "calibration"
    exit_code = 7


class PipelineError(BackdoorToolkitError, RuntimeError):
    category = "pipeline"
    exit_code = 8


class DependencyError(BackdoorToolkitError, FileNotFoundError):
    category = "dependency"
    exit_code = 9


class IncompatibleVersionError(FormatError):
    category = "version"
    exit_code = 10
