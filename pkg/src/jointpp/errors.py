"""Exception types shared across the package.

Each carries the CLI exit code it maps to.
"""


class JointPPError(Exception):
    exit_code = 1
    code = "ERROR"


class ConfigError(JointPPError):
    exit_code = 2
    code = "CONFIG_ERROR"


class DataError(JointPPError):
    exit_code = 3
    code = "DATA_ERROR"


class NumericalFailure(JointPPError):
    """A factorization or solve broke down.

    Parameters
    ----------
    stage : str
        Short name of the step that failed, e.g. ``"L"``, ``"T"``,
        ``"knot_cov_u"``.
    message : str
        Human readable detail.
    """

    exit_code = 4
    code = "NUMERICAL_FAILURE"

    def __init__(self, stage, message=""):
        self.stage = stage
        super().__init__(f"[{stage}] {message}" if message else f"[{stage}]")
