"""Exception hierarchy.

Every error carries the CLI exit code it maps to, so the command layer can
translate library failures without a lookup table.
"""


class DyncovError(Exception):
    exit_code = 1


class ConfigError(DyncovError, ValueError):
    exit_code = 2


class InvalidParameterError(ConfigError):
    pass


class DataError(DyncovError, ValueError):
    exit_code = 3


class NumericalError(DyncovError, ArithmeticError):
    exit_code = 4


class DegenerateKernelError(NumericalError):
    """Every eigenvalue of the kernel matrix fell below the truncation level."""


class ZeroVectorError(NumericalError):
    pass


class RankDeficiencyError(NumericalError):
    pass


class DivergenceError(NumericalError):
    def __init__(self, iteration, value):
        super().__init__(f"objective became non-finite ({value}) at iteration {iteration}")
        self.iteration = iteration
        self.value = value
