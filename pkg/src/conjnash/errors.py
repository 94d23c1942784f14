class ConjnashError(Exception):
    pass


class InvalidDimensionError(ConjnashError, ValueError):
    pass


class DegenerateDesignError(ConjnashError):
    pass


class InfeasibleDesignError(ConjnashError):
    pass


class CalibrationError(ConjnashError):
    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory if trajectory is not None else []


class ResponseTieError(ConjnashError):
    def __init__(self, message, cells=None):
        super().__init__(message)
        self.cells = cells


class NumericalFailureError(ConjnashError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class UndefinedVarianceError(ConjnashError):
    pass


class NeedsLongerChainError(ConjnashError):
    def __init__(self, message, estimated_length, min_fraction):
        super().__init__(message)
        self.estimated_length = estimated_length
        self.min_fraction = min_fraction


class CapacityError(ConjnashError):
    def __init__(self, message, n_scenarios=None):
        super().__init__(message)
        self.n_scenarios = n_scenarios


class ConfigurationError(ConjnashError):
    pass
