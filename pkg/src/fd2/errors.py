"""Exception types raised across the package."""


class FD2Error(Exception):
    pass


class DimensionError(FD2Error, ValueError):
    pass


class ValidationError(FD2Error, ValueError):
    pass


class ConfigError(FD2Error, ValueError):
    pass


class StateError(FD2Error, RuntimeError):
    pass


class ProvenanceError(FD2Error, RuntimeError):
    pass


class NonFiniteLossError(FD2Error, FloatingPointError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration
