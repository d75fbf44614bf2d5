from abc import ABC


class MetadataBase(ABC):
    """
    Base class that ensures configs, networks and trainers have the
    appropriate metadata.
    """
    def get_metadata(self):
        return {
            'name': type(self).__name__,
        }


class ImvcError(Exception):
    exit_code = 1


class ConfigError(ImvcError, ValueError):
    exit_code = 2


class DataError(ImvcError, ValueError):
    exit_code = 3


class DimensionError(DataError):
    """
    Raised when a matrix width does not match the network layer it is fed to.
    """
    def __init__(self, layer, expected, got):
        super().__init__(f"layer {layer}: expected width {expected}, got {got}")
        self.layer = layer


class EmptyViewError(DataError):
    def __init__(self, view):
        super().__init__(f"view {view} has no observed rows")
        self.view = view


class NumericError(ImvcError, ArithmeticError):
    exit_code = 4


class ContractError(ImvcError):
    exit_code = 4
