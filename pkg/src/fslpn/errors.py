"""Exception hierarchy.

Each concrete error belongs to one of four categories (parse, data, numeric,
contract) which the command line maps onto distinct exit codes.
"""


class FSLPNError(Exception):
    category = "contract"


# -- parse ---------------------------------------------------------------

class ConfigError(FSLPNError, ValueError):
    category = "parse"


# -- data ----------------------------------------------------------------

class DataError(FSLPNError):
    category = "data"


class ParseError(DataError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(DataError, ValueError):
    pass


class SamplingError(DataError, ValueError):
    pass


class CheckpointFormatError(DataError):
    pass


class CheckpointIntegrityError(DataError):
    pass


class ShapeMismatchError(DataError, ValueError):
    def __init__(self, name, expected, found):
        self.name = name
        super().__init__(f"tensor {name!r}: expected shape {tuple(expected)}, checkpoint has {tuple(found)}")


# -- numeric -------------------------------------------------------------

class NumericError(FSLPNError, ArithmeticError):
    category = "numeric"


class DimensionError(FSLPNError, ValueError):
    category = "numeric"


class DegenerateBatchError(NumericError):
    pass


# -- contract ------------------------------------------------------------

class StateError(FSLPNError, RuntimeError):
    pass


class OptimizerError(FSLPNError):
    pass


class PrototypeError(FSLPNError, ValueError):
    pass


class ContractError(FSLPNError):
    pass
