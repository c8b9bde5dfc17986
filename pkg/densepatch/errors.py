class DensepatchError(Exception):
    pass

class ConfigError(DensepatchError, ValueError):
    pass

class ShapeError(DensepatchError, ValueError):
    pass

class FormatError(DensepatchError, ValueError):
    pass

class DataError(DensepatchError, ValueError):
    pass

class NumericalError(DensepatchError, ArithmeticError):
    pass

class TapeError(DensepatchError, LookupError):
    pass
