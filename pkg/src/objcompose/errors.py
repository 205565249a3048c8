"""Exception types shared across the package.

Every error carries a short ``category`` string, which the command line
prints as a single machine-parseable line.
"""


class ObjComposeError(Exception):
    category = "error"


class ParameterError(ObjComposeError, ValueError):
    category = "parameter"


class ShapeError(ObjComposeError, ValueError):
    category = "shape"


class DataError(ObjComposeError):
    category = "data"


class LoadError(DataError):
    category = "load"


class NumericError(ObjComposeError, ArithmeticError):
    category = "numeric"
