"""Exception hierarchy shared by every module.

Each error carries the CLI exit code it maps to: 2 for data/parse problems,
3 for numeric failures.
"""


class DFLError(Exception):
    exit_code = 2


class ShapeMismatch(DFLError, ValueError):
    def __init__(self, kind, rule, shapes):
        self.kind = kind
        self.rule = rule
        self.shapes = [tuple(s) for s in shapes]
        super().__init__(f"{kind}: expected {rule}, got shapes {self.shapes}")


class NotScalarLoss(DFLError, ValueError):
    pass


class NonFiniteValue(DFLError, FloatingPointError):
    exit_code = 3


class InvalidGrid(DFLError, ValueError):
    pass


class DegenerateBox(DFLError, ValueError):
    pass


class DegenerateRoi(DFLError, ValueError):
    pass


class MissingRegressionTarget(DFLError, ValueError):
    pass


class InvalidThresholds(DFLError, ValueError):
    pass


class NoNegatives(DFLError, ValueError):
    pass


class ParseError(DFLError, ValueError):
    pass


class MissingImage(DFLError, FileNotFoundError):
    pass


class TileLargerThanImage(DFLError, ValueError):
    pass


class DegenerateQuadrilateral(DFLError, ValueError):
    pass


class PlacementFailure(DFLError, RuntimeError):
    pass


class UnsupportedFormat(DFLError, ValueError):
    pass


class TruncatedFile(DFLError, ValueError):
    pass


class IoFailure(DFLError, OSError):
    pass
