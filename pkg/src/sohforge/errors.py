"""Exception and warning types shared across the package."""


class SohforgeError(Exception):
    """Base class for all package-specific failures."""


# -- dataio ------------------------------------------------------------

class MalformedRow(SohforgeError):
    """A CSV row violates the dataset schema."""

    def __init__(self, line_no: int, reason: str):
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"line {line_no}: {reason}")


class InconsistentCapacity(SohforgeError):
    """Provided soh column disagrees with cell_capacity / nominal_capacity."""


class EmptyFile(SohforgeError):
    """Dataset file contains no data rows."""


class InvalidSpec(SohforgeError):
    """Synthetic-dataset spec violates its invariants."""


class TooFewCells(SohforgeError):
    """Not enough cells to populate the requested partitions."""


# -- partial windows ---------------------------------------------------

class WindowOutsideCurve(SohforgeError):
    """Requested DoD range is not covered by the discharge curve."""


class DegenerateWindow(SohforgeError):
    """Window is too narrow to resample (zero width or single sample)."""


# -- ica ---------------------------------------------------------------

class SolverNotConverged(SohforgeError):
    """SVR dual solver hit max_iter with KKT violation above tol."""


class DegenerateInput(SohforgeError):
    """Window unsuitable for SVR smoothing (too few points or flat voltage)."""


# -- nn ----------------------------------------------------------------

class ShapeMismatch(SohforgeError):
    """Array shapes inconsistent with the layer stack or each other."""


class NonFiniteLoss(SohforgeError):
    """Training loss became NaN or infinite."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")


class IncompatibleLength(SohforgeError):
    """Input length underflows the conv/pool stack."""


# -- forest ------------------------------------------------------------

class DegenerateTargets(UserWarning):
    """All targets equal; forest degenerates to single-leaf trees."""


class ZeroImportance(SohforgeError):
    """Importance ratio undefined: reference feature importance is zero."""


# -- pipeline ----------------------------------------------------------

class NonPositiveTruth(SohforgeError):
    """Relative MAE undefined for soh_true <= 0."""


class AllFeaturesAbsent(SohforgeError):
    """No cycle in a fold produced a usable IC feature."""


# -- config / cli ------------------------------------------------------

class ParseError(SohforgeError):
    """Config file is not valid JSON or has a malformed value."""


class UnknownKey(SohforgeError):
    """Config or override references a key outside the schema."""
