"""Exception hierarchy shared across the pipeline.

Each error carries a ``kind`` used by the command line front end to pick an
exit code and to build the machine-readable error payload.
"""


class GraspTypeError(Exception):
    kind = "data"


class DegeneratePlane(GraspTypeError):
    pass


class EmptySegmentation(GraspTypeError):
    pass


class DegenerateGeometry(GraspTypeError):
    pass


class InsufficientData(GraspTypeError):
    pass


class SingleClassData(GraspTypeError):
    pass


class NonFiniteObjective(GraspTypeError):
    kind = "inference"


class QuotaUnreachable(GraspTypeError):
    pass


class EmptyList(GraspTypeError):
    pass


class FitError(GraspTypeError):
    """A per-type fit failure, tagged with the offending grasp type."""

    def __init__(self, type_name, cause):
        super().__init__(f"fit failed for type {type_name!r}: {cause}")
        self.type_name = type_name
        self.cause = cause
