"""Exception hierarchy.

Every error carries the name of the module that raised it so the CLI can
surface module-tagged messages and map each family onto an exit code.
"""


class SurfelBAError(Exception):
    module = "surfelba"

    def __str__(self):
        return f"[{self.module}] {super().__str__()}"


class InputError(SurfelBAError):
    """Bad user input: unreadable files, malformed formats, bad parameters."""


class FormatError(InputError):
    module = "cloud_io"


class UnsupportedFormatError(InputError):
    module = "cloud_io"


class MalformedPoseError(InputError):
    module = "cloud_io"


class OrderingError(InputError):
    module = "cloud_io"


class ConfigError(InputError):
    module = "config"


class EmptyScanError(InputError):
    module = "synthetic"


class GeometryError(SurfelBAError):
    module = "geometry"


class AlignmentDegenerateError(GeometryError):
    """Horn alignment input is collinear or coincident."""


class SolverError(SurfelBAError):
    module = "ba_solver"


class RankDeficiencyError(SolverError):
    def __init__(self, message, variable_ids=()):
        super().__init__(message)
        self.variable_ids = tuple(variable_ids)


class EvaluationError(SurfelBAError):
    module = "evaluation"


class InsufficientOverlapError(EvaluationError):
    pass


class NoOverlapError(EvaluationError):
    pass
