"""Exception hierarchy.

Every error carries a stable ``kind`` string and the process exit code the
CLI should use for it, so scripted callers can branch on either.
"""


class BartmedError(Exception):
    """Base class for all package errors."""

    kind = "internal.error"
    exit_code = 1

    def __init__(self, message, *, kind=None, **details):
        super().__init__(message)
        if kind is not None:
            self.kind = kind
        self.details = details

    def to_dict(self):
        out = {"kind": self.kind, "message": str(self)}
        if self.details:
            out["details"] = {k: _jsonable(v) for k, v in self.details.items()}
        return out


def _jsonable(v):
    if isinstance(v, (str, int, float, bool)) or v is None:
        return v
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return str(v)


class InputIOError(BartmedError):
    kind = "io.error"
    exit_code = 2


class ConfigError(BartmedError):
    kind = "config.invalid"
    exit_code = 3


class SchemaError(BartmedError):
    """A required column is absent from the input file."""

    kind = "data.schema"
    exit_code = 3


class ParseError(BartmedError):
    """A cell could not be converted to the expected type."""

    kind = "data.parse"
    exit_code = 3


class DatasetValidationError(BartmedError):
    kind = "data.invalid"
    exit_code = 3


class ArgumentError(BartmedError, ValueError):
    kind = "argument.invalid"
    exit_code = 3


class SingularDesignError(BartmedError):
    kind = "numeric.singular_design"
    exit_code = 4


class NumericalError(BartmedError):
    kind = "numeric.failure"
    exit_code = 4


class ConsistencyError(BartmedError):
    """Two routes that must agree did not."""

    kind = "consistency.failure"
    exit_code = 5


class StaleArtifactError(BartmedError):
    kind = "artifact.stale"
    exit_code = 2


class ScenarioError(BartmedError):
    kind = "simulation.failed"
    exit_code = 4
