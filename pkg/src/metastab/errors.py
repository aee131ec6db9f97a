"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class MetastabError(Exception):
    """Base class for all errors raised by this package."""


class SpecParseError(MetastabError):
    """Malformed configuration document (CLI exit code 2)."""

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class ModelError(MetastabError):
    """The potential or landscape violates a structural assumption (exit code 3)."""


class NumericError(MetastabError):
    """A numerical procedure failed to converge."""

    def __init__(self, message, trace=None):
        self.trace = list(trace or [])
        super().__init__(message)


class StaleArtifactError(MetastabError):
    """A prior artifact is missing or was produced from a different spec (exit code 4)."""
