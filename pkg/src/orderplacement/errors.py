"""Exception hierarchy shared by every layer of the package."""


class OrderPlacementError(Exception):
    """Base class; ``code`` is the stable identifier surfaced by the CLI."""

    code = "error"
    exit_status = 1


class DomainError(OrderPlacementError, ValueError):
    code = "domain_error"
    exit_status = 3


class ParseError(OrderPlacementError, ValueError):
    code = "parse_error"
    exit_status = 2

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(OrderPlacementError, ValueError):
    code = "config_error"
    exit_status = 2

    def __init__(self, message, key_path=None, line=None):
        prefix = ""
        if key_path:
            prefix += f"{key_path}: "
        if line is not None:
            prefix = f"line {line}: " + prefix
        super().__init__(prefix + message)
        self.key_path = key_path
        self.line = line


class PreconditionError(OrderPlacementError):
    """A solver's mathematical preconditions do not hold for the given inputs."""

    code = "precondition_violation"
    exit_status = 3

    def __init__(self, message, violations=()):
        super().__init__(message)
        self.violations = list(violations)


class NumericalError(OrderPlacementError):
    code = "numerical_failure"
    exit_status = 4


class RootNotFoundError(NumericalError):
    code = "root_not_found"
