class AvBastionError(Exception):
    """Base class for every error raised by the testbed."""


class InvalidGeometry(AvBastionError):
    pass


class OutOfRange(AvBastionError):
    pass


class BadLength(AvBastionError):
    pass


class Unauthorized(AvBastionError):
    pass


class DiskFull(AvBastionError):
    pass


class DuplicateName(AvBastionError):
    pass


class UnknownFile(AvBastionError):
    pass


class FormatError(AvBastionError):
    """Malformed container or database bytes."""


class TamperDetected(AvBastionError):
    """A seal or digest did not verify."""


class InvalidK(AvBastionError):
    pass


class SelfCheckFailed(AvBastionError):
    pass


class EngineCompromised(AvBastionError):
    pass


class SchemaError(AvBastionError):
    """Scenario validation failure. Holds every issue found, each as (json path, message)."""

    def __init__(self, issues: list[tuple[str, str]]) -> None:
        self.issues = issues
        super().__init__("; ".join(f"{path}: {message}" for path, message in issues))
