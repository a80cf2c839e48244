from typing import Optional


class LispException(Exception):
    """Base error: an exit status plus a human readable detail."""

    status_code: int = 1

    def __init__(self, detail: str, status_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if status_code is not None:
            self.status_code = status_code

    def __str__(self) -> str:
        return self.detail


class ConfigError(LispException):
    status_code = 2


class NumericalAbort(LispException):
    status_code = 3


class DatasetError(LispException):
    status_code = 4

    def __init__(self, detail: str, offset: Optional[int] = None):
        if offset is not None:
            detail = f"{detail} (byte offset {offset})"
        super().__init__(detail)
        self.offset = offset


class MissingColumnError(LispException):
    status_code = 5

    def __init__(self, column: str, path: str):
        super().__init__(f"Missing column '{column}' in {path}")
        self.column = column


class PreconditionError(LispException):
    status_code = 6
