"""Exception hierarchy shared by the library and the CLI.

Each exception carries the process exit code the harness reports for it, so
``cli.main`` can map any library failure to a stable code without a lookup
table of its own.
"""


class PBSError(Exception):
    exit_code = 1
    code = "error"


class ConfigError(PBSError, ValueError):
    exit_code = 2
    code = "config"


class ShapeError(ConfigError):
    code = "shape"


class FormatError(PBSError):
    """Malformed tensor file; ``offset`` is the byte where parsing failed."""

    exit_code = 3
    code = "format"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ResourceLimitError(PBSError):
    exit_code = 4
    code = "resource"


class DegenerateRowError(PBSError, ArithmeticError):
    exit_code = 5
    code = "degenerate"

    def __init__(self, message, row_block=None):
        super().__init__(message)
        self.row_block = row_block
