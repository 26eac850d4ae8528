"""Error taxonomy shared by the library and the CLI.

Exit-code mapping: 0 success, 2 usage error, 3 data error, 4 numeric
failure. Unexpected exceptions fall through with the interpreter default.
"""


class PoolrankError(Exception):
    exit_code = 1


class UsageError(PoolrankError):
    """Bad flags, config values, or arguments, caught before any real work."""

    exit_code = 2


class DataError(PoolrankError):
    """Malformed files, manifest violations, or inconsistent inputs.

    ``code`` is a short machine-checkable tag (e.g. "bad_magic",
    "truncated", "non_finite", "dim_overflow") so callers can distinguish
    failure modes without parsing messages.
    """

    exit_code = 3

    def __init__(self, message: str, code: str = "data"):
        super().__init__(message)
        self.code = code


class NumericError(PoolrankError):
    """Non-finite statistics or other numeric breakdown during computation."""

    exit_code = 4
