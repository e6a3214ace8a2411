"""Exception taxonomy shared by the library and the CLI exit codes."""


class ContactError(Exception):
    """Base class for all errors raised deliberately by this package."""

    exit_code = 2


class DataError(ContactError):
    """Malformed or insufficient input data (files, records, labels)."""

    exit_code = 2


class NumericalError(ContactError):
    """Training diverged or produced non-finite values."""

    exit_code = 3
