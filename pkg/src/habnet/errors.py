"""Exception types shared across the pipeline.

The CLI maps these onto exit codes: ``DataError`` and its subclasses exit
with 2, ``NumericalError`` with 3.
"""


class HabnetError(Exception):
    pass


class DataError(HabnetError):
    """Input data or file contents are unusable."""


class FormatError(DataError):
    """A binary or text file does not match its declared format."""


class SchemaError(DataError):
    """A tabular input is missing a mandatory column."""


class LayoutError(DataError):
    """Feature vectors do not match the layout a model was trained on."""

    def __init__(self, expected, actual, what="feature length"):
        super().__init__(f"{what} mismatch: expected {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


class OfflineError(HabnetError):
    """A network operation was attempted while offline mode is active."""


class FetchError(HabnetError):
    """A granule could not be downloaded."""


class NumericalError(HabnetError):
    """Training produced a non-finite loss or gradient."""
