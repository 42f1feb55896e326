"""Exception types shared across the package."""


class DomExpertsError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(DomExpertsError, ValueError):
    """An argument violates a documented precondition."""


class SchemaMismatchError(DomExpertsError, ValueError):
    """Metadata is missing a field the active domain schema requires.

    The offending field name is kept in ``field_name``.
    """

    def __init__(self, field_name: str, message: str | None = None):
        self.field_name = field_name
        super().__init__(message or f"metadata is missing required field {field_name!r}")


class DatasetParseError(DomExpertsError, ValueError):
    """A dataset directory or index file is malformed; names the record."""


class CheckpointError(DomExpertsError, ValueError):
    """A model archive failed validation on save or load."""


class TrainingDivergenceError(DomExpertsError, RuntimeError):
    """Training produced a non-finite loss.

    The training loop fills in ``epoch`` and ``step``; a bare loss computation
    raises without them.
    """

    def __init__(self, epoch: int | None = None, step: int | None = None,
                 message: str | None = None):
        self.epoch = epoch
        self.step = step
        if message is None:
            where = f" at epoch {epoch}, step {step}" if epoch is not None else ""
            message = f"non-finite loss{where}"
        super().__init__(message)
