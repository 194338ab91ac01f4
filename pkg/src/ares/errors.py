"""Exception types shared across the pipeline."""


class AresError(Exception):
    """Base class for pipeline-specific failures."""


class ConfigError(AresError, ValueError):
    """A configuration key, value, or file is invalid; message names the offender."""


class NumericalError(AresError, ArithmeticError):
    """A numerical routine could not produce a usable result (e.g. factorization failure)."""


class SynthesisUnderflowError(AresError, RuntimeError):
    """Fewer candidate points qualified as virtual outliers than were requested."""

    def __init__(self, requested: int, available: int, context: str = ""):
        self.requested = requested
        self.available = available
        self.deficit = requested - available
        msg = (
            f"virtual outlier synthesis underflow: requested {requested}, "
            f"only {available} qualify (deficit {self.deficit})"
        )
        if context:
            msg += f" [{context}]"
        super().__init__(msg)


class TrainingDiverged(AresError, RuntimeError):
    """Training produced a non-finite loss; carries the last-good checkpoint path."""

    def __init__(self, epoch: int, batch: int, checkpoint_path: str):
        self.epoch = epoch
        self.batch = batch
        self.checkpoint_path = checkpoint_path
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch}; "
            f"last good checkpoint written to {checkpoint_path}"
        )
