class ShapeError(ValueError):
    """Operand shapes are inconsistent."""


class ValidationError(ValueError):
    """A model manifest, plan or report violates its invariants."""


class FormatError(ValueError):
    """An SMAF archive is malformed or truncated."""


class PipelineError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
