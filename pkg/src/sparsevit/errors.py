"""Exception types raised across the engine."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateRowError(ValueError):
    """A softmax row has no unmasked entry."""


class ResolutionError(ValueError):
    """Image or grid size is not divisible by the patch size."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or does not match the model config."""


class SequencingError(RuntimeError):
    """Attention weights needed for pruning were not captured."""


class ExportTooLargeError(ValueError):
    """A dense export would exceed the configured size cap."""


class InfeasibleBudgetError(ValueError):
    """No admissible resolution fits in the memory budget."""


class NumericalError(FloatingPointError):
    """A tensor picked up non-finite entries."""
