"""
Exception hierarchy for the toolkit.

Every error carries the process exit code the CLI should use when it reaches
the top level: 1 for configuration and validation problems, 2 for I/O and
container problems, 3 for numeric failures during optimization.
"""


class MelesError(Exception):
    exit_code = 1


class ConfigError(MelesError):
    pass


class SchemaError(MelesError):
    pass


class DatasetError(MelesError):
    pass


class RowError(MelesError):
    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


class ShapeError(MelesError):
    pass


class BoundsError(MelesError):
    pass


class BatchError(MelesError):
    pass


class ContractError(MelesError):
    pass


class InputError(MelesError):
    pass


class GenerationError(MelesError):
    pass


class SelectionError(MelesError):
    pass


class LossError(MelesError):
    pass


class StateError(MelesError):
    pass


class CompatibilityError(MelesError):
    pass


class ProbeError(MelesError):
    pass


class ProjectionError(MelesError):
    pass


class CheckpointError(MelesError):
    exit_code = 2

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(MelesError):
    exit_code = 3

    def __init__(self, message: str, step: int, loss: float, grad_norms: dict):
        norms = ", ".join(f"{k}={v:.4g}" for k, v in grad_norms.items())
        super().__init__(f"{message} at step {step}: loss={loss} | {norms}")
        self.step = step
        self.loss = loss
        self.grad_norms = grad_norms
