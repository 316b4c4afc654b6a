"""Exception types shared by every ModalPatch component.

Each error carries the process exit code the CLI uses for it.
"""


class ModalPatchError(Exception):
    exit_code = 1


class ShapeError(ModalPatchError, ValueError):
    """Operand shapes do not fit the op signature."""


class ContractError(ModalPatchError, ValueError):
    """A documented precondition was violated by the caller."""


class GraphError(ModalPatchError):
    """Misuse of the differentiable graph (unbound input, non-scalar check)."""


class ConfigError(ModalPatchError):
    exit_code = 2

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class MissingArtifactError(ModalPatchError):
    exit_code = 3


class TrainingError(ModalPatchError):
    exit_code = 4
