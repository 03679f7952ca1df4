"""Exception types shared across the package."""


class SpecfedError(Exception):
    """Base class for package errors."""


class ConfigError(SpecfedError, ValueError):
    """Invalid configuration value or geometry.

    ``key_path`` names the offending config key (dotted) when known.
    """

    def __init__(self, message, key_path=None):
        super().__init__(message)
        self.key_path = key_path


class ContractError(SpecfedError, ValueError):
    """A caller violated an operation's precondition."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class EmptyBankError(SpecfedError, LookupError):
    """Retrieval was requested from a knowledge bank holding no prototypes."""


class ClientError(SpecfedError, RuntimeError):
    """A client's local update failed; carries the client id."""

    def __init__(self, client_id, round_index, cause):
        super().__init__(f"client {client_id} failed in round {round_index}: {cause!r}")
        self.client_id = client_id
        self.round_index = round_index
        self.cause = cause
