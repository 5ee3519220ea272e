"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes do not satisfy an operation's requirements."""


class ContractError(ValueError):
    """An operation precondition was violated (e.g. empty attended key set)."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared where only finite values are allowed."""


class CapacityError(RuntimeError):
    """The KV block pool cannot satisfy an allocation."""


class RequestRejectedError(CapacityError):
    """A request can never fit the pool, even when it is empty."""


class ConfigurationError(ValueError):
    """Invalid engine/CLI configuration (e.g. relay mode without a system cache)."""


class TraceParseError(ValueError):
    """A workload trace file could not be parsed."""
