"""Exception hierarchy shared by every module of the package."""


class MsmError(Exception):
    """Base class for all errors raised by :mod:`imsm`."""


class DimensionError(MsmError, ValueError):
    """Array shapes disagree with the model dimensions."""


class StateIndexError(MsmError, IndexError):
    """A discrete state index lies outside ``0..K-1``."""


class NonFiniteError(MsmError, ValueError):
    """An input or intermediate quantity is NaN or infinite."""


class InvariantError(MsmError, ValueError):
    """A parameter violates a structural invariant (stochasticity, SPD, ...)."""


class ReducibleChainError(MsmError, ValueError):
    """The discrete chain is not irreducible."""

    def __init__(self, unreachable):
        self.unreachable = tuple(int(s) for s in unreachable)
        super().__init__(
            "transition matrix is reducible; states not mutually reachable: "
            + ", ".join(str(s) for s in self.unreachable)
        )


class SingularTransformError(MsmError, ValueError):
    """An affine map is not invertible."""


class RankDeficiencyError(MsmError, ValueError):
    """A least-squares design matrix does not have full column rank."""


class EnumerationTooLargeError(MsmError, ValueError):
    """Brute-force path enumeration was requested for too many paths."""


class ModelFormatError(MsmError, ValueError):
    """A model file could not be parsed; ``field`` names the offending entry."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class SchemaVersionError(ModelFormatError):
    """A model file declares a schema version this package cannot read."""

    def __init__(self, version):
        self.version = version
        super().__init__("schema_version", f"unsupported schema version {version!r}")


class EstimationError(MsmError, RuntimeError):
    """A numerical failure during fitting.

    ``state`` and ``restart`` are filled in when known.
    """

    def __init__(self, message, state=None, restart=None):
        self.state = state
        self.restart = restart
        ctx = []
        if restart is not None:
            ctx.append(f"restart {restart}")
        if state is not None:
            ctx.append(f"state {state}")
        prefix = f"[{', '.join(ctx)}] " if ctx else ""
        super().__init__(prefix + message)


class ConfigError(MsmError, ValueError):
    """Invalid configuration or command-line usage."""
