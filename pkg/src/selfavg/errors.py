"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class SelfAvgError(Exception):
    """Base class for all library errors."""


class DomainError(SelfAvgError, ValueError):
    """Argument outside the domain of a function (e.g. n < 2 for a roulette moment)."""


class PrecisionError(SelfAvgError, ArithmeticError):
    """A row failed its residual checks even at the maximum working precision."""

    def __init__(self, n: int, bits: int, residual: float):
        self.n = n
        self.bits = bits
        self.residual = residual
        super().__init__(
            f"row n={n} failed residual checks at {bits} bits (residual {residual:.3e}); "
            "raise max_bits or loosen the tolerance"
        )


class WindowError(SelfAvgError, ValueError):
    """The envelope windows do not fit inside the computed table."""

    def __init__(self, x: float, required_n_max: int, n_max: int):
        self.x = x
        self.required_n_max = required_n_max
        self.n_max = n_max
        super().__init__(
            f"envelope at x={x:g} needs a table with n_max >= {required_n_max} (have {n_max})"
        )


class InfeasibleError(SelfAvgError, ValueError):
    """Contraction constants cannot be found for the requested K."""

    def __init__(self, K: float, threshold: float, detail: str = ""):
        self.K = K
        self.threshold = threshold
        msg = f"K={K:g} must exceed {threshold:.6g}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class PushforwardLimitError(SelfAvgError, ValueError):
    """Exact pushforward requested beyond the dense-matrix size limit."""

    def __init__(self, n: int, limit: int):
        super().__init__(
            f"exact pushforward limited to n <= {limit} (got n={n}); "
            "use the Monte Carlo simulator for larger populations"
        )
