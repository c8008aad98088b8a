"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    pass


class SingularSupportError(ValueError):
    """Raised when a support Gram matrix is numerically singular.

    ``index`` is the position of the offending signal in a batch, or None.
    """

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message if index is None else f"{message} (signal {index})")
        self.index = index


class ConditionViolatedError(ValueError):
    """Raised when a precondition of the bounds does not hold.

    ``condition`` names the failed inequality.
    """

    def __init__(self, condition: str, detail: str = ""):
        super().__init__(f"condition violated: {condition}" + (f" ({detail})" if detail else ""))
        self.condition = condition


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, kkt_residual: float, index: int | None = None):
        super().__init__(f"{message}; last kkt residual {kkt_residual:.3e}"
                         + ("" if index is None else f" (signal {index})"))
        self.kkt_residual = kkt_residual
        self.index = index


class TuningFailedError(RuntimeError):
    pass


class CombinatorialGuardError(RuntimeError):
    """Exact enumeration refused; ``bound`` holds the coherence bound k*mu0."""

    def __init__(self, message: str, bound: float):
        super().__init__(f"{message}; use the coherence bound delta_k <= k*mu0 = {bound:.6g}")
        self.bound = bound
