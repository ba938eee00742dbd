"""Exception hierarchy shared by all modules."""


class ArtifactError(Exception):
    """Base class for every error raised by this package."""


# model
class NonpositiveDisposableIncome(ArtifactError, ValueError):
    pass


class NonpositiveSpending(ArtifactError, ValueError):
    pass


class NonpositivePopulation(ArtifactError, ValueError):
    pass


class NonpositiveInput(ArtifactError, ValueError):
    pass


class SingularSystem(ArtifactError, ArithmeticError):
    pass


class Unbounded(ArtifactError, ArithmeticError):
    """Preferred tax rate has no interior solution (gamma * rho <= alpha)."""


# equilibrium
class NoConvergence(ArtifactError, RuntimeError):
    def __init__(self, iterations, residual):
        super().__init__(f"no convergence after {iterations} iterations (residual {residual:.3e})")
        self.iterations = iterations
        self.residual = residual


class InfeasibleIncome(ArtifactError, RuntimeError):
    pass


# voting
class ZeroTurnout(ArtifactError, ArithmeticError):
    pass


# rdd
class InsufficientData(ArtifactError, ValueError):
    pass


class SingularDesign(ArtifactError, ArithmeticError):
    pass


class WeakFirstStage(ArtifactError, ArithmeticError):
    pass


class NonSymmetricInput(ArtifactError, ValueError):
    pass


# ident
class WeakDenominator(ArtifactError, ArithmeticError):
    pass


class DimensionMismatch(ArtifactError, ValueError):
    pass


class ZeroOutsideOption(ArtifactError, ValueError):
    pass


# mle
class NonInvertibleHessian(ArtifactError, ArithmeticError):
    pass


class InsufficientDraws(ArtifactError, ValueError):
    pass


# cli
class ConfigError(ArtifactError, ValueError):
    """Configuration could not be parsed or failed validation.

    ``problems`` maps dotted field paths to messages.
    """

    def __init__(self, message, problems=None):
        super().__init__(message)
        self.problems = dict(problems or {})
