"""Exception hierarchy shared by all modules."""


class QuasijetError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(QuasijetError, ValueError):
    pass


class NonPolynomialData(QuasijetError):
    """Directional data is not the restriction of a homogeneous form."""


class SignatureMismatch(QuasijetError):
    """Multiplicity pattern of an eigenstructure changed."""


class ModelRangeError(QuasijetError, ValueError):
    """Coefficient evaluated outside its validity box."""


class EllipticityViolation(QuasijetError):
    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class JetOrderError(QuasijetError, ValueError):
    """Requested jet order exceeds what is available."""


class ConditionHViolated(QuasijetError):
    def __init__(self, margin, threshold, message=None):
        self.margin = float(margin)
        self.threshold = float(threshold)
        if message is None:
            message = (f"condition (H) violated: M = {self.margin:.6g} "
                       f">= 1/sqrt(n) = {self.threshold:.6g}")
        super().__init__(message)


class MeshError(QuasijetError):
    pass


class ProbeNotOnBoundary(QuasijetError, ValueError):
    pass


class NewtonDiverged(QuasijetError):
    def __init__(self, message, lam=None, omega=None, tau=None):
        super().__init__(message)
        self.lam, self.omega, self.tau = lam, omega, tau


class EllipticityLost(NewtonDiverged):
    pass


class StencilError(QuasijetError, ValueError):
    pass


class ProjectionDegenerate(QuasijetError):
    pass


class InconsistentData(QuasijetError):
    pass


class ConfigError(QuasijetError, ValueError):
    pass
