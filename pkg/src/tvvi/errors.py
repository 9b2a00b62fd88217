"""Exception hierarchy shared by all modules."""


class TVVIError(Exception):
    """Base class for every error raised by :mod:`tvvi`."""


class DimensionError(TVVIError, ValueError):
    pass


class NoConvergence(TVVIError):
    def __init__(self, iterations, residual, message=None):
        self.iterations = int(iterations)
        self.residual = float(residual)
        super().__init__(
            message
            or f"no convergence after {self.iterations} iterations (residual {self.residual:.3e})"
        )


class StepSizeInvalid(TVVIError, ValueError):
    pass


class Infeasible(TVVIError):
    """The supplied state admits no slack variable, i.e. it is not a VI solution."""


class SingularSystem(TVVIError):
    pass


class PartitionCapExceeded(TVVIError):
    def __init__(self, size, cap, iteration=None):
        self.size = int(size)
        self.cap = int(cap)
        self.iteration = iteration
        where = "" if iteration is None else f" at iteration {iteration}"
        super().__init__(f"{self.size} candidate indices exceed the cap of {self.cap}{where}")


class NoValidPartition(TVVIError):
    pass


class RayRepresentativeInfeasible(TVVIError):
    def __init__(self, block):
        self.block = int(block)
        super().__init__(f"no representative vector for the ray of block {self.block}")


class InjectivityRepairFailed(TVVIError):
    pass


class DegeneratePsiZero(TVVIError):
    pass
