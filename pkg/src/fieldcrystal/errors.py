"""Exception types shared across the package."""


class FieldCrystalError(Exception):
    """Base class for all library errors."""


class NonPositiveSpectrum(FieldCrystalError):
    """The cell operator has a non-positive eigenvalue (positivity condition violated)."""

    def __init__(self, lambda_min, theta=None):
        self.lambda_min = float(lambda_min)
        self.theta = theta
        where = "" if theta is None else f" at theta={theta}"
        super().__init__(f"lowest eigenvalue {self.lambda_min:.6g} <= 0{where}")


class SingularFunction(FieldCrystalError):
    """A scalar map is undefined (non-finite) on part of the spectrum."""


class DegenerateBand(FieldCrystalError):
    def __init__(self, theta, band):
        self.theta = theta
        self.band = band
        super().__init__(f"band {band} is degenerate at theta={theta}")


class DimensionMismatch(FieldCrystalError):
    pass


class NonRealField(FieldCrystalError):
    """Zak data does not satisfy the reality constraint of a real physical state."""


class NotPSD(FieldCrystalError):
    pass


class GridMismatch(FieldCrystalError):
    pass


class WraparoundRisk(FieldCrystalError):
    """The finite crystal is too small: signals would wrap around before the final time."""

    def __init__(self, n_cells, gamma, t_max, factor=1.5):
        self.n_cells = n_cells
        self.gamma = gamma
        self.t_max = t_max
        self.bound = factor * gamma * t_max
        super().__init__(
            f"N/2 = {n_cells / 2:g} must exceed {factor:g}*gamma*T_max = {self.bound:.6g} "
            f"(gamma={gamma:.6g}, T_max={t_max:g})"
        )


class ConfigError(FieldCrystalError):
    """Configuration is invalid; ``errors`` lists every problem found."""

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))
