"""Exception and warning types shared across the package."""


class PanelModelError(Exception):
    """Base class for all validation and estimation errors raised here."""


class PanelFormatError(PanelModelError):
    """Malformed panel input (bad CSV, unbalanced panel, bad labels)."""


class AllColumnsPruned(PanelModelError):
    """Every candidate regressor-stack column was constant or collinear."""


class NotIdentified(PanelModelError):
    """The parameter-counting identification condition fails."""


class SingularDesign(PanelModelError):
    """A (generalized) within Gram matrix is numerically singular."""


class NormalizationSingular(PanelModelError):
    """The leading q x q block of the orthonormal loadings cannot be
    inverted, so the identity-block normalization is unavailable."""


class SingularProjection(PanelModelError):
    """The residualized Gram matrix in the projection-coefficient solve
    is singular."""


class DimensionMismatch(PanelModelError):
    """Inputs with inconsistent shapes were combined."""


class SingularH(PanelModelError):
    """The score Gram matrix is not positive definite; the model is not
    locally identified at the supplied estimate."""


class SingularContrastCov(PanelModelError):
    """The contrast covariance cannot be inverted; the consistency test
    abstains rather than test in a degenerate direction."""


class SingularGram(PanelModelError):
    """A population within Gram matrix is singular."""


class ConfigInvalid(PanelModelError):
    """A simulation or run configuration fails validation."""


class DegenerateSpectrumWarning(UserWarning):
    """Eigenvalues q and q+1 are numerically tied, so the extracted
    loading space is not unique."""
