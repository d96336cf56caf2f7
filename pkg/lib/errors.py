EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3


class SkfError(Exception):
    """Base class for every error raised by the pipeline."""
    exit_code = EXIT_CONFIG


class ConfigError(SkfError, ValueError):
    """A value type was constructed with invalid fields."""


class AngleOverflow(SkfError):
    def __init__(self, angle: float):
        super().__init__(f"Relative rotation angle {angle:.6f} rad is too close to pi")
        self.angle = angle


class NotSymmetric(SkfError, ValueError):
    def __init__(self, asymmetry: float):
        super().__init__(f"Matrix is not symmetric (max |M - M^T| = {asymmetry:.3e})")
        self.asymmetry = asymmetry


class NearSingular(SkfError):
    def __init__(self, min_eigenvalue: float, max_eigenvalue: float):
        super().__init__(
            f"Matrix is not safely positive definite "
            f"(min eigenvalue {min_eigenvalue:.3e}, max eigenvalue {max_eigenvalue:.3e})"
        )
        self.min_eigenvalue = min_eigenvalue
        self.max_eigenvalue = max_eigenvalue


class BehindCamera(SkfError):
    def __init__(self, indices):
        self.indices = list(indices)
        super().__init__(f"Landmarks behind the camera: {self.indices}")


class EmptyAfterFilter(SkfError):
    """No row contribution survived the normalized-Hessian filter."""


class VisualInfoSingular(SkfError):
    """Visual information matrix cannot be inverted without regularization."""


class PriorSingular(SkfError):
    def __init__(self, min_eigenvalue: float, max_eigenvalue: float):
        super().__init__(
            f"Prior covariance is singular "
            f"(min eigenvalue {min_eigenvalue:.3e}, max eigenvalue {max_eigenvalue:.3e})"
        )
        self.min_eigenvalue = min_eigenvalue
        self.max_eigenvalue = max_eigenvalue


class NoVisiblePlane(SkfError):
    def __init__(self, frame: int):
        super().__init__(f"No plane visible from the sensor at frame {frame}")
        self.frame = frame


class UnknownScenario(SkfError):
    def __init__(self, name: str, known):
        super().__init__(f"Unknown scenario '{name}'. Known scenarios: {', '.join(known)}")
        self.name = name


class ScenarioLoadError(SkfError):
    """Scenario file or trace dump could not be read or validated."""


class OutputIoError(SkfError):
    exit_code = EXIT_IO


class MissingArtifacts(SkfError):
    exit_code = EXIT_IO
