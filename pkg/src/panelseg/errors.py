"""Exception types shared across the pipeline."""


class PanelSegError(Exception):
    """Base class for all pipeline errors."""


class MissingFile(PanelSegError, FileNotFoundError):
    pass


class IoFailure(PanelSegError, OSError):
    pass


class IllegalLabelValue(PanelSegError):
    """A mask pixel holds a value outside the class ids and the ignore id."""

    def __init__(self, value: int, x: int, y: int):
        self.value = value
        self.x = x
        self.y = y
        super().__init__(f"illegal label value {value} at x={x}, y={y}")


class AllPixelsIgnored(PanelSegError):
    pass


class UnreadableImage(PanelSegError):
    pass


class TargetSizeUnset(PanelSegError):
    pass


class InvalidGeometry(PanelSegError):
    pass


class NonDivisibleDimensions(PanelSegError):
    pass


class CoverageGap(PanelSegError):
    def __init__(self, x: int, y: int):
        self.x = x
        self.y = y
        super().__init__(f"no tile covers pixel x={x}, y={y}")


class InfeasibleFraction(PanelSegError):
    pass


class EmptyDistribution(PanelSegError):
    pass


class InvalidConfig(PanelSegError):
    pass


class ShapeMismatch(PanelSegError):
    pass


class NoLabeledPixels(PanelSegError):
    pass


class EmptySplit(PanelSegError):
    pass


class DivergedLoss(PanelSegError):
    pass


class LengthMismatch(PanelSegError):
    pass


class PoolTooSmall(PanelSegError):
    pass


class DimensionMismatch(PanelSegError):
    pass


class DuplicateDate(PanelSegError):
    pass


class SingleFrame(PanelSegError):
    pass


class ConfigError(PanelSegError):
    pass


class StageDependencyMissing(PanelSegError):
    pass
