"""Exception hierarchy shared by every freqcross module."""


class FreqCrossError(Exception):
    """Base class for all package errors."""


# imaging
class MalformedImage(FreqCrossError, ValueError):
    pass


class UnsupportedFormat(FreqCrossError, ValueError):
    pass


class DimensionTooSmall(FreqCrossError, ValueError):
    pass


class InvalidSpec(FreqCrossError, ValueError):
    pass


# spectrum
class EmptyInput(FreqCrossError, ValueError):
    pass


class NotCentered(FreqCrossError, ValueError):
    pass


class MismatchedBins(FreqCrossError, ValueError):
    pass


class EmptyClass(FreqCrossError, ValueError):
    pass


# neural
class ShapeMismatch(FreqCrossError, ValueError):
    pass


class LengthMismatch(FreqCrossError, ValueError):
    pass


class NoTape(FreqCrossError, RuntimeError):
    pass


class NonDeterministicFragment(FreqCrossError, RuntimeError):
    pass


# model / serialization
class InvalidConfig(FreqCrossError, ValueError):
    pass


class CorruptFile(FreqCrossError, ValueError):
    pass


class VersionUnsupported(FreqCrossError, ValueError):
    pass


# datapipe
class MalformedRow(FreqCrossError, ValueError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line


class DuplicatePath(FreqCrossError, ValueError):
    pass


class UnknownLabel(FreqCrossError, ValueError):
    pass


class UnknownSplit(FreqCrossError, ValueError):
    pass


class EmptySplit(FreqCrossError, ValueError):
    pass


class IoFailure(FreqCrossError, OSError):
    pass


# evalkit
class EmptySet(FreqCrossError, ValueError):
    pass


class SingleClass(FreqCrossError, ValueError):
    pass


class NoPositives(FreqCrossError, ValueError):
    pass


class DegenerateRank(FreqCrossError, ValueError):
    pass


# trainer
class NonFiniteLoss(FreqCrossError, RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
