"""Exception hierarchy shared across the pipeline."""


class CtNoduleError(Exception):
    """Base class for all pipeline errors."""


# --- CT / CSV parsing ---

class MissingRequiredKey(CtNoduleError):
    pass


class UnsupportedElementType(CtNoduleError):
    pass


class PayloadSizeMismatch(CtNoduleError):
    pass


class BadDimensionality(CtNoduleError):
    pass


class MalformedRow(CtNoduleError):
    pass


class UnknownHeader(CtNoduleError):
    pass


class DegenerateWindow(CtNoduleError):
    pass


class EmptyInput(CtNoduleError):
    pass


# --- patch extraction ---

class OutOfBounds(CtNoduleError):
    pass


class WindowLargerThanVolume(CtNoduleError):
    pass


class NonAxisAlignedVolume(CtNoduleError):
    pass


# --- tensor archive / encoder ---

class BadMagic(CtNoduleError):
    pass


class UnsupportedVersion(CtNoduleError):
    pass


class MissingTensor(CtNoduleError):
    pass


class ShapeMismatch(CtNoduleError):
    pass


class NonDivisibleInput(CtNoduleError):
    pass


# --- heads / training ---

class InvalidDistribution(CtNoduleError):
    pass


class EmptyTrainingSet(CtNoduleError):
    pass


# --- classifiers ---

class KExceedsDataset(CtNoduleError):
    pass


# --- metrics ---

class LengthMismatch(CtNoduleError):
    pass


class EmptyEvaluation(CtNoduleError):
    pass


class SingleClassInput(CtNoduleError):
    pass


# --- cli / artifacts ---

class MissingArtifact(CtNoduleError):
    pass


class VersionMismatch(CtNoduleError):
    pass
