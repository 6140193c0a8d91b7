"""Exception types shared across the package."""


class XattnError(Exception):
    """Base class for all package errors."""


class DataError(XattnError):
    """Input data could not be read or joined (CLI exit code 2)."""


class NumericError(XattnError):
    """A numeric failure: NaN/Inf in a value or gradient (CLI exit code 3)."""


class ShapeMismatch(XattnError, ValueError):
    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class NonFinite(NumericError):
    pass


class NonFiniteLoss(NumericError):
    def __init__(self, batch_id, value):
        self.batch_id = batch_id
        super().__init__(f"non-finite loss {value!r} at batch {batch_id}")


class EmptyCorpus(DataError):
    pass


class MissingWord(DataError, KeyError):
    def __init__(self, word):
        self.word = word
        super().__init__(word)

    def __str__(self):
        return f"word not in embedding table: {self.word!r}"


class UninitializedRunningStats(XattnError):
    """Inference requested before any batch-norm statistics were collected."""


class NotEnoughRois(XattnError, ValueError):
    pass


class EmptyDataset(DataError):
    pass


class TooFewSamples(DataError):
    pass


class DegenerateBox(XattnError, ValueError):
    pass


class MissingGroundTruth(DataError):
    def __init__(self, image_id):
        self.image_id = image_id
        super().__init__(f"no ground-truth boxes for image {image_id!r}")


class ParseError(DataError):
    def __init__(self, path, line, msg):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {msg}")


class IdMismatch(DataError):
    def __init__(self, image_id, msg="id does not join across inputs"):
        self.image_id = image_id
        super().__init__(f"{image_id!r}: {msg}")


class FeatureDimMismatch(DataError):
    pass


class IoFailure(DataError):
    pass


class BadMagic(DataError):
    pass


class VersionUnsupported(DataError):
    pass
