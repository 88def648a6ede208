"""Exception hierarchy shared across the toolkit."""


class GestureError(Exception):
    """Base class for all toolkit errors."""


# data
class MalformedAnnotation(GestureError):
    def __init__(self, message, path="$"):
        super().__init__(f"{path}: {message}")
        self.path = path


class UnknownLabel(GestureError):
    pass


class DanglingImageRef(GestureError):
    pass


class UnknownSplit(GestureError):
    pass


class EmptyCrop(GestureError):
    pass


class ImageDecodeError(GestureError):
    pass


# model
class UnknownBackbone(GestureError):
    pass


class PretrainedWeightsUnavailable(GestureError):
    pass


class ShapeMismatch(GestureError, ValueError):
    pass


class VersionMismatch(GestureError):
    pass


class CorruptCheckpoint(GestureError):
    pass


# training
class AllZeroCounts(GestureError, ValueError):
    pass


class LabelOutOfRange(GestureError, ValueError):
    pass


class DivergenceDetected(GestureError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


# evaluation
class LengthMismatch(GestureError, ValueError):
    pass


class IdOutOfRange(GestureError, ValueError):
    pass


class EmptyInput(GestureError, ValueError):
    pass


class MalformedReport(GestureError, ValueError):
    pass


# inference
class MalformedDetections(GestureError):
    pass


class AdapterUnavailable(GestureError):
    pass


class InvalidDetection(GestureError, ValueError):
    pass


# config
class UnknownKey(GestureError, KeyError):
    def __init__(self, key, suggestion=None):
        msg = f"unknown config key {key!r}"
        if suggestion:
            msg += f"; did you mean {suggestion!r}?"
        super().__init__(msg)
        self.key = key
        self.suggestion = suggestion

    def __str__(self):
        return self.args[0]


class ConfigTypeError(GestureError, TypeError):
    pass
