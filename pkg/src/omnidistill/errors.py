"""Exception hierarchy shared by every stage of the pipeline."""


class DistillError(Exception):
    """Base class for all errors raised by omnidistill."""


class ContextError(DistillError):
    """A transform needs image-size context it was not given."""


class DegenerateScaleError(DistillError):
    """Resampling would produce an empty image."""


class SchemaError(DistillError):
    """Keypoint schema or instance structure is inconsistent."""


class AlignmentError(DistillError):
    """Heatmaps to be averaged do not share shape or RoI."""


class StatisticsError(DistillError):
    pass


class MergeError(DistillError):
    pass


class CalibrationError(DistillError):
    pass


class ScheduleError(DistillError):
    pass


class SamplerError(DistillError):
    pass


class TrainingDivergenceError(DistillError):
    """Loss became NaN or infinite during SGD."""


class PredictorError(DistillError):
    """A predictor failed on a specific image."""

    def __init__(self, image_id, cause):
        super().__init__(f"predictor failed on image {image_id}: {cause}")
        self.image_id = image_id
        self.cause = cause


class InputFormatError(DistillError):
    """A serialized dataset, prediction or config file could not be parsed."""
