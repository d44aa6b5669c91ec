class TrafficFlowError(Exception):
    """Base class for every error raised by the pipeline."""


class GeometryError(TrafficFlowError):
    pass


class OutOfCapture(TrafficFlowError):
    pass


class DegenerateDirection(TrafficFlowError):
    pass


class MalformedRecord(TrafficFlowError):
    pass


class EmptyInput(TrafficFlowError):
    pass


class EmptyField(TrafficFlowError):
    pass


class NoPath(TrafficFlowError):

    def __init__(self, message, channel_id=None):
        super(NoPath, self).__init__(message)
        self.channel_id = channel_id


class TooShort(TrafficFlowError):
    pass


class EmptyStation(TrafficFlowError):
    pass


class SolverFailure(TrafficFlowError):
    pass


class NoReference(TrafficFlowError):

    def __init__(self, message, channel_id=None):
        super(NoReference, self).__init__(message)
        self.channel_id = channel_id


class ConfigError(TrafficFlowError):
    pass


class MissingArtifact(TrafficFlowError):
    pass
