"""Exception hierarchy shared by every flowsel module."""


class FlowselError(Exception):
    """Base class for all library errors."""


class EmptyDataset(FlowselError):
    pass


class InvalidRecord(FlowselError):
    def __init__(self, record_id, reason="non-finite value"):
        super().__init__(f"invalid record {record_id!r}: {reason}")
        self.record_id = record_id


class ManifestError(FlowselError):
    def __init__(self, line, reason):
        super().__init__(f"manifest line {line}: {reason}")
        self.line = line


class InvalidBudget(FlowselError):
    pass


class InvalidSubset(FlowselError):
    pass


class InvalidRatio(FlowselError):
    pass


class InstanceTooLarge(FlowselError):
    pass


class ShapeError(FlowselError):
    pass


class StageOrderError(FlowselError):
    pass


class InvalidGrouping(FlowselError):
    pass
