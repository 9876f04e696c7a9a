"""Exception hierarchy. Every error carries the module it belongs to so the
CLI can emit one machine-parseable line per failure."""


class FinidError(Exception):
    module = "finid"


class ShapeError(FinidError):
    module = "tensor"


class NumericFault(FinidError):
    module = "tensor"


class TapeError(FinidError):
    module = "tensor"


class ConfigError(FinidError):
    module = "model"


class ManifestError(FinidError):
    module = "data"


class BatchError(FinidError):
    module = "loss"


class TrainError(FinidError):
    module = "trainer"


class CheckpointError(FinidError):
    module = "trainer"


class ProtocolError(FinidError):
    module = "eval"


class StoreError(FinidError):
    module = "catalogue"


class ServiceError(FinidError):
    module = "service"


class CliError(FinidError):
    module = "cli"
