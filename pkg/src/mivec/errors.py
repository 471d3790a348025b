"""Exception hierarchy shared by every stage of the codec."""


class MivecError(Exception):
    """Base class; ``stage`` names the pipeline stage that failed."""

    stage = "mivec"

    def __init__(self, message, stage=None):
        if stage is not None:
            self.stage = stage
        super().__init__(message)

    def __str__(self):
        return f"[{self.stage}] {super().__str__()}"


class ValidationError(MivecError, ValueError):
    stage = "validation"


class ConfigurationError(MivecError, ValueError):
    stage = "config"


class LoadError(MivecError, OSError):
    stage = "load"


class BackendError(MivecError, RuntimeError):
    stage = "explicit"


class TrainingDivergedError(MivecError, RuntimeError):
    stage = "training"


class CorruptStreamError(MivecError, ValueError):
    """A bitstream segment failed to parse or failed its checksum."""

    stage = "bitstream"

    def __init__(self, message, segment=None):
        self.segment = segment or self.stage
        super().__init__(message, stage=self.segment)


class CorruptModelError(CorruptStreamError):
    stage = "implicit"
