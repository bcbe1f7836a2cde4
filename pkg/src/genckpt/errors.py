"""Exception hierarchy shared across the package."""


class GenckptError(Exception):
    """Base class for all operational errors raised by genckpt."""


# store
class StorageError(GenckptError):
    pass


class StaleGeneration(GenckptError):
    pass


class DuplicateStaging(GenckptError):
    pass


class DuplicateImage(GenckptError):
    pass


class DuplicatePrecious(GenckptError):
    pass


class IncompleteGeneration(GenckptError):
    pass


class CorruptImage(GenckptError):
    pass


class NotFound(GenckptError):
    pass


class ManifestFormatError(GenckptError):
    pass


# coordinator / protocol
class Busy(GenckptError):
    pass


class RestoreRefused(GenckptError):
    pass


class ProtocolError(GenckptError):
    pass


class AgentUnreachable(GenckptError):
    pass


class IllegalTransition(GenckptError):
    pass


# agent
class FdExhaustion(GenckptError):
    pass


class SnapshotRace(GenckptError):
    pass


class ImageFormatError(GenckptError):
    pass


# precious
class DeleteError(GenckptError):
    pass


class CollectError(GenckptError):
    def __init__(self, path, reason=""):
        super().__init__(f"cannot collect precious file {path!r}: {reason}")
        self.path = path


class PolicyError(GenckptError):
    pass


# scheduler
class TelemetryError(GenckptError):
    pass


class ModelError(GenckptError):
    pass


# simworkload / harness
class UnknownPreset(GenckptError):
    pass


class HarnessError(GenckptError):
    pass


class ValidationWarning(UserWarning):
    """Emitted when a committed generation fails validation during recovery."""
