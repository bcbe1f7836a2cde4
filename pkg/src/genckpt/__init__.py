"""genckpt: generation-based checkpoint/restart with a global commit barrier."""

from .coordinator import CheckpointReport, CkptPhase, Coordinator
from .errors import GenckptError
from .store import GenerationStore, OverwriteStore

__all__ = [
    "CheckpointReport",
    "CkptPhase",
    "Coordinator",
    "GenckptError",
    "GenerationStore",
    "OverwriteStore",
]

__version__ = "0.1.0"
