"""Crash-injection hook points consulted by the store and the coordinator.

Production code calls these unconditionally; the default implementation does
nothing.  The fault harness swaps in an injector that raises ``SimulatedCrash``
at a chosen location.
"""

from __future__ import annotations


class SimulatedCrash(BaseException):
    """Abrupt termination of the writer.

    Derives from BaseException so that ordinary ``except Exception`` cleanup
    paths do not run, mirroring a SIGKILL or a wall-time kill.
    """

    def __init__(self, where: str = ""):
        super().__init__(where)
        self.where = where


class FaultHooks:
    """No-op hook set."""

    def hit(self, location: str, **ctx) -> None:
        pass

    def write_budget(self, tag: tuple, offset: int, length: int) -> int | None:
        """Return how many bytes of a pending write may land before a crash.

        ``None`` means the whole write proceeds.  ``tag`` identifies the stream
        (``("image", pid)`` or ``("precious", original_path)``) and ``offset``
        is the stream position of the first byte of this write.
        """
        return None


NO_FAULTS = FaultHooks()
