"""Exception types shared across the simulator."""


class SimError(Exception):
    """Base class for all simulator errors."""


class LivelockDetected(SimError):
    """Dispatched event count exceeded the configured budget."""


class NoMpsSession(SimError):
    """An MPS client was requested but no MPS session exists."""


class UnknownTsg(SimError):
    pass


class UnknownPid(SimError):
    pass


class UnknownHandle(SimError):
    pass


class OutOfPhysicalPages(SimError):
    pass


class InvalidSize(SimError):
    pass


class KindMismatch(SimError):
    """Operation applied to a VA range of the wrong kind."""


class UnreachableTrigger(SimError):
    """User-level injection of a scenario that user programs cannot reach."""


class ApiRejected(SimError):
    """Dispatch-layer validation refused the operation before any GPU command."""


class AuditViolation(SimError):
    """Reachability audit found a sequence producing an unreachable scenario.

    Carries the full audit report on the `report` attribute.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class NoChannelAttribution(SimError):
    """A fault record that must carry a channel identity does not."""


class InvalidInterval(SimError):
    """Snapshot synchronization interval must be at least 1."""


class RingSaturated(SimError):
    """Snapshot ring is full of unconsumed live deltas."""


class NoSnapshotData(SimError):
    """No snapshot was ever published for the crashed instance."""


class KvPoolExhausted(SimError):
    pass


class ParseError(SimError):
    """Scenario file could not be parsed; carries a 1-based line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ExpectationFailed(SimError):
    pass
