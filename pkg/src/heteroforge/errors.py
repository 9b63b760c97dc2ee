"""Exception hierarchy shared by every heteroforge module."""


class HeteroForgeError(Exception):
    """Base class for all library errors."""


class StructuralError(HeteroForgeError, ValueError):
    """Malformed graph, feature or mini-batch structure."""


class RangeError(HeteroForgeError, IndexError):
    """An ID outside its declared range."""


class ConfigurationError(HeteroForgeError, ValueError):
    pass


class OwnershipError(HeteroForgeError, KeyError):
    """Local access to rows that this shard does not own."""

    def __str__(self):
        return str(self.args[0]) if self.args else "ownership error"


class StateError(HeteroForgeError, RuntimeError):
    pass


class GraphIOError(HeteroForgeError, OSError):
    """Missing or corrupt on-disk file; the message carries the path."""


class ProtocolError(HeteroForgeError):
    """Wire-format violation (bad magic, unknown verb, truncated payload)."""


class TransportError(HeteroForgeError, ConnectionError):
    """Peer unreachable, connection lost, or request timed out."""

    def __init__(self, message, peer=None):
        super().__init__(message)
        self.peer = peer


class RemoteError(HeteroForgeError):
    """The peer processed the request and reported a failure."""


class CollectiveError(HeteroForgeError):
    pass


class IncompleteBatchError(HeteroForgeError):
    pass


class PipelineError(HeteroForgeError):
    """A pipeline stage failed for one mini-batch."""

    def __init__(self, seq_no, cause):
        super().__init__(f"mini-batch {seq_no} failed: {cause!r}")
        self.seq_no = seq_no
        self.cause = cause
