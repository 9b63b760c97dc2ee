from .client import DEFAULT_TIMEOUT, RpcClient
from .collective import Coordinator, LocalGroup, ProcessGroup, reduce_mean
from .protocol import (
    FULL_FANOUT,
    CollectiveRequest,
    Empty,
    Frame,
    PullRequest,
    PullResponse,
    PushRequest,
    SampleRequest,
    SampleResponse,
    Verb,
    VectorResponse,
    decode_frame,
    encode_frame,
)
from .server import NodeServer

__all__ = [
    "DEFAULT_TIMEOUT",
    "FULL_FANOUT",
    "CollectiveRequest",
    "Coordinator",
    "Empty",
    "Frame",
    "LocalGroup",
    "NodeServer",
    "ProcessGroup",
    "PullRequest",
    "PullResponse",
    "PushRequest",
    "RpcClient",
    "SampleRequest",
    "SampleResponse",
    "Verb",
    "VectorResponse",
    "decode_frame",
    "encode_frame",
    "reduce_mean",
]
