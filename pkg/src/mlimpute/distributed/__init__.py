"""Master/worker execution where each site keeps its rows."""

from .master import DistributedRun, DistributedSvd, Master
from .protocol import KINDS, Message, decode, encode
from .session import (Tap, check_privacy, distributed_impute, distributed_power_method,
                      distributed_rank_q_svd, raw_site_matrices, run_session)
from .transport import (MasterEndpoint, in_process_bus, tcp_connect, tcp_line_transport)
from .worker import WorkerSite

__all__ = [
    "DistributedRun", "DistributedSvd", "KINDS", "Master", "MasterEndpoint", "Message",
    "Tap", "WorkerSite", "check_privacy", "decode", "distributed_impute",
    "distributed_power_method", "distributed_rank_q_svd", "encode", "in_process_bus",
    "raw_site_matrices", "run_session", "tcp_connect", "tcp_line_transport",
]
