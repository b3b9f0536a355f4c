"""Linearizable replication of state-based CRDTs without a leader or a log.

Replicas hold join-semilattice states. Updates merge into a quorum in one
round trip; queries learn a state that every earlier operation has reached,
through an incremental prepare that usually also takes one round trip.
The package bundles the protocol state machine, a deterministic fault-
injecting simulator, an offline safety and linearizability checker, a
networked replica daemon with a blocking client, and benchmarking around
it all. See the ``crdtlin`` command for the operator entry points.
"""

from .checker import (
    GLA_CONDITIONS,
    PreconditionFailed,
    SequentialWitness,
    UnsupportedInput,
    Verdict,
    Witness,
    check_all,
    linearizability_oracle,
    linearize,
)
from .crdt import (
    CausalTaggedState,
    GCounter,
    GSet,
    QueryCommand,
    SemilatticeValue,
    UpdateCommand,
)
from .history import OpRecord, TraceEvent, read_history, write_history
from .protocol import MajorityQuorum, ProtocolConfig, Replica
from .service import (
    ClusterConfig,
    ReplicaClient,
    ReplicaDaemon,
    ReplicaEndpoint,
    load_cluster_config,
)
from .sim import SimConfig, SimResult, Simulation, sim_run

__version__ = "0.1.0"

__all__ = [
    "CausalTaggedState",
    "ClusterConfig",
    "GCounter",
    "GLA_CONDITIONS",
    "GSet",
    "MajorityQuorum",
    "OpRecord",
    "PreconditionFailed",
    "ProtocolConfig",
    "QueryCommand",
    "Replica",
    "ReplicaClient",
    "ReplicaDaemon",
    "ReplicaEndpoint",
    "SemilatticeValue",
    "SequentialWitness",
    "SimConfig",
    "SimResult",
    "Simulation",
    "TraceEvent",
    "UnsupportedInput",
    "UpdateCommand",
    "Verdict",
    "Witness",
    "check_all",
    "linearizability_oracle",
    "linearize",
    "load_cluster_config",
    "read_history",
    "sim_run",
    "write_history",
    "__version__",
]
