"""servesim: deterministic discrete-event simulator for heterogeneous and
disaggregated LLM serving clusters."""

from .config import (ClusterSpec, DeviceSpec, LinkSpec, MemoryTierSpec,
                     ModelSpec, MoESpec, MSGSpec, NodeSpec, OffloadRule,
                     load_cluster_config, load_workload_config, validate)
from .engine import Engine, SimulationReport, plan, simulate
from .memory import MsgMemory, RadixPrefixCache, kv_bytes_per_token
from .metrics import build_timeseries, summarize, write_outputs
from .msg import Batch, ModelServingGroup, Request, route_experts
from .power import EnergyLedger, fill_gaps
from .profiles import (OperatorKey, OperatorRecord, ProfileTable,
                       load_profile, save_profile, synth_profile)
from .sysnet import (FlowNetwork, SystemSimulator, Topology, collective_time,
                     max_min_shares)
from .workload import RequestSpec, Trace, generate, load_trace, save_trace

__version__ = "0.1.0"
