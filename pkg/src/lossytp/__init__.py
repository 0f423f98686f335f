"""Neuron-group tensor parallelism over lossy links, at desk scale."""

__version__ = "0.1.0"

from .model import (Activation, BlockKind, GroupActivation, KVCache, ModelSpec,
                    RankList, WeightStore, compute_group, dense_forward,
                    drop_experiment, init_model, merge_partials,
                    oracle_importance)
from .scheduler import (CostModel, DeviceProfile, Schedule, brute_force_ilp,
                        comp_greedy, estimate_latency, min_max, plr_map,
                        ratios_to_counts)
from .sap import (CalibrationSet, PredictorParams, PredictorSet,
                  collect_calibration, predict_ranks, train)
from .transport import (Channel, ChannelConfig, Datagram, GatherResult, Inbox,
                        Network, SimClock, TimeoutPolicy, gather_with_timeout)
from .runtime import (DeviceRuntime, GenerateResult, RuntimeConfig,
                      StageDurations, TokenStep, generate, pipeline_schedule,
                      resolve_assignment)
