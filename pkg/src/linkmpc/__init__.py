"""Channel-aware GP-MPC for a leader-follower connected-vehicle pair."""

from .channel import (ChannelField, DelayBump, Mailbox, Packet,
                      effective_horizon, latest_packet, prune, transmit,
                      true_delay)
from .dynamics import (Bounds, CollisionError, ControlInput, VehicleState,
                       gap, step, ttc)
from .gp import (Hyperparameters, TrainingSet, aggregate, fit_hyperparameters,
                 hyperparameter_grid, kernel, kernel_vector, gram,
                 log_marginal_likelihood, posterior)
from .kernel_cache import (DegenerateSamplingError, KernelCache, append_point,
                           remove_first, slide_window)
from .mpc import (Controller, CostBreakdown, MpcProblem, MpcSolution, Weights,
                  channel_cost, max_braking, objective_breakdown,
                  receding_step, solve, stage_cost)
from .reachable import (IntervalBox, ReachTube, reach_n, reach_one,
                        select_training)
from .sim import (ConfigError, ScenarioConfig, ScenarioTrace, TraceRow, World,
                  generate_training_data, run_paired, run_scenario)

__version__ = "0.1.0"
