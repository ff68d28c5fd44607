"""In-process laboratory for data-parallel training under parameter-server
failures: five recovery strategies, scripted failure injection, and metric
export, all on a deterministic simulated-time kernel.
"""

from .chaos import FailureEvent, FailurePlan, Supervisor
from .checkpoint import restore_latest, save_checkpoint
from .coord import CoordService, lock_acquire, lock_release
from .data import Batch, Dataset, load_idx, save_idx, shard, synthetic
from .metrics import MetricLog, MetricRecord, RunTrace
from .nn import (GradientUpdate, LrPolicy, ModelSpec, ParamVector,
                 apply_gradients, deserialize_params, evaluate, fashion_cnn,
                 init_params, loss_and_grad, mlp, serialize_params, small_cnn)
from .objstore import ObjectRef, ObjectStore
from .strategies import (ChainDeadError, RunResult, StrategyConfig,
                         run_async_checkpoint, run_chain, run_stateless,
                         run_strategy, run_sync_checkpoint)

__version__ = "0.1.0"
