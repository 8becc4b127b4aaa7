"""Gated two-stream video classification trained with federated averaging."""

__version__ = "0.1.0"

from .autodiff import Tensor, conv3d, dense, depthwise_separable_conv3d, maxpool3d  # noqa: E402
from .federated import (  # noqa: E402
    ClientShard, FedConfig, RoundReport, fed_train, fedavg_aggregate, run_round, stratified_partition,
)
from .ingest import frame_difference, make_input, synth_dataset, to_dataset  # noqa: E402
from .metrics import accuracy, roc_auc  # noqa: E402
from .model import ArchConfig, ModelParams, build_model, count_params  # noqa: E402
from .schedule import OneCycleSchedule, lr_range_test, one_cycle_lr, suggest_bounds  # noqa: E402
