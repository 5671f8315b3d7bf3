"""Energy-aware scheduling of asynchronous federated training onto app co-runs."""

from .core import (
    Action,
    AppEvent,
    AppStatus,
    AppTimeline,
    Decision,
    DeviceCatalog,
    DeviceProfile,
    ProfileError,
    QueueState,
    SlotConfig,
    energy_saving,
    load_device_table,
    power_of,
    update_queues,
)
from .gradient import ModelState, gradient_gap, predict_future_params
from .offline import OfflineInstance, OfflineUser, knapsack_dp
from .online import ControllerConfig, ParameterServer, decide
from .sim import ImmediateScheduling, OfflineKnapsack, Online, SyncSGD, run

__version__ = "0.1.0"

__all__ = [
    "Action",
    "AppEvent",
    "AppStatus",
    "AppTimeline",
    "ControllerConfig",
    "Decision",
    "DeviceCatalog",
    "DeviceProfile",
    "ImmediateScheduling",
    "ModelState",
    "OfflineInstance",
    "OfflineKnapsack",
    "OfflineUser",
    "Online",
    "ParameterServer",
    "ProfileError",
    "QueueState",
    "SlotConfig",
    "SyncSGD",
    "decide",
    "energy_saving",
    "gradient_gap",
    "knapsack_dp",
    "load_device_table",
    "power_of",
    "predict_future_params",
    "run",
    "update_queues",
]
