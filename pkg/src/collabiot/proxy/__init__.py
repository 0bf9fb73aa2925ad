from .adapters import (
    AdapterError,
    Bulb,
    Camera,
    Chunks,
    DeviceAdapter,
    InferenceService,
    Lock,
    StatusService,
    make_adapter,
)
from .limiter import TokenBucket, UseCounter
from .proxy import (
    Decision,
    DeviceProxy,
    InvalidatedToken,
    RequestEnvelope,
    Session,
    UnknownCapability,
    WrongAudience,
)
from .scheduler import DispatchQueue, QueueFull, SchedulerPolicy
