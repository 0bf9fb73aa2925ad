"""Emulated device adapters behind the hardware-independent API.

An adapter maps generic method names to capability actions and executes
them. ``execute`` holds only the device logic; emulated service time is
reported by ``service_time`` so that callers can wait for it in real time
(the RPC server) or in virtual time (the scenario simulator).
"""

from __future__ import annotations

import base64
import hashlib
from dataclasses import dataclass
from typing import Any, Iterable, Mapping


class AdapterError(Exception):
    def __init__(self, device_type: str, method: str, message: str):
        self.device_type = device_type
        self.method = method
        super().__init__(f"{device_type}.{method}: {message}")


@dataclass(frozen=True)
class Chunks:
    """A streamed result, delivered as one response message per chunk."""

    items: tuple[Any, ...]


class DeviceAdapter:
    device_type: str = "device"
    # method -> capability action
    api: Mapping[str, str] = {}
    parallelism: int = 1

    def __init__(self, service_times: Mapping[str, float] | None = None, parallelism: int | None = None):
        self._service_times = dict(service_times or {})
        if parallelism is not None:
            if parallelism < 1:
                raise ValueError("parallelism must be >= 1")
            self.parallelism = parallelism

    @property
    def methods(self) -> frozenset[str]:
        return frozenset(self.api)

    @property
    def capabilities(self) -> frozenset[str]:
        return frozenset(f"{self.device_type}_{a}" for a in self.api.values())

    def capability_of(self, method: str) -> str:
        try:
            return f"{self.device_type}_{self.api[method]}"
        except KeyError:
            raise AdapterError(self.device_type, method, "unknown method") from None

    def service_time(self, method: str, args: Any = None) -> float:
        return self._service_times.get(method, 0.0)

    def execute(self, method: str, args: Any = None) -> Any:
        if method not in self.api:
            raise AdapterError(self.device_type, method, "unknown method")
        handler = getattr(self, "do_" + method)
        try:
            return handler(args if args is not None else {})
        except AdapterError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise AdapterError(self.device_type, method, str(exc)) from exc


class Bulb(DeviceAdapter):
    device_type = "bulb"
    api = {"turn_on": "switch", "turn_off": "switch", "set_brightness": "brightness", "get_status": "status"}

    def __init__(self, **kw):
        super().__init__(**kw)
        self.on = False
        self.brightness = 100

    def do_turn_on(self, args):
        self.on = True
        return {"on": True}

    def do_turn_off(self, args):
        self.on = False
        return {"on": False}

    def do_set_brightness(self, args):
        level = int(args["level"])
        if not 0 <= level <= 100:
            raise ValueError("brightness must be within 0..100")
        self.brightness = level
        return {"brightness": level}

    def do_get_status(self, args):
        return {"on": self.on, "brightness": self.brightness}


class Lock(DeviceAdapter):
    device_type = "lock"
    api = {"lock": "lock", "unlock": "unlock", "set_conf": "setconf", "get_status": "status"}

    def __init__(self, actuation_delay: float = 0.0, **kw):
        times = {"lock": actuation_delay, "unlock": actuation_delay}
        times.update(kw.pop("service_times", None) or {})
        super().__init__(service_times=times, **kw)
        self.locked = True
        self.config: dict[str, Any] = {}
        self.actuations = 0

    def do_lock(self, args):
        self.locked = True
        self.actuations += 1
        return {"locked": True}

    def do_unlock(self, args):
        self.locked = False
        self.actuations += 1
        return {"locked": False}

    def do_set_conf(self, args):
        if not isinstance(args, dict):
            raise ValueError("configuration must be an object")
        self.config.update(args)
        return {"config": dict(self.config)}

    def do_get_status(self, args):
        return {"locked": self.locked}


class Camera(DeviceAdapter):
    device_type = "camera"
    api = {"live_stream": "stream", "retrieve": "retrieve", "rotate": "rotate", "get_status": "status"}

    def __init__(self, frame_bytes: int = 256, frame_interval: float = 0.0, **kw):
        super().__init__(**kw)
        self.frame_bytes = frame_bytes
        self.frame_interval = frame_interval
        self.angle = 0
        self._frame_no = 0

    def _frame(self) -> str:
        self._frame_no += 1
        seed = hashlib.sha256(f"frame-{self._frame_no}".encode()).digest()
        blob = (seed * (self.frame_bytes // len(seed) + 1))[: self.frame_bytes]
        return base64.b64encode(blob).decode("ascii")

    def service_time(self, method, args=None):
        if method == "live_stream":
            frames = int((args or {}).get("frames", 1))
            return self._service_times.get(method, 0.0) + frames * self.frame_interval
        return super().service_time(method, args)

    def do_live_stream(self, args):
        frames = int(args.get("frames", 1))
        if frames < 1:
            raise ValueError("frames must be >= 1")
        return Chunks(tuple({"seq": self._frame_no + 1, "frame": self._frame()} for _ in range(frames)))

    def do_retrieve(self, args):
        return {"seq": self._frame_no + 1, "frame": self._frame()}

    def do_rotate(self, args):
        self.angle = (self.angle + int(args.get("degrees", 90))) % 360
        return {"angle": self.angle}

    def do_get_status(self, args):
        return {"angle": self.angle, "frames": self._frame_no}


# back-solved from ~2,769 req/min aggregate on a serial inference device
DEFAULT_INFERENCE_TIME = 0.018


class InferenceService(DeviceAdapter):
    """DNN inference emulated by a fixed service time."""

    api = {"inference_service": "getinference", "get_status": "status"}

    def __init__(self, device_type: str = "laptop", service_time: float = DEFAULT_INFERENCE_TIME, **kw):
        times = {"inference_service": service_time}
        times.update(kw.pop("service_times", None) or {})
        super().__init__(service_times=times, **kw)
        self.device_type = device_type
        self.served = 0

    def do_inference_service(self, args):
        self.served += 1
        digest = hashlib.sha256(repr(sorted(args.items())).encode()).hexdigest()
        return {"label": f"class-{int(digest[:4], 16) % 1000}", "n": self.served}

    def do_get_status(self, args):
        return {"served": self.served}


class StatusService(DeviceAdapter):
    """Benchmark device with a ping, an I/O-bound and a compute-bound call."""

    device_type = "server"
    api = {"get_status": "status", "load_image": "loadimage", "process_image": "processimage"}

    def __init__(self, image_bytes: int = 64 * 1024, process_time: float = 0.02, **kw):
        times = {"process_image": process_time}
        times.update(kw.pop("service_times", None) or {})
        super().__init__(service_times=times, **kw)
        self.image = base64.b64encode(bytes(range(256)) * (image_bytes // 256)).decode("ascii")

    def do_get_status(self, args):
        return {"ok": True}

    def do_load_image(self, args):
        return {"image": self.image}

    def do_process_image(self, args):
        return {"label": "class-0"}


ADAPTERS = {
    "bulb": Bulb,
    "lock": Lock,
    "camera": Camera,
    "inference": InferenceService,
    "laptop": InferenceService,
    "server": StatusService,
}


def make_adapter(kind: str, **config: Any) -> DeviceAdapter:
    try:
        cls = ADAPTERS[kind]
    except KeyError:
        raise ValueError(f"no emulated adapter for {kind!r}; known: {sorted(ADAPTERS)}") from None
    if kind == "laptop":
        config.setdefault("device_type", "laptop")
    return cls(**config)


def adapter_types() -> Iterable[str]:
    return sorted(ADAPTERS)
