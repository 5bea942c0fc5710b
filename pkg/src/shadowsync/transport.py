"""In-process message transport between roles.

Every destination is a registered handler. Delivery adds a fixed latency
and, optionally, waits on a per-destination token bucket so that a server
can be saturated the way a NIC would be. Only request payload bytes are
counted (numpy array fields of the message).
"""
from __future__ import annotations

import dataclasses
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from typing import Any, Callable

import numpy as np


class DeliveryError(RuntimeError):
    """The destination is unknown or has been stopped."""


def payload_nbytes(message) -> int:
    if isinstance(message, np.ndarray):
        return message.nbytes
    if dataclasses.is_dataclass(message):
        return sum(payload_nbytes(getattr(message, f.name)) for f in dataclasses.fields(message))
    if isinstance(message, (list, tuple)):
        return sum(payload_nbytes(m) for m in message)
    return 0


class TokenBucket:
    """Bytes/sec limiter that lets a sender run into debt.

    ``reserve`` never blocks; it returns how long the caller must wait before
    its message counts as delivered. Waiting callers are served in reservation
    order, so offered load above ``rate`` turns into queueing delay.
    """

    def __init__(self, rate: float, burst_seconds: float = 0.01, clock: Callable[[], float] = time.monotonic):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = float(rate)
        self.capacity = self.rate * burst_seconds
        self.clock = clock
        self._tokens = self.capacity
        self._last = clock()
        self._lock = threading.Lock()

    def reserve(self, nbytes: int, now: float | None = None) -> float:
        with self._lock:
            now = self.clock() if now is None else now
            self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
            self._last = now
            self._tokens -= nbytes
            return 0.0 if self._tokens >= 0 else -self._tokens / self.rate


@dataclasses.dataclass
class Endpoint:
    name: str
    handler: Callable[[Any], Any]
    latency_s: float = 0.0
    bucket: TokenBucket | None = None
    slots: threading.BoundedSemaphore | None = None
    executor: ThreadPoolExecutor | None = None
    stopped: bool = False
    bytes_received: int = 0
    messages: int = 0


class Transport:
    def __init__(self, sleep: Callable[[float], None] = time.sleep):
        self._endpoints: dict[str, Endpoint] = {}
        self._lock = threading.Lock()
        self._sleep = sleep

    def register(self, name: str, handler, latency_ms: float = 0.0, bandwidth_cap: float | None = None,
                 workers: int | None = None) -> Endpoint:
        """Add a destination.

        ``workers`` bounds how many requests the handler serves at once and
        sizes the pool used by :meth:`post`.
        """
        ep = Endpoint(
            name,
            handler,
            latency_ms / 1000.0,
            TokenBucket(bandwidth_cap) if bandwidth_cap else None,
            threading.BoundedSemaphore(workers) if workers else None,
            ThreadPoolExecutor(workers, thread_name_prefix=name) if workers else None,
        )
        with self._lock:
            if name in self._endpoints:
                raise ValueError(f"endpoint {name!r} already registered")
            self._endpoints[name] = ep
        return ep

    def endpoint(self, name: str) -> Endpoint:
        try:
            return self._endpoints[name]
        except KeyError:
            raise DeliveryError(f"no endpoint {name!r}") from None

    def send(self, dest: str, message) -> Any:
        """Deliver ``message`` and return the handler's reply."""
        ep = self.endpoint(dest)
        if ep.stopped:
            raise DeliveryError(f"endpoint {dest!r} is stopped")
        n = payload_nbytes(message)
        with self._lock:
            ep.bytes_received += n
            ep.messages += 1
        delay = ep.latency_s
        if ep.bucket is not None:
            delay += ep.bucket.reserve(n)
        if delay > 0:
            self._sleep(delay)
        if ep.stopped:
            raise DeliveryError(f"endpoint {dest!r} stopped during delivery")
        if ep.slots is None:
            return ep.handler(message)
        with ep.slots:
            return ep.handler(message)

    def post(self, dest: str, messages: list) -> Future:
        """Fire-and-acknowledge: deliver ``messages`` in order on the server's pool.

        The returned future resolves to the list of replies.
        """
        ep = self.endpoint(dest)
        if ep.executor is None:
            fut: Future = Future()
            try:
                fut.set_result([self.send(dest, m) for m in messages])
            except BaseException as exc:
                fut.set_exception(exc)
            return fut
        if ep.stopped:
            raise DeliveryError(f"endpoint {dest!r} is stopped")
        return ep.executor.submit(lambda: [self.send(dest, m) for m in messages])

    def stop(self, dest: str) -> None:
        self.endpoint(dest).stopped = True

    def bytes_received(self, prefix: str = "") -> int:
        with self._lock:
            return sum(ep.bytes_received for name, ep in self._endpoints.items() if name.startswith(prefix))

    def shutdown(self) -> None:
        for ep in self._endpoints.values():
            ep.stopped = True
            if ep.executor is not None:
                ep.executor.shutdown(wait=True)


def send_with_retry(transport: Transport, dest: str, message, retries: int = 3, backoff_s: float = 0.01):
    """``send`` with a fixed number of retries on delivery failure."""
    for attempt in range(retries + 1):
        try:
            return transport.send(dest, message)
        except DeliveryError:
            if attempt == retries:
                raise
            time.sleep(backoff_s)
