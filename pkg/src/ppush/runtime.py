"""
Particle runtime: device event loops, particle handles and hooks.

A `ParticleNN` owns one `DeviceEventLoop` worker thread per simulated device.
The coordinator (whoever holds the handle) talks to loops by putting
`Message`s on their inboxes and waiting on the returned `EventHandle`s.
Loops talk to each other only through `Get` requests.

Each loop keeps at most ``active_capacity`` particles resident in its device
arena; the rest sit in a per-loop host store and are swapped in on demand
under an LRU policy.  Parameters and optimizer state are copied on every
swap, so the cost of context switching is real.

A hook blocked in ``ParticleContext.join`` keeps servicing inbound ``Get``
requests and the replies to its own gets (and nothing else), which is what
lets every particle gather every other particle without deadlocking.
"""

from __future__ import annotations

import copy
import enum
import itertools
import logging
import queue
import threading
import time
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .autodiff import (
    SGD,
    MlpArch,
    ParamSet,
    Tensor,
    backward,
    forward,
    resolve_loss,
)

log = logging.getLogger(__name__)

_event_ids = itertools.count()


class ParticleError(RuntimeError):
    pass


class UnknownParticleError(ParticleError, KeyError):
    pass


class HookError(ParticleError):
    pass


class EventStateError(ParticleError):
    pass


class EventHandle:
    """Completion slot for one request; join it exactly once."""

    def __init__(self, target_pid: int | None = None):
        self.event_id = next(_event_ids)
        self.target_pid = target_pid
        self._done = threading.Event()
        self._payload: Any = None
        self._error: BaseException | None = None
        self._joined = False

    def resolve(self, payload: Any = None) -> None:
        self._payload = payload
        self._done.set()

    def fail(self, exc: BaseException) -> None:
        self._error = exc
        self._done.set()

    def done(self) -> bool:
        return self._done.is_set()

    def wait(self, timeout: float | None = None) -> bool:
        return self._done.wait(timeout)

    def join(self) -> Any:
        self._done.wait()
        if self._joined:
            raise EventStateError(f"event {self.event_id} was already joined")
        self._joined = True
        if self._error is not None:
            raise self._error
        return self._payload

    def __repr__(self) -> str:
        state = "done" if self.done() else "pending"
        return f"EventHandle({self.event_id}, {state})"


class Kind(enum.Enum):
    INIT = "init"
    STEP = "step"
    FORWARD = "forward"
    GET = "get"
    HOOK_REGISTER = "hook_register"
    HOOK_TRIGGER = "hook_trigger"
    REPLY = "reply"
    SHUTDOWN = "shutdown"


@dataclass
class Message:
    kind: Kind
    reply_to: EventHandle | None
    pid: int | None = None
    body: dict = field(default_factory=dict)
    # device id of the sending loop; None means the coordinator
    sender: int | None = None


class Residency(enum.Enum):
    ACTIVE = "active"
    INACTIVE = "inactive"


@dataclass
class ParticleState:
    pid: int
    params: ParamSet | None
    optimizer: SGD | None
    hooks: dict[str, tuple[Callable, dict]] = field(default_factory=dict)
    residency: Residency = Residency.INACTIVE


class ActiveSet:
    """Recency-ordered set of resident pids with fixed capacity (LRU)."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("active set capacity must be >= 1")
        self.capacity = capacity
        self._order: OrderedDict[int, None] = OrderedDict()

    def __contains__(self, pid: int) -> bool:
        return pid in self._order

    def __len__(self) -> int:
        return len(self._order)

    def touch(self, pid: int) -> None:
        self._order.move_to_end(pid)

    def has_room(self, pinned: frozenset | set = frozenset()) -> bool:
        return len(self._order) < self.capacity or any(p not in pinned for p in self._order)

    def admit(self, pid: int, pinned: frozenset | set = frozenset()) -> int | None:
        """Insert pid as most recent; returns the evicted pid if the set was full.

        The victim is the least recently used pid that is not pinned.
        """
        victim = None
        if len(self._order) >= self.capacity:
            victim = next((p for p in self._order if p not in pinned), None)
            if victim is None:
                raise RuntimeError("active set is full of pinned particles")
            del self._order[victim]
        self._order[pid] = None
        return victim

    def order(self) -> list[int]:
        return list(self._order)


class ParticleContext:
    """What a hook sees: its own particle plus get/join access to the others."""

    def __init__(self, loop: "DeviceEventLoop", pid: int):
        self._loop = loop
        self.pid = pid

    @property
    def device(self) -> int:
        return self._loop.device_id

    def _check_thread(self) -> None:
        if threading.current_thread() is not self._loop:
            raise ParticleError("particle context used outside its owning event loop")

    def particles(self) -> list[int]:
        return sorted(self._loop.registry)

    def get(self, pid: int) -> EventHandle:
        self._check_thread()
        return self._loop.request_get(pid)

    def join(self, events: Sequence[EventHandle]) -> dict[int, ParamSet]:
        self._check_thread()
        self._loop.wait_serving_gets(events)
        return {e.target_pid: e.join() for e in events}

    def step(self, loss, data, label, grad_only: bool = False) -> float:
        self._check_thread()
        return self._loop.run_step(self.pid, loss, data, label, grad_only)

    def forward(self, data) -> Tensor:
        self._check_thread()
        return self._loop.run_forward(self.pid, data)

    def module_params(self) -> ParamSet:
        """Live (mutable) parameters of this particle."""
        self._check_thread()
        return self._loop.activate(self.pid).params


class DeviceEventLoop(threading.Thread):
    def __init__(self, device_id: int, arch: MlpArch, active_capacity: int):
        super().__init__(name=f"device-loop-{device_id}", daemon=True)
        self.device_id = device_id
        self.arch = arch
        self.inbox: queue.SimpleQueue[Message] = queue.SimpleQueue()
        self.peers: list[DeviceEventLoop] = []
        self.registry: dict[int, int] = {}
        self.particles: dict[int, ParticleState] = {}
        self.active = ActiveSet(active_capacity)
        self.host_store: dict[int, tuple[ParamSet, SGD | None]] = {}
        self.evictions: list[int] = []
        self.loads: list[int] = []
        # particle whose hook is running; never evicted mid-hook
        self._pinned: set[int] = set()
        self._deferred: deque[Message] = deque()

    # ---- residency

    def activate(self, pid: int) -> ParticleState:
        st = self.particles[pid]
        if pid in self.active:
            self.active.touch(pid)
            return st
        victim = self.active.admit(pid, self._pinned)
        if victim is not None:
            self._evict(victim)
        params, opt = self.host_store.pop(pid)
        st.params = params.copy()
        st.optimizer = copy.deepcopy(opt)
        st.residency = Residency.ACTIVE
        self.loads.append(pid)
        return st

    def _evict(self, pid: int) -> None:
        st = self.particles[pid]
        self.host_store[pid] = (st.params.copy(), copy.deepcopy(st.optimizer))
        st.params = None
        st.optimizer = None
        st.residency = Residency.INACTIVE
        self.evictions.append(pid)

    def snapshot(self, pid: int) -> ParamSet:
        st = self.particles.get(pid)
        if st is None:
            raise UnknownParticleError(pid)
        if st.residency is Residency.ACTIVE or self.active.has_room(self._pinned):
            return self.activate(pid).params.copy()
        # every slot is pinned by a running hook: read from the host store
        return self.host_store[pid][0].copy()

    def pending_messages(self) -> int:
        return self.inbox.qsize() + len(self._deferred)

    # ---- operations (run on this thread)

    def run_step(self, pid, loss, data, label, grad_only: bool = False) -> float:
        st = self.activate(pid)
        pred = forward(self.arch, st.params, data)
        st.params.zero_grad()
        loss_t = resolve_loss(loss)(pred, label)
        backward(loss_t)
        if not grad_only and st.optimizer is not None:
            st.optimizer.step(st.params)
        return loss_t.item()

    def run_forward(self, pid, data) -> Tensor:
        st = self.activate(pid)
        return forward(self.arch, st.params, data, record=False)

    def request_get(self, pid: int) -> EventHandle:
        owner = self.registry.get(pid)
        if owner is None:
            raise UnknownParticleError(pid)
        ev = EventHandle(target_pid=pid)
        if owner == self.device_id:
            ev.resolve(self.snapshot(pid))
        else:
            self.peers[owner].inbox.put(Message(Kind.GET, ev, pid=pid, sender=self.device_id))
        return ev

    def wait_serving_gets(self, events: Iterable[EventHandle]) -> None:
        events = list(events)
        while not all(e.done() for e in events):
            msg = self.inbox.get()
            if msg.kind in (Kind.GET, Kind.REPLY):
                self._handle(msg)
            else:
                self._deferred.append(msg)

    # ---- dispatch

    def run(self) -> None:
        while True:
            msg = self._deferred.popleft() if self._deferred else self.inbox.get()
            if msg.kind is Kind.SHUTDOWN:
                msg.reply_to.resolve(None)
                return
            self._handle(msg)

    def _handle(self, msg: Message) -> None:
        ev = msg.reply_to
        if msg.kind is Kind.REPLY:
            if msg.body["error"] is not None:
                ev.fail(msg.body["error"])
            else:
                ev.resolve(msg.body["payload"])
            return
        payload, error = None, None
        try:
            payload = self._dispatch(msg)
        except Exception as exc:  # error travels back through the event
            log.debug("loop %d: %s failed: %r", self.device_id, msg.kind.value, exc)
            error = exc
        if msg.kind is Kind.GET and msg.sender is not None:
            # a peer loop resolves its own event when it consumes the reply
            self.peers[msg.sender].inbox.put(
                Message(Kind.REPLY, ev, body={"payload": payload, "error": error}))
        elif ev is not None:
            if error is not None:
                ev.fail(error)
            else:
                ev.resolve(payload)

    def _dispatch(self, msg: Message) -> Any:
        b = msg.body
        if msg.kind is Kind.STEP:
            return self.run_step(msg.pid, b["loss"], b["data"], b["label"], b["grad_only"])
        if msg.kind is Kind.FORWARD:
            return self.run_forward(msg.pid, b["data"])
        if msg.kind is Kind.GET:
            return self.snapshot(msg.pid)
        if msg.kind is Kind.HOOK_TRIGGER:
            st = self.particles[msg.pid]
            try:
                proc, state = st.hooks[b["name"]]
            except KeyError:
                raise HookError(f"particle {msg.pid} has no hook {b['name']!r}") from None
            self.activate(msg.pid)
            self._pinned.add(msg.pid)
            try:
                return proc(ParticleContext(self, msg.pid), state)
            finally:
                self._pinned.discard(msg.pid)
        if msg.kind is Kind.INIT:
            self.registry[msg.pid] = b["device"]
            if b["device"] == self.device_id:
                self.particles[msg.pid] = ParticleState(msg.pid, None, None)
                self.host_store[msg.pid] = (b["params"], b["optimizer"])
            return None
        if msg.kind is Kind.HOOK_REGISTER:
            st = self.particles[msg.pid]
            if b["name"] in st.hooks:
                raise HookError(f"hook {b['name']!r} already registered on particle {msg.pid}")
            st.hooks[b["name"]] = (b["proc"], b["state"])
            return None
        raise ParticleError(f"unhandled message kind {msg.kind}")


class ParticleNN:
    """Coordinator handle: creates particles and drives them asynchronously.

    Use as a context manager so the worker threads are shut down::

        with ParticleNN(arch, num_devices=2, active_capacity=4) as pnn:
            pnn.pinit(SGD(1e-2))
            loss = pnn.pstep(0, "mse", x, y, sync=True)
    """

    def __init__(self, arch: MlpArch, num_devices: int = 1, active_capacity: int = 4):
        if num_devices < 1:
            raise ValueError("need at least one device")
        if active_capacity < 1:
            raise ValueError("active capacity must be >= 1")
        self.arch = arch
        self.num_devices = num_devices
        self.active_capacity = active_capacity
        self.registry: dict[int, int] = {}
        self._next_pid = 0
        self.loops = [DeviceEventLoop(d, arch, active_capacity) for d in range(num_devices)]
        for loop in self.loops:
            loop.peers = self.loops
            loop.start()
        self._closed = False

    def __enter__(self) -> "ParticleNN":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()

    # ---- plumbing

    def _owner(self, pid: int) -> DeviceEventLoop:
        if self._closed:
            raise ParticleError("particle neural network has been shut down")
        try:
            return self.loops[self.registry[pid]]
        except KeyError:
            raise UnknownParticleError(pid) from None

    def _send(self, pid: int, kind: Kind, sync: bool, **body):
        ev = EventHandle(target_pid=pid)
        self._owner(pid).inbox.put(Message(kind, ev, pid=pid, body=body))
        return ev.join() if sync else ev

    # ---- public API

    def num_particles(self) -> int:
        return len(self.registry)

    def particles(self) -> list[int]:
        return sorted(self.registry)

    def pinit(self, optimizer: SGD | None = None, device: int | None = None,
              seed: int | None = None, params: ParamSet | None = None) -> int:
        """Create a particle; returns its pid.

        Placement defaults to round-robin by pid.  Parameters are freshly
        initialized from ``seed`` (default: the pid) unless ``params`` is given.
        """
        pid = self._next_pid
        if device is None:
            device = pid % self.num_devices
        if not 0 <= device < self.num_devices:
            raise ValueError(f"device {device} out of range for {self.num_devices} devices")
        if params is None:
            params = ParamSet.init(self.arch, pid if seed is None else seed)
        else:
            self.arch.check(params)
            params = params.copy()
        self._next_pid += 1
        self.registry[pid] = device
        events = []
        for loop in self.loops:
            ev = EventHandle(target_pid=pid)
            loop.inbox.put(Message(Kind.INIT, ev, pid=pid, body={
                "device": device, "params": params, "optimizer": copy.deepcopy(optimizer),
            }))
            events.append(ev)
        self.pjoin(events)
        return pid

    def pstep(self, pid: int, loss, data, label, sync: bool = False, grad_only: bool = False):
        """forward, zero grads, loss, backward, update.  ``grad_only`` skips the update."""
        return self._send(pid, Kind.STEP, sync, loss=loss,
                          data=np.asarray(data, dtype=np.float64),
                          label=np.asarray(label, dtype=np.float64), grad_only=grad_only)

    def pforward(self, pid: int, data, sync: bool = False):
        return self._send(pid, Kind.FORWARD, sync, data=np.asarray(data, dtype=np.float64))

    def pget(self, pid: int, sync: bool = True):
        """Snapshot (parameters and gradients) of a particle, from the coordinator."""
        return self._send(pid, Kind.GET, sync)

    def phook_register(self, pid: int, name: str, proc: Callable[[ParticleContext, dict], Any],
                       state: dict | None = None) -> None:
        self._send(pid, Kind.HOOK_REGISTER, True, name=name, proc=proc,
                   state={} if state is None else state)

    def psend(self, pid: int, name: str, sync: bool = False):
        return self._send(pid, Kind.HOOK_TRIGGER, sync, name=name)

    def pjoin(self, events: Sequence[EventHandle]) -> list:
        for ev in events:
            ev.wait()
        return [ev.join() for ev in events]

    def shutdown(self, timeout: float = 10.0) -> None:
        if self._closed:
            return
        self._closed = True
        events = []
        for loop in self.loops:
            ev = EventHandle()
            loop.inbox.put(Message(Kind.SHUTDOWN, ev))
            events.append(ev)
        deadline = time.monotonic() + timeout
        for loop in self.loops:
            loop.join(max(0.0, deadline - time.monotonic()))
        for ev in events:
            ev.join()
        alive = [loop.name for loop in self.loops if loop.is_alive()]
        if alive:
            raise ParticleError(f"event loops did not stop: {alive}")
