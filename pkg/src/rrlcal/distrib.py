"""Master/minion experience transport.

Frames are ``[4-byte big-endian length][1-byte tag][payload]`` where the
length counts tag + payload and the first payload byte is the protocol
version. See PROTOCOL.md for the byte layout of every message.

The master hands out work items (episode count, cycle id, seed) and merges
the returned batches by work-item id, so the merged data does not depend on
how many minions ran, in which order they answered, or over which transport.
"""

from __future__ import annotations

import json
import logging
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .rl.core import Episode
from .rl.networks import PolicyParameters, from_bytes, to_bytes

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
MAX_FRAME = 256 * 1024 * 1024


class FramingError(ValueError):
    pass


class ProtocolError(ValueError):
    def __init__(self, message: str, tag: int | None = None):
        super().__init__(message)
        self.tag = tag
        self.consumed = 0


# -- messages ---------------------------------------------------------------------

@dataclass(frozen=True)
class SetPolicy:
    version: int
    snapshot: bytes


@dataclass(frozen=True)
class SetExplorationMode:
    explore: bool


@dataclass(frozen=True)
class RunEpisodes:
    item_id: int
    count: int
    cycle_id: str
    seed: int
    first_episode_id: int = 0


@dataclass(frozen=True)
class ExperienceBatch:
    item_id: int
    policy_version: int
    episodes: tuple


@dataclass(frozen=True)
class Heartbeat:
    seq: int = 0


@dataclass(frozen=True)
class ErrorReport:
    text: str
    item_id: int = -1


@dataclass(frozen=True)
class Configure:
    """Environment description (JSON) a minion needs to run episodes."""
    spec_json: str


@dataclass(frozen=True)
class Shutdown:
    pass


TAGS = {
    SetPolicy: 1, SetExplorationMode: 2, RunEpisodes: 3, ExperienceBatch: 4,
    Heartbeat: 5, ErrorReport: 6, Configure: 7, Shutdown: 8,
}


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def u8(self, v):
        self.parts.append(struct.pack(">B", v))

    def u32(self, v):
        self.parts.append(struct.pack(">I", v))

    def i64(self, v):
        self.parts.append(struct.pack(">q", v))

    def u64(self, v):
        self.parts.append(struct.pack(">Q", v))

    def f64(self, v):
        self.parts.append(struct.pack(">d", v))

    def blob(self, b: bytes):
        self.u32(len(b))
        self.parts.append(bytes(b))

    def text(self, s: str):
        self.blob(s.encode("utf-8"))

    def arr(self, a):
        a = np.ascontiguousarray(a, dtype=">f8")
        self.u32(a.size)
        self.parts.append(a.tobytes())

    def bytes(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def _take(self, n: int) -> bytes:
        if n < 0 or self.off + n > len(self.data):
            raise ProtocolError("payload ends inside a field")
        b = self.data[self.off:self.off + n]
        self.off += n
        return b

    def u8(self):
        return self._take(1)[0]

    def u32(self):
        return struct.unpack(">I", self._take(4))[0]

    def i64(self):
        return struct.unpack(">q", self._take(8))[0]

    def u64(self):
        return struct.unpack(">Q", self._take(8))[0]

    def f64(self):
        return struct.unpack(">d", self._take(8))[0]

    def blob(self) -> bytes:
        return self._take(self.u32())

    def text(self) -> str:
        try:
            return self.blob().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError(f"invalid utf-8 in text field: {exc}") from None

    def arr(self) -> np.ndarray:
        n = self.u32()
        return np.frombuffer(self._take(8 * n), dtype=">f8").astype(float)

    def done(self):
        if self.off != len(self.data):
            raise ProtocolError(f"{len(self.data) - self.off} trailing payload bytes")


_EP_ARRAYS = ("actions", "mus", "sigmas", "logps", "rewards")


def _write_episode(w: _Writer, ep: Episode):
    w.u32(ep.episode_id)
    w.u64(ep.seed)
    w.i64(ep.policy_version)
    w.u8(1 if ep.aborted else 0)
    w.text(ep.cycle_id)
    w.text(ep.note)
    w.arr(np.asarray(ep.obs).ravel())
    w.arr(np.asarray(ep.next_obs).ravel())
    for name in _EP_ARRAYS:
        w.arr(getattr(ep, name))
    w.arr(np.asarray(ep.dones, dtype=float))
    w.arr(ep.applied if ep.applied is not None else np.zeros(0))
    w.u32(len(ep.diagnostics))
    for key in sorted(ep.diagnostics):
        w.text(key)
        w.arr(ep.diagnostics[key])


def _read_episode(r: _Reader) -> Episode:
    eid, seed, ver, aborted = r.u32(), r.u64(), r.i64(), bool(r.u8())
    cycle_id, note = r.text(), r.text()
    obs, nxt = r.arr(), r.arr()
    cols = {name: r.arr() for name in _EP_ARRAYS}
    dones = r.arr().astype(bool)
    applied = r.arr()
    diag = {}
    for _ in range(r.u32()):
        key = r.text()
        diag[key] = r.arr()
    t = len(cols["rewards"])
    if obs.size != 2 * t or nxt.size != 2 * t:
        raise ProtocolError("episode observation block does not match its length")
    try:
        return Episode(obs.reshape(t, 2), nxt.reshape(t, 2), cols["actions"], cols["mus"], cols["sigmas"],
                       cols["logps"], cols["rewards"], dones, applied=applied if applied.size else None,
                       diagnostics=diag, cycle_id=cycle_id, seed=seed, policy_version=ver, episode_id=eid,
                       aborted=aborted, note=note)
    except ValueError as exc:
        raise ProtocolError(f"malformed episode: {exc}") from None


def encode(msg) -> bytes:
    tag = TAGS.get(type(msg))
    if tag is None:
        raise TypeError(f"not a protocol message: {type(msg).__name__}")
    w = _Writer()
    w.u8(PROTOCOL_VERSION)
    if isinstance(msg, SetPolicy):
        w.i64(msg.version)
        w.blob(msg.snapshot)
    elif isinstance(msg, SetExplorationMode):
        w.u8(1 if msg.explore else 0)
    elif isinstance(msg, RunEpisodes):
        w.u32(msg.item_id)
        w.u32(msg.count)
        w.text(msg.cycle_id)
        w.u64(msg.seed)
        w.u32(msg.first_episode_id)
    elif isinstance(msg, ExperienceBatch):
        w.u32(msg.item_id)
        w.i64(msg.policy_version)
        w.u32(len(msg.episodes))
        for ep in msg.episodes:
            _write_episode(w, ep)
    elif isinstance(msg, Heartbeat):
        w.u64(msg.seq)
    elif isinstance(msg, ErrorReport):
        w.i64(msg.item_id)
        w.text(msg.text)
    elif isinstance(msg, Configure):
        w.text(msg.spec_json)
    payload = w.bytes()
    return struct.pack(">IB", len(payload) + 1, tag) + payload


def decode_payload(tag: int, payload: bytes):
    r = _Reader(payload)
    if tag not in TAGS.values():
        raise ProtocolError(f"unknown message tag {tag}", tag)
    if not payload:
        raise ProtocolError("empty payload (missing protocol version)", tag)
    ver = r.u8()
    if ver != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {ver}", tag)
    if tag == 1:
        msg = SetPolicy(r.i64(), r.blob())
    elif tag == 2:
        msg = SetExplorationMode(bool(r.u8()))
    elif tag == 3:
        msg = RunEpisodes(r.u32(), r.u32(), r.text(), r.u64(), r.u32())
    elif tag == 4:
        item, ver_p, n = r.u32(), r.i64(), r.u32()
        msg = ExperienceBatch(item, ver_p, tuple(_read_episode(r) for _ in range(n)))
    elif tag == 5:
        msg = Heartbeat(r.u64())
    elif tag == 6:
        item = r.i64()
        msg = ErrorReport(r.text(), item)
    elif tag == 7:
        msg = Configure(r.text())
    else:
        msg = Shutdown()
    r.done()
    return msg


def decode(frame: bytes):
    """Decode exactly one complete frame."""
    msg, used = decode_stream(frame)
    if msg is None:
        raise FramingError(f"truncated frame ({len(frame)} bytes)")
    if used != len(frame):
        raise FramingError(f"{len(frame) - used} bytes after the frame")
    return msg


def decode_stream(buf: bytes):
    """Decode the first frame in ``buf``; returns (message or None, bytes consumed)."""
    if len(buf) < 5:
        return None, 0
    length = struct.unpack(">I", buf[:4])[0]
    if length < 1 or length > MAX_FRAME:
        raise FramingError(f"invalid frame length {length}")
    if len(buf) < 4 + length:
        return None, 0
    tag = buf[4]
    try:
        return decode_payload(tag, bytes(buf[5:4 + length])), 4 + length
    except ProtocolError as exc:
        # the frame itself was well delimited; let the reader skip it
        exc.consumed = 4 + length
        raise


# -- transports ---------------------------------------------------------------------

class TransportClosed(ConnectionError):
    pass


class InProcessTransport:
    """One end of an in-memory duplex byte pipe; frames go through the codec."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._in = inbox
        self._out = outbox
        self._buf = b""
        self.closed = False

    @classmethod
    def pair(cls):
        a, b = queue.Queue(), queue.Queue()
        return cls(a, b), cls(b, a)

    def send(self, msg) -> None:
        if self.closed:
            raise TransportClosed("transport closed")
        self._out.put(encode(msg))

    def send_raw(self, data: bytes) -> None:
        self._out.put(bytes(data))

    def recv(self, timeout: float | None = None):
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            try:
                msg, used = decode_stream(self._buf)
            except ProtocolError as exc:
                self._buf = self._buf[exc.consumed:]
                raise
            if msg is not None:
                self._buf = self._buf[used:]
                return msg
            remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
            try:
                chunk = self._in.get(timeout=remaining)
            except queue.Empty:
                raise TimeoutError("no message within timeout") from None
            if chunk is None:
                self.closed = True
                if self._buf:
                    raise FramingError(f"stream closed inside a frame ({len(self._buf)} bytes pending)")
                raise TransportClosed("peer closed")
            self._buf += chunk

    def close(self):
        if not self.closed:
            self.closed = True
            self._out.put(None)


class SocketTransport:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._buf = b""
        self._lock = threading.Lock()
        self.closed = False

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 10.0) -> "SocketTransport":
        s = socket.create_connection((host, port), timeout=timeout)
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        s.settimeout(None)
        return cls(s)

    def send(self, msg) -> None:
        self.send_raw(encode(msg))

    def send_raw(self, data: bytes) -> None:
        with self._lock:
            try:
                self.sock.sendall(data)
            except OSError as exc:
                raise TransportClosed(str(exc)) from None

    def recv(self, timeout: float | None = None):
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            try:
                msg, used = decode_stream(self._buf)
            except ProtocolError as exc:
                self._buf = self._buf[exc.consumed:]
                raise
            if msg is not None:
                self._buf = self._buf[used:]
                return msg
            remaining = None if deadline is None else deadline - time.monotonic()
            if remaining is not None and remaining <= 0:
                raise TimeoutError("no message within timeout")
            self.sock.settimeout(remaining)
            try:
                chunk = self.sock.recv(1 << 16)
            except socket.timeout:
                raise TimeoutError("no message within timeout") from None
            except OSError as exc:
                raise TransportClosed(str(exc)) from None
            if not chunk:
                self.closed = True
                if self._buf:
                    raise FramingError(f"stream closed inside a frame ({len(self._buf)} bytes pending)")
                raise TransportClosed("peer closed")
            self._buf += chunk

    def close(self):
        self.closed = True
        try:
            self.sock.close()
        except OSError:
            pass


def parse_endpoint(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {text!r}")
    return host, int(port)


# -- minion -------------------------------------------------------------------------

EpisodeFn = Callable[[PolicyParameters | None, str, bool, int, int], Episode]


class Minion:
    """Runs episodes on request; one episode at a time.

    ``make_runner(spec_json)`` turns a Configure payload into a function
    ``(policy, cycle_id, explore, seed, episode_id) -> Episode``.
    """

    def __init__(self, transport, make_runner: Callable[[str], EpisodeFn] | None = None,
                 runner: EpisodeFn | None = None, heartbeat_s: float = 1.0):
        self.t = transport
        self.make_runner = make_runner
        self.runner = runner
        self.policy: PolicyParameters | None = None
        self.policy_version = -1
        self.explore = True
        self.heartbeat_s = heartbeat_s
        self._busy = threading.Event()
        self._stop = threading.Event()

    def _heartbeats(self):
        seq = 0
        while not self._stop.wait(self.heartbeat_s):
            if self._busy.is_set():
                seq += 1
                try:
                    self.t.send(Heartbeat(seq))
                except TransportClosed:
                    return

    def serve(self) -> None:
        hb = threading.Thread(target=self._heartbeats, daemon=True)
        hb.start()
        try:
            while True:
                try:
                    msg = self.t.recv()
                except (TransportClosed, FramingError):
                    return
                except ProtocolError as exc:
                    self.t.send(ErrorReport(f"protocol error: {exc}"))
                    continue
                if isinstance(msg, Shutdown):
                    return
                self.handle(msg)
        finally:
            self._stop.set()

    def handle(self, msg) -> None:
        if isinstance(msg, Configure):
            try:
                self.runner = self.make_runner(msg.spec_json)
            except Exception as exc:  # report, keep serving
                self.t.send(ErrorReport(f"configure failed: {exc}"))
        elif isinstance(msg, SetPolicy):
            try:
                self.policy = from_bytes(msg.snapshot) if msg.snapshot else None
                self.policy_version = msg.version
            except ValueError as exc:
                self.t.send(ErrorReport(f"bad policy snapshot: {exc}"))
        elif isinstance(msg, SetExplorationMode):
            self.explore = msg.explore
        elif isinstance(msg, RunEpisodes):
            if self.runner is None:
                self.t.send(ErrorReport("not configured", msg.item_id))
                return
            self._busy.set()
            try:
                eps = []
                for i in range(msg.count):
                    seed = episode_seed(msg.seed, i)
                    eps.append(self.runner(self.policy, msg.cycle_id, self.explore, seed,
                                           msg.first_episode_id + i))
                self.t.send(ExperienceBatch(msg.item_id, self.policy_version, tuple(eps)))
            except Exception as exc:
                self.t.send(ErrorReport(f"episode failed: {exc}", msg.item_id))
            finally:
                self._busy.clear()


def episode_seed(item_seed: int, index: int) -> int:
    if index == 0:
        return item_seed
    return int(np.random.SeedSequence([item_seed, index]).generate_state(1, np.uint64)[0] >> 1)


# -- master -------------------------------------------------------------------------

@dataclass(frozen=True)
class WorkItem:
    item_id: int
    cycle_id: str
    seed: int
    count: int = 1
    first_episode_id: int = 0


def make_plan(cycle_ids: Sequence[str], episodes: int, base_seed: int, per_item: int = 1) -> list[WorkItem]:
    """Disjoint (cycle, seed) work items with deterministic seeds."""
    ss = np.random.SeedSequence(base_seed)
    seeds = ss.generate_state(episodes, np.uint64) >> np.uint64(1)
    items = []
    eid = 0
    for k in range(0, episodes, per_item):
        n = min(per_item, episodes - k)
        items.append(WorkItem(len(items), cycle_ids[len(items) % len(cycle_ids)], int(seeds[k]), n, eid))
        eid += n
    return items


@dataclass
class MinionEndpoint:
    transport: object
    name: str = ""
    policy_version: int = -1
    explore: bool | None = None
    dead: bool = False
    completed: int = 0


@dataclass
class DispatchReport:
    batches: dict[int, ExperienceBatch] = field(default_factory=dict)
    reassigned: list[int] = field(default_factory=list)
    stale_discarded: int = 0
    errors: list[str] = field(default_factory=list)
    dead: list[str] = field(default_factory=list)

    def episodes(self) -> list[Episode]:
        out = []
        for item_id in sorted(self.batches):
            out.extend(self.batches[item_id].episodes)
        return out


class DispatchError(RuntimeError):
    pass


def master_dispatch(minions: Sequence[MinionEndpoint], policy: PolicyParameters | None,
                    plan: Sequence[WorkItem], explore: bool = True, timeout: float = 30.0,
                    policy_version: int | None = None, configure: str | None = None,
                    max_attempts: int = 3) -> DispatchReport:
    """Push the snapshot, farm out work items, merge batches by work-item id."""
    live = [m for m in minions if not m.dead]
    if not live:
        raise DispatchError("no connected minions")
    version = policy_version if policy_version is not None else (policy.version if policy is not None else -1)
    snapshot = to_bytes(policy) if policy is not None else b""
    pending: queue.Queue = queue.Queue()
    for item in plan:
        pending.put(item)
    attempts = {item.item_id: 0 for item in plan}
    report = DispatchReport()
    lock = threading.Lock()
    done = threading.Event()
    if not plan:
        return report

    def finished() -> bool:
        return len(report.batches) == len(plan)

    def mark_dead(ep: MinionEndpoint, why: str):
        with lock:
            if ep.dead:
                return
            ep.dead = True
            report.dead.append(ep.name)
            report.errors.append(f"minion {ep.name} marked dead: {why}")
        log.warning("minion %s marked dead: %s", ep.name, why)
        try:
            ep.transport.close()
        except Exception:
            pass

    def requeue(item: WorkItem, why: str):
        with lock:
            attempts[item.item_id] += 1
            give_up = attempts[item.item_id] >= max_attempts
            report.reassigned.append(item.item_id)
            if give_up:
                report.errors.append(f"work item {item.item_id} failed {max_attempts} times: {why}")
        if give_up:
            done.set()
        else:
            pending.put(item)

    def worker(ep: MinionEndpoint):
        t = ep.transport
        try:
            if configure is not None:
                t.send(Configure(configure))
            t.send(SetPolicy(version, snapshot))
            t.send(SetExplorationMode(explore))
            ep.policy_version, ep.explore = version, explore
        except (TransportClosed, OSError) as exc:
            mark_dead(ep, str(exc))
            return
        while not done.is_set():
            try:
                item = pending.get(timeout=0.05)
            except queue.Empty:
                if finished():
                    return
                continue
            with lock:
                already = item.item_id in report.batches
            if already:
                continue
            try:
                t.send(RunEpisodes(item.item_id, item.count, item.cycle_id, item.seed, item.first_episode_id))
            except (TransportClosed, OSError) as exc:
                mark_dead(ep, str(exc))
                requeue(item, "send failed")
                return
            while True:
                try:
                    msg = t.recv(timeout=timeout)
                except TimeoutError:
                    mark_dead(ep, f"no message for {timeout} s")
                    requeue(item, "timeout")
                    return
                except (TransportClosed, FramingError, OSError) as exc:
                    mark_dead(ep, str(exc))
                    requeue(item, "connection lost")
                    return
                except ProtocolError as exc:
                    with lock:
                        report.errors.append(f"minion {ep.name}: {exc}")
                    continue
                if isinstance(msg, Heartbeat):
                    continue
                if isinstance(msg, ErrorReport):
                    with lock:
                        report.errors.append(f"minion {ep.name}: {msg.text}")
                    if msg.item_id == item.item_id:
                        requeue(item, msg.text)
                        break
                    continue
                if isinstance(msg, ExperienceBatch):
                    if msg.policy_version != version or msg.item_id != item.item_id:
                        log.warning("discarding batch for item %d from %s (policy version %d, expected %d)",
                                    msg.item_id, ep.name, msg.policy_version, version)
                        with lock:
                            report.stale_discarded += 1
                        if msg.item_id == item.item_id:
                            requeue(item, "stale policy version")
                            break
                        continue
                    with lock:
                        if msg.item_id not in report.batches:
                            report.batches[msg.item_id] = msg
                            ep.completed += 1
                        if finished():
                            done.set()
                    break
                with lock:
                    report.errors.append(f"minion {ep.name}: unexpected {type(msg).__name__}")

    threads = [threading.Thread(target=worker, args=(ep,), daemon=True) for ep in live]
    for th in threads:
        th.start()
    while not done.is_set():
        if not any(th.is_alive() for th in threads):
            break
        done.wait(0.05)
    done.set()
    for th in threads:
        th.join(timeout=timeout + 1.0)
    if not finished():
        missing = sorted(set(attempts) - set(report.batches))
        raise DispatchError(f"work items not completed: {missing}; " + "; ".join(report.errors[-3:]))
    return report


def spawn_inprocess_minions(n: int, make_runner: Callable[[str], EpisodeFn] | None = None,
                            runner: EpisodeFn | None = None, heartbeat_s: float = 1.0):
    """Start ``n`` minion threads on in-memory pipes; returns (endpoints, threads)."""
    endpoints, threads = [], []
    for k in range(n):
        master_end, minion_end = InProcessTransport.pair()
        mn = Minion(minion_end, make_runner, runner, heartbeat_s)
        th = threading.Thread(target=mn.serve, daemon=True, name=f"minion-{k}")
        th.start()
        endpoints.append(MinionEndpoint(master_end, f"inproc-{k}"))
        threads.append(th)
    return endpoints, threads


def shutdown(minions: Sequence[MinionEndpoint]) -> None:
    for m in minions:
        if not m.dead:
            try:
                m.transport.send(Shutdown())
            except (TransportClosed, OSError):
                pass
            m.transport.close()


def serve_socket(host: str, port: int, make_runner: Callable[[str], EpisodeFn], once: bool = True,
                 ready: Callable[[int], None] | None = None) -> None:
    """Minion side: listen, accept a master, serve until shutdown."""
    srv = socket.create_server((host, port))
    try:
        if ready is not None:
            ready(srv.getsockname()[1])
        while True:
            conn, _ = srv.accept()
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            Minion(SocketTransport(conn), make_runner).serve()
            conn.close()
            if once:
                return
    finally:
        srv.close()


def json_dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))
