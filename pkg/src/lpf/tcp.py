"""Distributed backend over TCP sockets.

Bootstrap: process 0 listens at the agreed (host, port). Every other process
opens its own listening socket and connects to the master *from that same
port* (SO_REUSEPORT), so the master learns each peer's reachable address
from the connection itself. Handshake, one line each way::

    client -> master   LPF1 <pid> <nprocs>\\n
    master -> client   OK <nprocs>\\n  then nprocs lines  <pid> <host> <port>\\n

On any inconsistency the master answers ``ERR <reason>\\n`` instead. The
remaining connections (a full mesh) are opened on first use. After that,
every message is a frame: u64 little-endian length, then a 4-byte tag, then
the body.
"""

from __future__ import annotations

import logging
import os
import selectors
import socket
import struct
import time

from lpf.core import NO_ARGS, Args, Config, Context
from lpf.errors import FatalError
from lpf.sync.channel import Channel, Counters
from lpf.sync.wire import MAGIC_ABORT, MAGIC_BARRIER, MAGIC_DATA, MAGIC_HOOK

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT_MS = 30000
_LEN = struct.Struct("<Q")
_RECV_CHUNK = 1 << 20


class _Conn:
    __slots__ = ("sock", "rbuf", "peer")

    def __init__(self, sock: socket.socket, peer: int):
        self.sock = sock
        self.peer = peer
        self.rbuf = bytearray()

    def pop_frame(self) -> bytes | None:
        if len(self.rbuf) < _LEN.size:
            return None
        (n,) = _LEN.unpack_from(self.rbuf, 0)
        end = _LEN.size + n
        if len(self.rbuf) < end:
            return None
        frame = bytes(self.rbuf[_LEN.size:end])
        del self.rbuf[:end]
        return frame


def _deadline(timeout_s: float | None) -> float | None:
    return None if timeout_s is None else time.monotonic() + timeout_s


def _remaining(deadline: float | None, what: str) -> float | None:
    if deadline is None:
        return None
    left = deadline - time.monotonic()
    if left <= 0:
        raise FatalError(f"timed out {what}")
    return left


def _reuse_port_socket() -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEPORT, 1)
    return sock


def _read_line(sock: socket.socket, buf: bytearray, deadline: float | None, what: str) -> str:
    while b"\n" not in buf:
        sock.settimeout(_remaining(deadline, what))
        try:
            chunk = sock.recv(4096)
        except socket.timeout:
            raise FatalError(f"timed out {what}") from None
        except OSError as exc:
            raise FatalError(f"connection lost {what}: {exc}") from exc
        if not chunk:
            raise FatalError(f"connection closed {what}")
        buf.extend(chunk)
    line, _, rest = bytes(buf).partition(b"\n")
    buf[:] = rest
    return line.decode("ascii", "replace")


class InitHandle:
    """Binding of ``nprocs`` pre-existing processes; reusable across hooks."""

    def __init__(self, pid: int, nprocs: int, master: tuple[str, int], timeout_ms: int,
                 peers: dict[int, tuple[str, int]], listener: socket.socket | None,
                 conns: dict[int, socket.socket], debug: bool = False):
        self.pid = pid
        self.nprocs = nprocs
        self.master = master
        self.timeout_ms = timeout_ms
        self.peers = peers
        self.debug = debug
        self.sync_timeout: float | None = None
        self._listener = listener
        self._raw = conns
        self._channel: TcpChannel | None = None
        self.state = "valid"

    @property
    def timeout(self) -> float:
        return self.timeout_ms / 1000.0

    def channel(self) -> TcpChannel:
        if self.state != "valid":
            raise FatalError(f"init handle is {self.state}")
        if self._channel is None:
            self._channel = TcpChannel(self, self._connect_mesh())
        return self._channel

    def _connect_mesh(self) -> dict[int, _Conn]:
        deadline = _deadline(self.timeout)
        socks = dict(self._raw)
        leftover: dict[int, bytearray] = {}
        if self.pid != 0:
            for lower in range(1, self.pid):
                host, port = self.peers[lower]
                try:
                    s = socket.create_connection((host, port), _remaining(deadline, "meshing"))
                except OSError as exc:
                    raise FatalError(f"cannot reach process {lower} at {host}:{port}") from exc
                s.sendall(f"MESH {self.pid}\n".encode())
                socks[lower] = s
            for _ in range(self.nprocs - 1 - self.pid):
                self._listener.settimeout(_remaining(deadline, "waiting for mesh peers"))
                try:
                    s, _ = self._listener.accept()
                except socket.timeout:
                    raise FatalError("timed out waiting for mesh peers") from None
                buf = bytearray()
                line = _read_line(s, buf, deadline, "reading mesh greeting")
                parts = line.split()
                if len(parts) != 2 or parts[0] != "MESH":
                    s.close()
                    raise FatalError(f"bad mesh greeting {line!r}")
                socks[int(parts[1])] = s
                leftover[int(parts[1])] = buf
        if sorted(socks) != [q for q in range(self.nprocs) if q != self.pid]:
            raise FatalError("incomplete connection mesh")
        conns = {}
        for q, s in socks.items():
            s.setblocking(False)
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conns[q] = _Conn(s, q)
            conns[q].rbuf.extend(leftover.get(q, b""))
        return conns

    def close(self) -> None:
        if self._channel is not None:
            for conn in self._channel.conns.values():
                conn.sock.close()
        for s in self._raw.values():
            s.close()
        if self._listener is not None:
            self._listener.close()
        self._channel = None
        self._raw = {}
        self._listener = None

    def __repr__(self) -> str:
        return f"InitHandle(pid={self.pid}, nprocs={self.nprocs}, state={self.state})"


def init_over_tcp(host: str, port: int | str, timeout_ms: int = DEFAULT_TIMEOUT_MS,
                  pid: int = 0, nprocs: int = 1, *, debug: bool = False) -> InitHandle:
    port = int(port)
    if not 0 <= pid < nprocs:
        raise FatalError(f"process id {pid} outside [0, {nprocs})")
    if nprocs == 1:
        return InitHandle(0, 1, (host, port), timeout_ms, {0: (host, port)}, None, {},
                          debug)
    deadline = _deadline(timeout_ms / 1000.0)
    if pid == 0:
        return _serve_master(host, port, timeout_ms, nprocs, deadline, debug)
    return _join_master(host, port, timeout_ms, pid, nprocs, deadline, debug)


def _serve_master(host, port, timeout_ms, nprocs, deadline, debug) -> InitHandle:
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        listener.bind((host, port))
    except OSError as exc:
        listener.close()
        raise FatalError(f"master cannot listen on {host}:{port}: {exc}") from exc
    listener.listen(nprocs)
    clients: dict[int, socket.socket] = {}
    book: dict[int, tuple[str, int]] = {0: (host, port)}

    def refuse(reason: str, extra: socket.socket | None = None):
        for s in list(clients.values()) + ([extra] if extra else []):
            try:
                s.sendall(f"ERR {reason}\n".encode())
            except OSError:
                pass
            s.close()
        listener.close()
        raise FatalError(reason)

    try:
        while len(clients) < nprocs - 1:
            listener.settimeout(_remaining(deadline, "waiting for peers to register"))
            try:
                s, addr = listener.accept()
            except socket.timeout:
                refuse(f"timed out with {len(clients) + 1} of {nprocs} processes registered")
            line = _read_line(s, bytearray(), deadline, "reading registration")
            parts = line.split()
            if len(parts) != 3 or parts[0] != "LPF1":
                refuse(f"malformed registration {line!r}", s)
            q, their_n = int(parts[1]), int(parts[2])
            if their_n != nprocs:
                refuse(f"process {q} expects {their_n} processes, master {nprocs}", s)
            if not 0 < q < nprocs or q in clients:
                refuse(f"duplicate or invalid process id {q}", s)
            clients[q] = s
            book[q] = (addr[0], addr[1])
    except FatalError:
        raise
    except BaseException:
        refuse("master interrupted")
    reply = [f"OK {nprocs}\n"] + [f"{q} {h} {pt}\n" for q, (h, pt) in sorted(book.items())]
    blob = "".join(reply).encode()
    for s in clients.values():
        s.sendall(blob)
    log.debug("master registered %d processes", nprocs)
    return InitHandle(0, nprocs, (host, port), timeout_ms, book, listener, clients, debug)


def _join_master(host, port, timeout_ms, pid, nprocs, deadline, debug) -> InitHandle:
    listener = _reuse_port_socket()
    listener.bind(("0.0.0.0", 0))
    listener.listen(nprocs)
    my_port = listener.getsockname()[1]
    sock = None
    while sock is None:
        left = _remaining(deadline, f"connecting to master {host}:{port}")
        s = _reuse_port_socket()
        s.bind(("0.0.0.0", my_port))
        s.settimeout(left)
        try:
            s.connect((host, port))
            sock = s
        except (ConnectionRefusedError, socket.timeout, OSError):
            s.close()
            time.sleep(min(0.05, max(0.0, deadline - time.monotonic())))
    try:
        sock.sendall(f"LPF1 {pid} {nprocs}\n".encode())
        buf = bytearray()
        status = _read_line(sock, buf, deadline, "waiting for the address book").split()
        if not status or status[0] != "OK":
            raise FatalError(f"master refused registration: {' '.join(status[1:])}")
        if int(status[1]) != nprocs:
            raise FatalError("master disagrees on process count")
        book = {}
        for _ in range(nprocs):
            q, h, pt = _read_line(sock, buf, deadline, "reading the address book").split()
            book[int(q)] = (h, int(pt))
    except BaseException:
        sock.close()
        listener.close()
        raise
    if buf:
        raise FatalError("unexpected bytes after the address book")
    return InitHandle(pid, nprocs, (host, port), timeout_ms, book, listener, {0: sock}, debug)


def init_from_env(timeout_ms: int = DEFAULT_TIMEOUT_MS) -> InitHandle:
    """Build an InitHandle from LPF_PID, LPF_NPROCS and LPF_MASTER=host:port."""
    try:
        pid = int(os.environ["LPF_PID"])
        nprocs = int(os.environ["LPF_NPROCS"])
        host, _, port = os.environ["LPF_MASTER"].rpartition(":")
    except (KeyError, ValueError) as exc:
        raise FatalError("LPF_PID, LPF_NPROCS and LPF_MASTER must be set") from exc
    timeout_ms = int(os.environ.get("LPF_TIMEOUT_MS", timeout_ms))
    return init_over_tcp(host, int(port), timeout_ms, pid, nprocs)


def finalize(init: InitHandle) -> None:
    if init.state == "finalized":
        if init.debug:
            raise FatalError("init handle finalized twice")
        return
    init.close()
    init.state = "finalized"


class TcpChannel(Channel):
    def __init__(self, init: InitHandle, conns: dict[int, _Conn]):
        self.init = init
        self.pid = init.pid
        self.nprocs = init.nprocs
        self.conns = conns
        self.counters = Counters()

    @property
    def _deadline(self) -> float | None:
        return _deadline(self.init.sync_timeout)

    def _transfer(self, sends: dict[int, bytes], recv_from, tag: bytes,
                  deadline: float | None) -> dict[int, bytes]:
        if self.init.state != "valid":
            raise FatalError(f"init handle is {self.init.state}")
        got: dict[int, bytes] = {}
        want = set(recv_from)
        for q in list(want):
            frame = self.conns[q].pop_frame()
            if frame is not None:
                got[q] = self._check(q, frame, tag)
                want.discard(q)
        out = {}
        for q, body in sends.items():
            out[q] = memoryview(b"".join((_LEN.pack(len(body) + len(tag)), tag, body)))
            self.counters.messages += 1
        sel = selectors.DefaultSelector()
        try:
            for q in want | set(out):
                events = (selectors.EVENT_READ if q in want else 0) | \
                         (selectors.EVENT_WRITE if q in out else 0)
                sel.register(self.conns[q].sock, events, q)
            while want or out:
                timeout = _remaining(deadline, "waiting for peers")
                ready = sel.select(timeout)
                if not ready and deadline is not None:
                    _remaining(deadline, "waiting for peers")
                for key, mask in ready:
                    q = key.data
                    conn = self.conns[q]
                    if mask & selectors.EVENT_WRITE and q in out:
                        try:
                            n = conn.sock.send(out[q])
                        except (BlockingIOError, InterruptedError):
                            n = 0
                        except OSError as exc:
                            raise self._lost(q, exc)
                        out[q] = out[q][n:]
                        if not len(out[q]):
                            del out[q]
                    if mask & selectors.EVENT_READ and q in want:
                        try:
                            chunk = conn.sock.recv(_RECV_CHUNK)
                        except (BlockingIOError, InterruptedError):
                            chunk = None
                        except OSError as exc:
                            raise self._lost(q, exc)
                        if chunk is not None:
                            if not chunk:
                                raise self._lost(q, None)
                            conn.rbuf.extend(chunk)
                            frame = conn.pop_frame()
                            if frame is not None:
                                got[q] = self._check(q, frame, tag)
                                want.discard(q)
                    events = (selectors.EVENT_READ if q in want else 0) | \
                             (selectors.EVENT_WRITE if q in out else 0)
                    if events:
                        sel.modify(conn.sock, events, q)
                    else:
                        sel.unregister(conn.sock)
        finally:
            sel.close()
        return got

    def _check(self, q: int, frame: bytes, tag: bytes) -> bytes:
        head = frame[:4]
        if head == tag:
            return frame[4:]
        self.init.state = "broken"
        if head == MAGIC_ABORT:
            raise FatalError(f"process {q} aborted: {frame[4:].decode(errors='replace')}")
        raise FatalError(f"process {q} diverged: expected {tag!r} frame, got {head!r}")

    def _lost(self, q: int, exc) -> FatalError:
        self.init.state = "broken"
        return FatalError(f"lost connection to process {q}" + (f": {exc}" if exc else ""))

    def _tree_barrier(self, tag: bytes, deadline: float | None) -> None:
        s, p = self.pid, self.nprocs
        children = [c for c in (2 * s + 1, 2 * s + 2) if c < p]
        parent = (s - 1) // 2
        self._transfer({}, children, tag, deadline)
        if s:
            self._transfer({parent: b""}, [parent], tag, deadline)
        self._transfer({c: b"" for c in children}, [], tag, deadline)

    def barrier(self) -> None:
        if self.nprocs > 1:
            self._tree_barrier(MAGIC_BARRIER, self._deadline)

    def hook_barrier(self, deadline: float | None) -> None:
        if self.nprocs > 1:
            self._tree_barrier(MAGIC_HOOK, deadline)

    def alltoall(self, blocks, tag):
        s = self.pid
        others = [q for q in range(self.nprocs) if q != s]
        got = self._transfer({q: blocks[q] for q in others}, others, tag, self._deadline)
        self.counters.control_bytes += sum(len(blocks[q]) for q in others)
        got[s] = bytes(blocks[s])
        return [got[q] for q in range(self.nprocs)]

    def shift(self, dst, data, src, tag):
        if dst == self.pid and src == self.pid:
            return bytes(data)
        self.counters.control_bytes += len(data)
        return self._transfer({dst: data}, [src], tag, self._deadline)[src]

    def data_exchange(self, ctx, recv_plan, send_plans) -> None:
        s = self.pid
        slots = ctx._slots
        outgoing = {}
        for dst, entries in send_plans.items():
            outgoing[dst] = b"".join(slots[slot][off:off + n] for slot, off, n in entries)
        local = outgoing.pop(s, b"")
        sources = [q for q in recv_plan if q != s]
        got = self._transfer(outgoing, sources, MAGIC_DATA, self._deadline)
        got[s] = local
        written = 0
        for src, entries in recv_plan.items():
            data = memoryview(got[src])
            pos = 0
            for dst_slot, dst_off, n, _, _ in entries:
                if pos + n > len(data):
                    raise FatalError(f"short payload from process {src}")
                slots[dst_slot][dst_off:dst_off + n] = data[pos:pos + n]
                pos += n
            written += pos
        self.counters.payload_bytes += written

    def abort(self, reason: str) -> None:
        if self.init.state == "valid":
            self.init.state = "broken"
        body = reason.encode()[:512]
        frame = _LEN.pack(len(body) + 4) + MAGIC_ABORT + body
        for conn in self.conns.values():
            try:
                conn.sock.send(frame)
            except OSError:
                pass


def hook(init: InitHandle, spmd, args: Args = NO_ARGS, **options):
    """Run ``spmd`` on the processes bound by ``init``; collective."""
    channel = init.channel()
    config = Config.from_env().with_(debug=init.debug or None, **options)
    try:
        channel.hook_barrier(_deadline(init.timeout))
    except FatalError:
        init.state = "broken"
        raise
    ctx = Context(init.pid, init.nprocs, channel, config)
    channel.publish(ctx)
    try:
        result = spmd(ctx, init.pid, init.nprocs, args)
    except BaseException as exc:
        channel.abort(f"process {init.pid} failed: {exc!r}")
        if isinstance(exc, FatalError):
            raise
        raise FatalError(f"hooked function failed on process {init.pid}") from exc
    finally:
        ctx._state = "closed"
    channel.hook_barrier(channel._deadline)
    return result
