"""Reliable, ordered message links between the master and its workers.

Two implementations share one contract: an in-process bus built on queues
(messages still pass through the wire encoding) and newline-delimited JSON
over TCP with one connection per worker.
"""

import queue
import socket

from ..errors import ConnectionLost, WorkerDropped
from .protocol import decode, encode

_CLOSED = object()


class QueueLink:
    """One end of an in-process duplex pipe."""

    def __init__(self, inbox, outbox):
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    def send(self, msg):
        if self._closed:
            raise ConnectionLost("link closed")
        self._outbox.put(encode(msg))

    def recv(self, timeout=None):
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise ConnectionLost(f"no message within {timeout} s") from None
        if item is _CLOSED:
            raise ConnectionLost("peer closed the link")
        return decode(item)

    def close(self):
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSED)


class SocketLink:
    """Newline-delimited JSON over a connected TCP socket."""

    def __init__(self, sock):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self._file = sock.makefile("rb")

    def send(self, msg):
        try:
            self._sock.sendall(encode(msg))
        except OSError as exc:
            raise ConnectionLost(str(exc)) from None

    def recv(self, timeout=None):
        self._sock.settimeout(timeout)
        try:
            line = self._file.readline()
        except (OSError, ValueError) as exc:
            raise ConnectionLost(str(exc)) from None
        if not line:
            raise ConnectionLost("peer closed the connection")
        return decode(line)

    def close(self):
        for obj in (self._file, self._sock):
            try:
                obj.close()
            except OSError:
                pass


class MasterEndpoint:
    """The master's view: one link per worker, plus broadcast and an optional tap.

    ``tap(direction, index, msg)`` sees every message; ``direction`` is
    ``"to_master"``, ``"to_worker"`` or ``"broadcast"`` (recorded once per
    broadcast, with index None).
    """

    def __init__(self, links, tap=None, timeout=None):
        self.links = list(links)
        self.tap = tap
        self.timeout = timeout

    @property
    def n(self):
        return len(self.links)

    def reorder(self, order):
        self.links = [self.links[i] for i in order]

    def send(self, i, msg):
        if self.tap:
            self.tap("to_worker", i, msg)
        try:
            self.links[i].send(msg)
        except ConnectionLost:
            raise WorkerDropped(i) from None

    def broadcast(self, msg):
        if self.tap:
            self.tap("broadcast", None, msg)
        for i, link in enumerate(self.links):
            try:
                link.send(msg)
            except ConnectionLost:
                raise WorkerDropped(i) from None

    def recv(self, i):
        try:
            msg = self.links[i].recv(self.timeout)
        except ConnectionLost:
            raise WorkerDropped(i) from None
        if self.tap:
            self.tap("to_master", i, msg)
        return msg

    def close(self):
        for link in self.links:
            link.close()


def in_process_bus(n_workers, tap=None, timeout=None):
    """Return ``(master_endpoint, worker_links)`` wired through queues."""
    to_master = [queue.Queue() for _ in range(n_workers)]
    to_worker = [queue.Queue() for _ in range(n_workers)]
    master = MasterEndpoint([QueueLink(to_master[i], to_worker[i]) for i in range(n_workers)],
                            tap, timeout)
    workers = [QueueLink(to_worker[i], to_master[i]) for i in range(n_workers)]
    return master, workers


def parse_address(address):
    if isinstance(address, tuple):
        return address
    host, _, port = str(address).rpartition(":")
    return host or "127.0.0.1", int(port)


class TcpListener:
    """Listening socket of a TCP master; ``accept`` waits for every worker."""

    def __init__(self, address, n_workers, tap=None, timeout=None):
        self.n_workers = n_workers
        self.tap = tap
        self.timeout = timeout
        self._sock = socket.create_server(parse_address(address))
        self.address = self._sock.getsockname()[:2]

    def accept(self, accept_timeout=None):
        self._sock.settimeout(accept_timeout)
        links = []
        try:
            while len(links) < self.n_workers:
                conn, _ = self._sock.accept()
                conn.settimeout(None)
                links.append(SocketLink(conn))
        except socket.timeout:
            for link in links:
                link.close()
            raise ConnectionLost(f"only {len(links)} of {self.n_workers} workers connected")
        finally:
            self._sock.close()
        return MasterEndpoint(links, self.tap, self.timeout)


def tcp_line_transport(address, n_workers, tap=None, timeout=None):
    """Open a TCP master listener (port 0 picks a free port)."""
    return TcpListener(address, n_workers, tap, timeout)


def tcp_connect(address, timeout=10.0):
    """Connect a worker to the master at ``host:port``."""
    try:
        sock = socket.create_connection(parse_address(address), timeout=timeout)
    except OSError as exc:
        raise ConnectionLost(f"cannot reach master at {address}: {exc}") from None
    sock.settimeout(None)
    return SocketLink(sock)
