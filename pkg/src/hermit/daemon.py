"""The store daemon: one process owns the store, clients talk over a Unix socket.

Each connection is a session. Results of REALIZE and IMPORT are rooted under
``temp/<session>/`` until the session ends, so a client has time to add its
own permanent root before a collection can reclaim them.
"""

from __future__ import annotations

import itertools
import logging
import os
import signal
import socket
import socketserver
import threading

from . import archive
from .bootstrap import ensure_seed
from .build import Builder, root_cause
from .deriv import DerivationGraph
from .errors import HermitError, ProtocolError
from .protocol import (PROTOCOL_VERSION, Op, Status, decode_fields, encode_frame, read_frame)
from .store import Store

log = logging.getLogger(__name__)

_session_ids = itertools.count(1)


def socket_path_for(state_dir: str) -> str:
    return os.path.join(state_dir, "daemon.socket")


class Session:
    def __init__(self, server: "DaemonServer"):
        self.server = server
        self.store = server.store
        self.id = f"{os.getpid()}-{next(_session_ids)}"
        self.temp_roots = []

    def hold(self, path) -> None:
        name = f"temp/{self.id}/{len(self.temp_roots)}"
        self.store.add_gc_root(name, path)
        self.temp_roots.append(name)

    def release(self) -> None:
        for name in self.temp_roots:
            self.store.remove_gc_root(name)
        d = os.path.join(self.store.config.roots_dir, "temp", self.id)
        if os.path.isdir(d):
            try:
                os.rmdir(d)
            except OSError:
                pass
        self.temp_roots.clear()

    def dispatch(self, op: int, f: list[bytes]) -> list:
        store = self.store
        path = lambda b: store.parse_path(b.decode())  # noqa: E731
        if op == Op.PING:
            return [PROTOCOL_VERSION]
        if op == Op.ADD_CONTENT:
            p = store.add_archive(f[1], name=f[0].decode())
            self.hold(p)
            return [str(p)]
        if op == Op.REALIZE:
            graph = DerivationGraph.from_bytes(f[0], store.root)
            check = len(f) > 1 and f[1] == b"1"
            jobs = int(f[2]) if len(f) > 2 else 1
            with store.creation_guard():
                result = self.server.builder.realize(graph, check=check, jobs=jobs)[graph.root]
                if result.ok:
                    self.hold(result.path)
            if not result.ok:
                raise root_cause(result.error)
            return [str(result.path)]
        if op == Op.QUERY_VALID:
            return ["1" if store.is_valid(path(f[0])) else "0"]
        if op == Op.QUERY_REFS:
            return [str(r) for r in sorted(store.references(path(f[0])))]
        if op == Op.CLOSURE:
            return [str(p) for p in store.closure([path(b) for b in f])]
        if op == Op.ADD_ROOT:
            name, target, indirect = f[0].decode(), f[1].decode(), f[2] == b"1"
            if indirect:
                store.add_indirect_root(name)
            else:
                store.add_gc_root(name, store.parse_path(target))
            return []
        if op == Op.GC:
            report = store.collect_garbage()
            return [str(report.freed_bytes)] + [str(p) for p in report.deleted]
        if op == Op.EXPORT:
            return [archive.export_closure(store, [path(b) for b in f])]
        if op == Op.IMPORT:
            with store.creation_guard():
                report = archive.import_stream(f[0], store)
                for p in list(report) + report.skipped:
                    self.hold(p)
            return [str(p) for p in report]
        raise ProtocolError(f"unknown opcode {op:#04x}")


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        session = Session(self.server)
        try:
            self._serve(session)
        finally:
            session.release()

    def _reply_error(self, exc: Exception) -> None:
        fields = [type(exc).__name__, str(exc)]
        if getattr(exc, "log", None):
            fields.append(exc.log)
        try:
            self.wfile.write(encode_frame(Status.ERROR, *fields))
        except OSError:
            pass

    def _serve(self, session: Session) -> None:
        greeted = False
        while True:
            try:
                frame = read_frame(self.rfile)
                if frame is None:
                    return
                op, payload = frame
                fields = decode_fields(payload)
                if not greeted:
                    if op != Op.HELLO or not fields or fields[0].decode() != PROTOCOL_VERSION:
                        raise ProtocolError(f"expected HELLO with protocol version {PROTOCOL_VERSION}")
                    greeted = True
                    self.wfile.write(encode_frame(Status.OK, PROTOCOL_VERSION, session.store.root))
                    continue
            except (ProtocolError, UnicodeDecodeError) as exc:
                self._reply_error(ProtocolError(str(exc)))
                return
            try:
                result = session.dispatch(op, fields)
            except (HermitError, OSError, ValueError, IndexError) as exc:
                if isinstance(exc, IndexError):
                    exc = ProtocolError(f"missing fields for opcode {op:#04x}")
                log.info("session %s: %s: %s", session.id, type(exc).__name__, exc)
                self._reply_error(exc)
                if isinstance(exc, ProtocolError):
                    return
                continue
            try:
                self.wfile.write(encode_frame(Status.OK, *result))
            except ProtocolError as exc:
                self._reply_error(exc)
            except OSError:
                return


class DaemonServer(socketserver.ThreadingUnixStreamServer):
    daemon_threads = True

    def __init__(self, store: Store, socket_path: str, builder: Builder | None = None):
        self.store = store
        self.builder = builder or Builder(store)
        self.socket_path = socket_path
        ensure_seed(store)
        _claim_socket(socket_path)
        super().__init__(socket_path, _Handler)
        os.chmod(socket_path, 0o600)

    def server_close(self):
        super().server_close()
        try:
            os.unlink(self.socket_path)
        except FileNotFoundError:
            pass


def _claim_socket(path: str) -> None:
    """Remove a stale socket file; refuse if another daemon is listening."""
    if not os.path.exists(path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        return
    probe = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    try:
        probe.connect(path)
    except (ConnectionRefusedError, FileNotFoundError):
        os.unlink(path)
        return
    finally:
        probe.close()
    raise HermitError(f"another daemon is already listening at {path}")


def serve(store: Store, socket_path: str) -> None:
    """Serve until interrupted."""
    server = DaemonServer(store, socket_path)
    log.info("hermit daemon listening on %s", socket_path)

    def _terminate(signum, frame):
        raise SystemExit(0)

    signal.signal(signal.SIGTERM, _terminate)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


def start_in_thread(store: Store, socket_path: str) -> tuple[DaemonServer, threading.Thread]:
    """Run a daemon on a background thread (used by tests and embedding code)."""
    server = DaemonServer(store, socket_path)
    t = threading.Thread(target=server.serve_forever, name="hermit-daemon", daemon=True)
    t.start()
    return server, t
