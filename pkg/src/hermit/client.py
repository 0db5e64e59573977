"""Store access for front ends: in-process, or through the daemon.

Both backends expose the same methods, so profile management and the CLI
behave identically either way.
"""

from __future__ import annotations

import os
import socket
import threading

from . import archive, errors
from .bootstrap import ensure_seed, seed_path
from .build import Builder
from .deriv import Compiler, DerivationGraph
from .errors import DaemonError, DaemonNotRunning, ProtocolError
from .model import Package
from .protocol import (PROTOCOL_VERSION, Op, Status, decode_fields, encode_frame, flag, read_frame)
from .store import GCReport, Store, StorePath, parse_store_path


class _Base:
    root: str

    def compiler(self) -> Compiler:
        if getattr(self, "_compiler", None) is None:
            self._compiler = Compiler(seed_path(self.root))
        return self._compiler

    def compile(self, pkg: Package) -> DerivationGraph:
        return self.compiler().compile(pkg)

    def parse_path(self, text: str) -> StorePath:
        return parse_store_path(text, self.root)


class LocalBackend(_Base):
    """Library-direct store access; takes the same locks as the daemon."""

    def __init__(self, store: Store, builder: Builder | None = None):
        self.store = store
        self.root = store.root
        self.builder = builder or Builder(store)
        self.seed = ensure_seed(store)

    def close(self):
        pass

    def ping(self) -> str:
        return PROTOCOL_VERSION

    def add_content(self, name: str, data: bytes) -> StorePath:
        return self.store.add_archive(data, name=name)

    def build(self, graph: DerivationGraph, check: bool = False, jobs: int = 1) -> StorePath:
        return self.builder.build(graph, check=check, jobs=jobs)

    def query_valid(self, path: StorePath) -> bool:
        return self.store.is_valid(path)

    def query_refs(self, path: StorePath) -> list[StorePath]:
        return sorted(self.store.references(path))

    def closure(self, paths) -> list[StorePath]:
        return self.store.closure(paths)

    def add_root(self, name: str, target: StorePath | None = None, indirect: bool = False) -> None:
        if indirect:
            self.store.add_indirect_root(name)
        else:
            self.store.add_gc_root(name, target)

    def gc(self) -> GCReport:
        return self.store.collect_garbage()

    def export(self, paths) -> bytes:
        return archive.export_closure(self.store, paths)

    def import_(self, stream: bytes) -> list[StorePath]:
        return list(archive.import_stream(stream, self.store))


class DaemonClient(_Base):
    """Synchronous client for one daemon connection."""

    def __init__(self, socket_path: str, root: str, timeout: float | None = None):
        self.socket_path = socket_path
        self.root = root
        self._lock = threading.Lock()
        self.sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self.sock.settimeout(timeout)
        try:
            self.sock.connect(socket_path)
        except (FileNotFoundError, ConnectionRefusedError):
            self.sock.close()
            raise DaemonNotRunning(socket_path) from None
        self.rfile = self.sock.makefile("rb")
        hello = self.call(Op.HELLO, PROTOCOL_VERSION)
        if len(hello) > 1 and hello[1].decode() != root:
            self.close()
            raise ProtocolError(f"daemon serves store {hello[1].decode()}, not {root}")

    def close(self):
        try:
            self.rfile.close()
        finally:
            self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def call(self, op: Op, *fields) -> list[bytes]:
        with self._lock:
            self.sock.sendall(encode_frame(op, *fields))
            frame = read_frame(self.rfile)
        if frame is None:
            raise ProtocolError("daemon closed the connection")
        status, payload = frame
        values = decode_fields(payload)
        if status == Status.OK:
            return values
        if status != Status.ERROR or len(values) < 2:
            raise ProtocolError(f"unexpected response status {status}")
        kind, message = values[0].decode(), values[1].decode()
        log = values[2] if len(values) > 2 else b""
        raise _rebuild_error(kind, message, log)

    def ping(self) -> str:
        return self.call(Op.PING)[0].decode()

    def add_content(self, name: str, data: bytes) -> StorePath:
        return self.parse_path(self.call(Op.ADD_CONTENT, name, data)[0].decode())

    def build(self, graph: DerivationGraph, check: bool = False, jobs: int = 1) -> StorePath:
        out = self.call(Op.REALIZE, graph.to_bytes(), flag(check), str(jobs))
        return self.parse_path(out[0].decode())

    def query_valid(self, path: StorePath) -> bool:
        return self.call(Op.QUERY_VALID, str(path))[0] == b"1"

    def query_refs(self, path: StorePath) -> list[StorePath]:
        return [self.parse_path(v.decode()) for v in self.call(Op.QUERY_REFS, str(path))]

    def closure(self, paths) -> list[StorePath]:
        return [self.parse_path(v.decode()) for v in self.call(Op.CLOSURE, *(str(p) for p in paths))]

    def add_root(self, name: str, target: StorePath | None = None, indirect: bool = False) -> None:
        self.call(Op.ADD_ROOT, os.path.abspath(name) if indirect else name,
                  "" if target is None else str(target), flag(indirect))

    def gc(self) -> GCReport:
        values = self.call(Op.GC)
        return GCReport(deleted=[self.parse_path(v.decode()) for v in values[1:]],
                        freed_bytes=int(values[0]))

    def export(self, paths) -> bytes:
        return self.call(Op.EXPORT, *(str(p) for p in paths))[0]

    def import_(self, stream: bytes) -> list[StorePath]:
        return [self.parse_path(v.decode()) for v in self.call(Op.IMPORT, stream)]


def _rebuild_error(kind: str, message: str, log: bytes) -> Exception:
    cls = getattr(errors, kind, None)
    if isinstance(cls, type) and issubclass(cls, errors.HermitError) and cls not in (
            errors.DaemonError, errors.DaemonNotRunning, errors.ResolutionError):
        exc = cls(message)
        if isinstance(exc, errors.BuildError):
            exc.log = log
        return exc
    return DaemonError(kind, message)
