"""Realizing derivations: cache lookup, sandboxed execution, registration.

A build sees exactly the environment of its derivation plus a handful of
fixed variables (see :class:`Sandbox`), runs in a fresh temporary
directory, and writes its result directly at its logical output path.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import subprocess
import tempfile
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from urllib.parse import unquote, urlparse

from . import archive, base32
from .deriv import Derivation, DerivationGraph
from .errors import BuildError, DerivationError, FetchHashMismatch, HermitError, NonDeterministicBuild
from .fsutil import canonicalize, remove_tree
from .store import Store, StorePath, compute_store_digest

log = logging.getLogger(__name__)

HOMELESS = "/homeless-shelter"
MANIFEST_FILE = ".hermit-manifest"
CONFLICTS_FILE = ".hermit-conflicts"

__all__ = ["Builder", "BuildResult", "Sandbox", "canonicalize", "execute_builder", "shadow_path"]


@dataclass
class BuildResult:
    path: StorePath
    status: str  # built | cached | failed
    log: bytes = b""
    references: frozenset = frozenset()
    error: HermitError | None = field(default=None, compare=False)

    @property
    def ok(self) -> bool:
        return self.status != "failed"


@dataclass
class Sandbox:
    build_dir: str
    out: str
    env: dict
    log_path: str

    @classmethod
    def create(cls, drv: Derivation, out: str, log_path: str) -> "Sandbox":
        # a fixed name keeps TMPDIR and PWD reproducible; the caller holds the output's lock
        root, base = out.rsplit("/", 1)
        key = hashlib.sha256(root.encode()).hexdigest()[:8]
        build_dir = os.path.join(tempfile.gettempdir(), f"hermit-build-{key}-{base}")
        remove_tree(build_dir)
        os.mkdir(build_dir, 0o700)
        env = dict(drv.env)
        env.update(TMPDIR=build_dir, HOME=HOMELESS, SOURCE_DATE_EPOCH="1", out=out, PWD=build_dir)
        return cls(build_dir, out, env, log_path)

    def dispose(self) -> None:
        remove_tree(self.build_dir)


def shadow_path(path: StorePath) -> StorePath:
    """Where check-mode rebuilds go: same name, same digest length."""
    return StorePath(path.root, compute_store_digest(b"check:" + str(path).encode()), path.name)


# -- builtin builders --------------------------------------------------------

def execute_builder(drv: Derivation, sandbox: Sandbox) -> int:
    """Run one builder; returns its exit status. The output goes to ``sandbox.out``."""
    with open(sandbox.log_path, "ab") as logf:
        try:
            if drv.builder == "builtin:exec":
                return _exec(drv, sandbox, logf)
            if drv.builder == "builtin:fetch":
                _fetch(drv, sandbox.out)
            elif drv.builder == "builtin:write-files":
                _write_files(drv, sandbox.out)
            elif drv.builder == "builtin:union":
                _union(drv, sandbox.out)
            else:
                raise DerivationError(f"unknown builder {drv.builder}")
        except (OSError, ValueError, archive.ArchiveError) as exc:
            logf.write(f"{drv.builder}: {exc}\n".encode())
            return 1
    return 0


def _exec(drv, sandbox, logf) -> int:
    if not drv.args:
        raise DerivationError(f"{drv.name}: builtin:exec needs a program")
    try:
        proc = subprocess.run(list(drv.args), env=sandbox.env, cwd=sandbox.build_dir,
                              stdin=subprocess.DEVNULL, stdout=logf, stderr=subprocess.STDOUT)
    except OSError as exc:
        logf.write(f"cannot run {drv.args[0]}: {exc}\n".encode())
        return 127
    return proc.returncode


def _fetch(drv, out) -> None:
    url = urlparse(drv.args[0])
    if url.scheme != "file":
        raise ValueError(f"unsupported fetch uri {drv.args[0]}")
    data = archive.dump_path(unquote(url.path))
    actual = base32.encode(hashlib.sha256(data).digest())
    algo, expected = drv.fixed
    if actual != expected:
        raise FetchHashMismatch(f"{drv.name}: hash mismatch for {drv.args[0]}: "
                                f"expected {algo}:{expected}, actual {algo}:{actual}")
    archive.restore(data, out)


def _write_files(drv, out) -> None:
    with open(drv.args[0], "rb") as f:
        triples = json.load(f)
    os.mkdir(out)
    for rel, mode, content in triples:
        parts = rel.split("/")
        if rel.startswith("/") or any(p in ("", ".", "..") for p in parts):
            raise ValueError(f"bad file name {rel!r} in manifest")
        target = os.path.join(out, *parts)
        os.makedirs(os.path.dirname(target), exist_ok=True)
        with open(target, "wb") as f:
            f.write(content.encode("utf-8"))
        os.chmod(target, int(mode, 8) if isinstance(mode, str) else mode)


def _union(drv, out) -> None:
    """Symlink forest over the inputs; earlier inputs win conflicts."""
    claimed: dict[str, str] = {}  # relative path -> "dir" or owning input
    conflicts = []

    def walk(src_root, rel):
        full = os.path.join(src_root, rel) if rel else src_root
        for name in sorted(os.listdir(full), key=os.fsencode):
            if not rel and name in (MANIFEST_FILE, CONFLICTS_FILE):
                continue
            sub = f"{rel}/{name}" if rel else name
            is_dir = os.path.isdir(os.path.join(full, name)) and not os.path.islink(os.path.join(full, name))
            owner = claimed.get(sub)
            if is_dir and owner in (None, "dir"):
                claimed[sub] = "dir"
                walk(src_root, sub)
            elif owner is None:
                claimed[sub] = src_root
            else:
                conflicts.append(f"{sub}\t{src_root}")

    for src in drv.args:
        if os.path.isdir(src):
            walk(src, "")
    os.mkdir(out)
    for rel in sorted(claimed, key=os.fsencode):
        dest = os.path.join(out, rel)
        if claimed[rel] == "dir":
            os.makedirs(dest, exist_ok=True)
        else:
            os.symlink(f"{claimed[rel]}/{rel}", dest)
    manifest = drv.env_dict.get("manifest")
    if manifest is not None:
        with open(os.path.join(out, MANIFEST_FILE), "w") as f:
            f.write(manifest + "\n")
    if conflicts:
        with open(os.path.join(out, CONFLICTS_FILE), "w") as f:
            f.write("".join(c + "\n" for c in conflicts))


# -- scheduler --------------------------------------------------------------

class DependencyFailed(BuildError):
    def __init__(self, message, cause):
        super().__init__(message, getattr(cause, "log", b""))
        self.cause = cause


def root_cause(err: Exception) -> Exception:
    """The failure that started a cascade, rather than "dependency failed"."""
    while isinstance(err, DependencyFailed):
        err = err.cause
    return err


class Builder:
    """Realizes derivation graphs against one store.

    Requests for the same derivation that overlap in time (from any thread)
    share a single build; ``spawns`` counts builder executions.
    """

    def __init__(self, store: Store, keep_failed: bool = True):
        self.store = store
        self.keep_failed = keep_failed
        self.spawns = 0
        self._mutex = threading.Lock()
        self._inflight: dict[tuple[str, bool], Future] = {}

    def realize(self, graph: DerivationGraph, check: bool = False, jobs: int = 1) -> dict[str, BuildResult]:
        """Build everything in ``graph``; ``check`` rebuilds the root and compares bytes."""
        if self.store.physical != self.store.root:
            raise BuildError("building requires the physical root to equal the logical root")
        with self.store.creation_guard():
            for path, (name, data) in sorted(graph.sources.items()):
                got = self.store.add_archive(data, name=name)
                if str(got) != path:
                    raise DerivationError(f"source {name} landed at {got}, expected {path}")
            order = graph.topological()
            futures: dict[str, Future] = {}
            with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
                for drv in order:
                    futures[drv.digest] = pool.submit(
                        self._after_inputs, drv, futures, check and drv.digest == graph.root)
            return {d: f.result() for d, f in futures.items()}

    def build(self, graph: DerivationGraph, check: bool = False, jobs: int = 1) -> StorePath:
        """Realize and return the root output, raising the root's error on failure."""
        result = self.realize(graph, check=check, jobs=jobs)[graph.root]
        if not result.ok:
            raise root_cause(result.error)
        return result.path

    def _after_inputs(self, drv, futures, check) -> BuildResult:
        for dep, _ in drv.input_drvs:
            res = futures[dep].result()
            if not res.ok:
                err = DependencyFailed(f"{drv.name}: dependency {res.path} failed", res.error)
                return BuildResult(drv.output, "failed", b"", error=err)
        return self._coalesced(drv, check)

    def _coalesced(self, drv, check) -> BuildResult:
        key = (drv.digest, check)
        with self._mutex:
            fut = self._inflight.get(key)
            owner = fut is None
            if owner:
                if not check and self.store.is_valid(drv.output):
                    return self._cached(drv)
                fut = self._inflight[key] = Future()
        if not owner:
            return fut.result()
        try:
            result = self._realize_one(drv, check)
        except HermitError as exc:
            result = BuildResult(drv.output, "failed", getattr(exc, "log", b"") or b"", error=exc)
        except BaseException as exc:
            fut.set_exception(exc)
            raise
        finally:
            with self._mutex:
                self._inflight.pop(key, None)
        fut.set_result(result)
        return result

    def _cached(self, drv) -> BuildResult:
        return BuildResult(drv.output, "cached", b"", frozenset(self.store.references(drv.output)))

    def _realize_one(self, drv, check) -> BuildResult:
        out = drv.output
        with self.store.path_lock(out):
            if not self.store.is_valid(out):
                result = self._run(drv, out)
                if not check:
                    return result
            elif not check:
                return self._cached(drv)
        return self._check(drv)

    def _inputs(self, drv) -> list[StorePath]:
        paths = [self.store.parse_path(p) for _, p in drv.input_drvs]
        paths += [self.store.parse_path(p) for p in drv.input_srcs]
        for p in paths:
            if not self.store.is_valid(p):
                raise BuildError(f"{drv.name}: input {p} is not valid (scheduling bug)")
        return paths

    def _spawn(self, drv, out: StorePath) -> tuple[bytes, str]:
        """Execute the builder with ``out`` as output; returns (log, kept build dir or "")."""
        self._inputs(drv)
        log_path = os.path.join(self.store.logs_dir, f"{out.base}.log")
        remove_tree(self.store.real_path(out))
        if os.path.exists(log_path):
            os.unlink(log_path)
        sandbox = Sandbox.create(drv, str(out), log_path)
        with self._mutex:
            self.spawns += 1
        try:
            status = execute_builder(drv, sandbox)
        except FetchHashMismatch:
            sandbox.dispose()
            remove_tree(self.store.real_path(out))
            raise
        logbytes = _read(log_path)
        real = self.store.real_path(out)
        if status != 0 or not os.path.lexists(real):
            remove_tree(real)
            why = f"exit status {status}" if status != 0 else "no output produced"
            kept = sandbox.build_dir if self.keep_failed else ""
            if not self.keep_failed:
                sandbox.dispose()
            where = f"; build directory kept at {kept}" if kept else ""
            raise BuildError(f"{drv.name}: builder failed ({why}); log at {log_path}{where}", logbytes)
        sandbox.dispose()
        try:
            canonicalize(real)
        except BuildError:
            remove_tree(real)
            raise
        return logbytes, log_path

    def _run(self, drv, out) -> BuildResult:
        logbytes, _ = self._spawn(drv, out)
        candidates = set(self.store.closure(self._inputs(drv))) | {out}
        refs = self.store.scan_references(out, candidates)
        drv_path = self.store.add_content(drv.text, f"{drv.name}.drv")
        self.store.register(out, refs, deriver=str(drv_path))
        return BuildResult(out, "built", logbytes, frozenset(refs))

    def _check(self, drv) -> BuildResult:
        out = drv.output
        shadow = shadow_path(out)
        with self.store.path_lock(shadow):
            try:
                logbytes, _ = self._spawn(drv, shadow)
                produced = self.store.item_archive_bytes(shadow)
            finally:
                remove_tree(self.store.real_path(shadow))
        produced = produced.replace(shadow.digest.encode(), out.digest.encode())
        registered = self.store.item_archive_bytes(out)
        if produced != registered:
            diff = archive.first_difference(registered, produced)
            err = NonDeterministicBuild(
                f"{drv.name}: rebuild differs from {out}; first difference: {diff}", logbytes)
            err.first_difference = diff
            raise err
        return BuildResult(out, "built", logbytes, frozenset(self.store.references(out)))


def _read(path) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except FileNotFoundError:
        return b""


def copy_log(store: Store, path: StorePath) -> bytes:
    return _read(os.path.join(store.logs_dir, f"{path.base}.log"))
