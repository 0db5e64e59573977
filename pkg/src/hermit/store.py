"""The content-addressed store.

Items live at ``<root>/<digest>-<name>`` and never change once registered.
Metadata is a single text database, rewritten atomically on each change::

    item <rendered-path> <contentDigest> <deriver-or--> <ref-count> <refs...>
    ...
    ok

Lock discipline: ``<db>.lock`` guards database rewrites (exclusive) and
consistent reads (shared); ``<db>.gc.lock`` is held shared by anything that
creates items and exclusively by the garbage collector; each item has a
``locks/<digest>-<name>.lock`` beside the store directory that serializes
writers to that path.
"""

from __future__ import annotations

import fcntl
import hashlib
import heapq
import logging
import os
import re
import tempfile
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterable

from . import archive, base32
from .errors import CollisionError, IntegrityError, InvalidPathError, StoreError
from .fsutil import LockBusy, canonicalize, file_lock, remove_tree, tree_size

log = logging.getLogger(__name__)

DEFAULT_LOGICAL_ROOT = "/hermit/store"
DIGEST_BYTES = 20
DIGEST_CHARS = 32
_NAME_RE = re.compile(r"[A-Za-z0-9+._?=-]+\Z")


def compute_store_digest(payload: bytes) -> str:
    """First 160 bits of SHA-256(payload), in store base32 (32 characters)."""
    return base32.encode(hashlib.sha256(payload).digest()[:DIGEST_BYTES])


def check_name(name: str) -> None:
    if not name or not _NAME_RE.match(name) or name[0] in ".-":
        raise InvalidPathError(f"invalid store item name {name!r}")


def source_digest(content_hex: str, name: str) -> str:
    return compute_store_digest(f"source:{content_hex}:{name}".encode())


@dataclass(frozen=True)
class StorePath:
    root: str
    digest: str
    name: str

    def __post_init__(self):
        if len(self.digest) != DIGEST_CHARS or not base32.is_valid(self.digest, DIGEST_BYTES):
            raise InvalidPathError(f"invalid store digest {self.digest!r}")
        check_name(self.name)

    @property
    def base(self) -> str:
        return f"{self.digest}-{self.name}"

    def __str__(self) -> str:
        return f"{self.root}/{self.digest}-{self.name}"

    def __lt__(self, other: "StorePath") -> bool:
        return str(self).encode() < str(other).encode()

    def __truediv__(self, rel: str) -> str:
        return f"{self}/{rel}"


def parse_store_path(text: str, root: str) -> StorePath:
    prefix = root + "/"
    if not text.startswith(prefix):
        raise InvalidPathError(f"{text!r} is not in the store {root}")
    base = text[len(prefix):]
    if "/" in base or len(base) < DIGEST_CHARS + 2 or base[DIGEST_CHARS] != "-":
        raise InvalidPathError(f"{text!r} is not a store item path")
    return StorePath(root, base[:DIGEST_CHARS], base[DIGEST_CHARS + 1:])


@dataclass(frozen=True)
class StoreConfig:
    logical_root: str = DEFAULT_LOGICAL_ROOT
    physical_root: str | None = None
    db_path: str = ""
    roots_dir: str = ""

    def __post_init__(self):
        if not os.path.isabs(self.logical_root) or (self.logical_root != "/" and self.logical_root.endswith("/")):
            raise StoreError(f"logical store root must be absolute without trailing '/': {self.logical_root!r}")
        if self.physical_root is None:
            object.__setattr__(self, "physical_root", self.logical_root)
        if not self.db_path or not self.roots_dir:
            raise StoreError("store config needs db_path and roots_dir")

    @classmethod
    def for_state(cls, state_dir, logical_root=DEFAULT_LOGICAL_ROOT, physical_root=None):
        state_dir = os.path.abspath(os.fspath(state_dir))
        return cls(logical_root=logical_root, physical_root=physical_root,
                   db_path=os.path.join(state_dir, "store.db"),
                   roots_dir=os.path.join(state_dir, "gcroots"))

    @property
    def buildable(self) -> bool:
        return os.path.realpath(self.physical_root) == os.path.realpath(self.logical_root)


@dataclass(frozen=True)
class StoreItemRecord:
    path: StorePath
    content_digest: str
    references: frozenset = field(default_factory=frozenset)
    deriver: str | None = None
    registered_at: int = 0


@dataclass
class GCReport:
    deleted: list = field(default_factory=list)
    freed_bytes: int = 0
    skipped: list = field(default_factory=list)


class Store:
    def __init__(self, config: StoreConfig):
        self.config = config
        self.root = config.logical_root
        self.physical = config.physical_root
        self._cache_key = None
        self._cache: dict[str, StoreItemRecord] = {}
        self._cache_mutex = threading.Lock()
        self.init()

    # -- layout -------------------------------------------------------------

    def init(self) -> None:
        os.makedirs(self.physical, exist_ok=True)
        os.makedirs(os.path.dirname(self.config.db_path), exist_ok=True)
        os.makedirs(self.config.roots_dir, exist_ok=True)
        os.makedirs(self.logs_dir, exist_ok=True)
        os.makedirs(self.locks_dir, exist_ok=True)
        if not os.path.exists(self.config.db_path):
            with file_lock(self._db_lock):
                if not os.path.exists(self.config.db_path):
                    self._write_db({})
        try:
            with file_lock(self._gc_lock, exclusive=True, blocking=False):
                self._recover()
        except LockBusy:
            pass

    @property
    def logs_dir(self) -> str:
        return os.path.join(os.path.dirname(os.path.abspath(self.physical)), "logs")

    @property
    def _db_lock(self) -> str:
        return self.config.db_path + ".lock"

    @property
    def _gc_lock(self) -> str:
        return self.config.db_path + ".gc.lock"

    @property
    def locks_dir(self) -> str:
        return os.path.join(os.path.dirname(os.path.abspath(self.physical)), "locks")

    def _item_lock(self, path: StorePath) -> str:
        # lock files are never deleted: unlinking a lock someone waits on breaks mutual exclusion
        return os.path.join(self.locks_dir, path.base + ".lock")

    def real_path(self, path: StorePath) -> str:
        return os.path.join(self.physical, path.base)

    def parse_path(self, text: str) -> StorePath:
        return parse_store_path(text, self.root)

    def item_of(self, text: str) -> StorePath | None:
        """The store item containing ``text`` (a path inside the logical or physical root)."""
        for prefix in (self.root, self.physical):
            if text.startswith(prefix + "/"):
                base = text[len(prefix) + 1:].split("/", 1)[0]
                try:
                    return parse_store_path(f"{self.root}/{base}", self.root)
                except InvalidPathError:
                    return None
        return None

    def make_path(self, digest: str, name: str) -> StorePath:
        return StorePath(self.root, digest, name)

    # -- locks --------------------------------------------------------------

    @contextmanager
    def path_lock(self, path: StorePath, blocking=True):
        with file_lock(self._item_lock(path), exclusive=True, blocking=blocking):
            yield

    def creation_guard(self):
        """Held (shared) while items are being created so GC cannot run underneath."""
        return file_lock(self._gc_lock, exclusive=False)

    def shared_lock(self):
        return file_lock(self._db_lock, exclusive=False)

    # -- database -----------------------------------------------------------

    def _read_db(self) -> dict[str, StoreItemRecord]:
        try:
            st = os.stat(self.config.db_path)
        except FileNotFoundError:
            return {}
        key = (st.st_ino, st.st_mtime_ns, st.st_size)
        with self._cache_mutex:
            if key == self._cache_key:
                return dict(self._cache)
        with open(self.config.db_path, encoding="utf-8") as f:
            lines = f.read().splitlines()
        if not lines or lines[-1] != "ok":
            raise IntegrityError(f"{self.config.db_path}: missing 'ok' sentinel (partial write?)")
        records = {}
        for seq, line in enumerate(lines[:-1], start=1):
            parts = line.split(" ")
            if parts[0] != "item" or len(parts) < 5:
                raise IntegrityError(f"{self.config.db_path}:{seq}: malformed line")
            nrefs = int(parts[4])
            if len(parts) != 5 + nrefs:
                raise IntegrityError(f"{self.config.db_path}:{seq}: reference count mismatch")
            path = self.parse_path(parts[1])
            records[parts[1]] = StoreItemRecord(
                path=path,
                content_digest=parts[2],
                references=frozenset(self.parse_path(r) for r in parts[5:]),
                deriver=None if parts[3] == "-" else parts[3],
                registered_at=seq,
            )
        with self._cache_mutex:
            self._cache_key = key
            self._cache = records
        return dict(records)

    def _write_db(self, records: dict[str, StoreItemRecord]) -> None:
        lines = []
        for key, rec in records.items():
            refs = sorted(str(r) for r in rec.references)
            lines.append(" ".join(["item", key, rec.content_digest, rec.deriver or "-", str(len(refs))] + refs))
        lines.append("ok")
        directory = os.path.dirname(self.config.db_path)
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".db-")
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, self.config.db_path)

    def records(self) -> dict[str, StoreItemRecord]:
        with self.shared_lock():
            return self._read_db()

    def valid_paths(self) -> list[StorePath]:
        return [r.path for r in self.records().values()]

    def is_valid(self, path: StorePath) -> bool:
        return str(path) in self.records()

    def query(self, path: StorePath) -> StoreItemRecord:
        try:
            return self.records()[str(path)]
        except KeyError:
            raise StoreError(f"{path} is not a valid store item") from None

    def references(self, path: StorePath) -> set[StorePath]:
        return set(self.query(path).references)

    def register(self, path: StorePath, references: Iterable[StorePath] = (), deriver: str | None = None,
                 content_digest: str | None = None) -> StoreItemRecord:
        """Record an on-disk item as valid. All references must already be valid (or be ``path``)."""
        references = frozenset(references)
        real = self.real_path(path)
        if not os.path.lexists(real):
            raise StoreError(f"cannot register {path}: nothing at {real}")
        if content_digest is None:
            content_digest = archive.content_digest(archive.dump_path(real))
        with file_lock(self._db_lock):
            records = self._read_db()
            for ref in references:
                if ref != path and str(ref) not in records:
                    raise IntegrityError(f"cannot register {path}: reference {ref} is not valid")
            existing = records.get(str(path))
            if existing is not None:
                if existing.content_digest != content_digest:
                    raise CollisionError(f"{path} already registered with content {existing.content_digest}, "
                                         f"refusing different content {content_digest}")
                return existing
            rec = StoreItemRecord(path, content_digest, references, deriver, len(records) + 1)
            records[str(path)] = rec
            self._write_db(records)
            return rec

    # -- adding content -----------------------------------------------------

    def add_content(self, obj, name: str, references: Iterable[StorePath] = ()) -> StorePath:
        """Add bytes (as a plain file) or a filesystem object by content.

        The path is ``compute_store_digest("source:<sha256 of archive>:<name>")``;
        re-adding identical content returns the same path without rewriting it.
        """
        check_name(name)
        if isinstance(obj, (bytes, bytearray)):
            data = archive.dump_file_bytes(bytes(obj))
        else:
            data = archive.dump_path(obj)
        return self.add_archive(data, name=name, references=references)

    def add_archive(self, data: bytes, name: str | None = None, path: StorePath | None = None,
                    references: Iterable[StorePath] = (), deriver: str | None = None) -> StorePath:
        digest_hex = archive.content_digest(data)
        if path is None:
            check_name(name)
            path = self.make_path(source_digest(digest_hex, name), name)
        with self.creation_guard(), self.path_lock(path):
            rec = self.records().get(str(path))
            if rec is not None:
                if rec.content_digest != digest_hex:
                    raise CollisionError(f"{path} already holds content {rec.content_digest}, not {digest_hex}")
                return path
            real = self.real_path(path)
            remove_tree(real)
            tmp = tempfile.mkdtemp(prefix=".tmp-", dir=self.physical)
            try:
                staged = os.path.join(tmp, "item")
                archive.restore(data, staged)
                canonicalize(staged)
                if archive.dump_path(staged) != data:
                    raise IntegrityError(f"{path}: archive is not in canonical form")
                os.rename(staged, real)
            finally:
                remove_tree(tmp)
            try:
                self.register(path, references, deriver, content_digest=digest_hex)
            except Exception:
                remove_tree(real)
                raise
        return path

    # -- queries ------------------------------------------------------------

    def item_archive_bytes(self, path: StorePath) -> bytes:
        return archive.dump_path(self.real_path(path))

    def verify_item(self, path: StorePath) -> bool:
        rec = self.query(path)
        try:
            data = self.item_archive_bytes(path)
        except OSError:
            return False
        return archive.content_digest(data) == rec.content_digest

    def scan_references(self, path: StorePath, candidates: Iterable[StorePath]) -> set[StorePath]:
        """Candidates whose 32-character digest occurs anywhere in the item's archive bytes."""
        data = archive.dump_path(self.real_path(path))
        return {c for c in candidates if c.digest.encode() in data}

    def closure(self, roots: Iterable[StorePath]) -> list[StorePath]:
        """Everything reachable from ``roots``, dependencies first, ties by rendered path bytes."""
        records = self.records()
        todo = list(roots)
        seen: dict[str, StorePath] = {}
        while todo:
            p = todo.pop()
            key = str(p)
            if key in seen:
                continue
            rec = records.get(key)
            if rec is None:
                raise IntegrityError(f"closure: {p} is not a valid store item")
            seen[key] = p
            todo.extend(rec.references)
        deps = {k: {str(r) for r in records[k].references if str(r) != k} for k in seen}
        dependents: dict[str, list[str]] = {k: [] for k in seen}
        for k, ds in deps.items():
            for d in ds:
                dependents[d].append(k)
        pending = {k: len(ds) for k, ds in deps.items()}
        ready = [(k.encode(), k) for k, n in pending.items() if n == 0]
        heapq.heapify(ready)
        order = []
        while ready:
            _, k = heapq.heappop(ready)
            order.append(seen[k])
            for dep in dependents[k]:
                pending[dep] -= 1
                if pending[dep] == 0:
                    heapq.heappush(ready, (dep.encode(), dep))
        if len(order) != len(seen):
            raise IntegrityError("closure: reference cycle in store database")
        return order

    # -- GC roots -----------------------------------------------------------

    def _root_link(self, name: str) -> str:
        parts = name.split("/")
        if not name or any(p in ("", ".", "..") for p in parts):
            raise StoreError(f"invalid GC root name {name!r}")
        return os.path.join(self.config.roots_dir, *parts)

    def add_gc_root(self, name: str, target: StorePath) -> str:
        if not self.is_valid(target):
            raise StoreError(f"cannot root {target}: not a valid store item")
        link = self._root_link(name)
        os.makedirs(os.path.dirname(link), exist_ok=True)
        if os.path.lexists(link):
            if os.readlink(link) == str(target):
                return link
            raise StoreError(f"GC root {name!r} already exists and points at {os.readlink(link)}")
        os.symlink(str(target), link)
        return link

    def add_indirect_root(self, link_path: str) -> str:
        """Root whatever ``link_path`` points at, for as long as ``link_path`` exists."""
        link_path = os.path.abspath(link_path)
        name = "auto/" + hashlib.sha256(link_path.encode()).hexdigest()[:32]
        link = self._root_link(name)
        os.makedirs(os.path.dirname(link), exist_ok=True)
        if os.path.lexists(link):
            os.unlink(link)
        os.symlink(link_path, link)
        return link

    def remove_gc_root(self, name: str) -> None:
        link = self._root_link(name)
        if os.path.lexists(link):
            os.unlink(link)

    def _resolve_root(self, link: str) -> StorePath | None:
        current = link
        for _ in range(40):
            if not os.path.islink(current):
                return None
            target = os.path.join(os.path.dirname(current), os.readlink(current))
            item = self.item_of(os.path.normpath(target))
            if item is not None:
                return item
            current = target
        return None

    def gc_roots(self, prune=False) -> dict[str, StorePath]:
        roots = {}
        for dirpath, dirnames, filenames in os.walk(self.config.roots_dir):
            # links to directories show up in dirnames; os.walk does not descend into them
            for fn in sorted(filenames + dirnames):
                link = os.path.join(dirpath, fn)
                if not os.path.islink(link):
                    continue
                target = self._resolve_root(link)
                name = os.path.relpath(link, self.config.roots_dir)
                if target is None:
                    if prune:
                        log.info("removing dangling GC root %s", name)
                        os.unlink(link)
                    continue
                roots[name] = target
        return roots

    # -- garbage collection -------------------------------------------------

    def _recover(self) -> None:
        """Drop on-disk leftovers that never got registered (crashed builds or adds)."""
        records = self._read_db()
        for entry in os.listdir(self.physical):
            full = os.path.join(self.physical, entry)
            if entry.startswith(".tmp-"):
                remove_tree(full)
                continue
            try:
                path = self.parse_path(f"{self.root}/{entry}")
            except InvalidPathError:
                continue
            if str(path) in records:
                continue
            try:
                with self.path_lock(path, blocking=False):
                    log.warning("removing unregistered store entry %s", full)
                    remove_tree(full)
            except LockBusy:
                pass

    def collect_garbage(self) -> GCReport:
        """Delete every valid item outside the closure of the GC roots."""
        report = GCReport()
        with file_lock(self._gc_lock, exclusive=True):
            self._recover()
            roots = self.gc_roots(prune=True)
            records = self.records()
            valid_roots = []
            for name, target in roots.items():
                if str(target) in records:
                    valid_roots.append(target)
                else:
                    log.warning("GC root %s points at invalid item %s", name, target)
            live = {str(p) for p in self.closure(valid_roots)}
            with file_lock(self._db_lock):
                records = self._read_db()
                dead = [k for k in records if k not in live]
                fds = {}
                busy = []
                try:
                    for k in dead:
                        lockfile = self._item_lock(records[k].path)
                        fd = os.open(lockfile, os.O_RDWR | os.O_CREAT, 0o644)
                        try:
                            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
                            fds[k] = fd
                        except BlockingIOError:
                            os.close(fd)
                            busy.append(records[k].path)
                    keep = {str(p) for p in self._closure_in(records, busy)}
                    doomed = [k for k in dead if k not in keep]
                    for k in doomed:
                        report.deleted.append(records[k].path)
                    remaining = {k: r for k, r in records.items() if k not in set(doomed)}
                    self._write_db(remaining)
                    for k in doomed:
                        real = self.real_path(records[k].path)
                        if os.path.lexists(real):
                            report.freed_bytes += tree_size(real)
                            remove_tree(real)
                    for p in busy:
                        log.warning("skipping %s: in use", p)
                    report.skipped = [records[k].path for k in dead if k in keep]
                finally:
                    for fd in fds.values():
                        os.close(fd)
        report.deleted.sort()
        return report

    @staticmethod
    def _closure_in(records, paths):
        todo = [str(p) for p in paths]
        seen = set()
        while todo:
            k = todo.pop()
            if k in seen or k not in records:
                continue
            seen.add(k)
            todo.extend(str(r) for r in records[k].references)
        return [records[k].path for k in seen]
