"""Canonical archives of filesystem objects, and closure export/import.

Archive grammar (all integers 8-byte little-endian)::

    archive := "HERMITAR1" object
    object  := "F" exec(1 byte, 0|1) length content
             | "S" length target
             | "D" count entry*        entries sorted by name, bytewise
    entry   := name-length name object

Only the executable bit, file contents, symlink targets and the tree shape
are recorded, so two trees serialize identically iff they are equal after
canonicalization.
"""

from __future__ import annotations

import hashlib
import io
import os
import stat
from typing import TYPE_CHECKING, BinaryIO, Iterable

from .errors import ArchiveError, IntegrityError, InvalidPathError

if TYPE_CHECKING:
    from .store import Store, StorePath

MAGIC = b"HERMITAR1"
EXPORT_MAGIC = b"HERMITEXP1"


def _u64(n: int) -> bytes:
    return n.to_bytes(8, "little")


# -- serialization ----------------------------------------------------------

def dump_path(path: str | os.PathLike) -> bytes:
    """Canonical archive bytes of the object at ``path`` (not followed if a symlink)."""
    out = io.BytesIO()
    out.write(MAGIC)
    _dump(os.fspath(path), out)
    return out.getvalue()


def dump_file_bytes(content: bytes, executable: bool = False) -> bytes:
    return MAGIC + b"F" + (b"\x01" if executable else b"\x00") + _u64(len(content)) + content


def _dump(path: str, out: BinaryIO) -> None:
    st = os.lstat(path)
    if stat.S_ISLNK(st.st_mode):
        target = os.fsencode(os.readlink(path))
        out.write(b"S" + _u64(len(target)) + target)
    elif stat.S_ISREG(st.st_mode):
        out.write(b"F" + (b"\x01" if st.st_mode & 0o100 else b"\x00") + _u64(st.st_size))
        with open(path, "rb") as f:
            written = 0
            for chunk in iter(lambda: f.read(1 << 20), b""):
                out.write(chunk)
                written += len(chunk)
        if written != st.st_size:
            raise ArchiveError(f"{path}: file changed while archiving")
    elif stat.S_ISDIR(st.st_mode):
        names = sorted(os.fsencode(n) for n in os.listdir(path))
        out.write(b"D" + _u64(len(names)))
        for name in names:
            out.write(_u64(len(name)) + name)
            _dump(os.path.join(path, os.fsdecode(name)), out)
    else:
        raise ArchiveError(f"{path}: unsupported file type (mode {oct(st.st_mode)})")


def content_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# -- parsing ----------------------------------------------------------------

class _Cursor:
    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise ArchiveError("truncated archive")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u64(self) -> int:
        return int.from_bytes(self.take(8), "little")


def parse(data: bytes):
    """Decode archive bytes into a nested tree.

    Files become ``("file", executable, content)``, symlinks
    ``("symlink", target)`` and directories ``("dir", {name: object})``.
    Rejects unsorted or duplicate directory entries, so parse is the inverse
    of the canonical encoding.
    """
    cur = _Cursor(data)
    if cur.take(len(MAGIC)) != MAGIC:
        raise ArchiveError("not a hermit archive")
    tree = _parse_obj(cur)
    if cur.pos != len(data):
        raise ArchiveError("trailing bytes after archive")
    return tree


def _check_name(name: bytes) -> None:
    if not name or name in (b".", b"..") or b"/" in name or b"\0" in name:
        raise ArchiveError(f"invalid entry name {name!r}")


def _parse_obj(cur: _Cursor):
    tag = cur.take(1)
    if tag == b"F":
        flag = cur.take(1)
        if flag not in (b"\x00", b"\x01"):
            raise ArchiveError("bad executable flag")
        return ("file", flag == b"\x01", cur.take(cur.u64()))
    if tag == b"S":
        return ("symlink", cur.take(cur.u64()))
    if tag == b"D":
        count = cur.u64()
        entries = {}
        prev = None
        for _ in range(count):
            name = cur.take(cur.u64())
            _check_name(name)
            if prev is not None and name <= prev:
                raise ArchiveError("directory entries not sorted")
            prev = name
            entries[name] = _parse_obj(cur)
        return ("dir", entries)
    raise ArchiveError(f"unknown object tag {tag!r}")


def restore(data: bytes, dest: str | os.PathLike) -> None:
    """Materialize archive bytes at ``dest``, which must not exist yet."""
    _restore(parse(data), os.fspath(dest))


def _restore(obj, dest: str) -> None:
    kind = obj[0]
    if kind == "file":
        fd = os.open(dest, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o755 if obj[1] else 0o644)
        with os.fdopen(fd, "wb") as f:
            f.write(obj[2])
        os.chmod(dest, 0o755 if obj[1] else 0o644)
    elif kind == "symlink":
        os.symlink(os.fsdecode(obj[1]), dest)
    else:
        os.mkdir(dest)
        for name, child in obj[1].items():
            _restore(child, os.path.join(dest, os.fsdecode(name)))


def flatten(tree, prefix: str = "") -> list[tuple[str, tuple]]:
    """List ``(relative path, summary)`` for every node, in archive order."""
    kind = tree[0]
    if kind == "file":
        return [(prefix or ".", ("file", tree[1], hashlib.sha256(tree[2]).hexdigest()))]
    if kind == "symlink":
        return [(prefix or ".", ("symlink", tree[1]))]
    rows = [(prefix or ".", ("dir",))]
    for name, child in tree[1].items():
        sub = os.fsdecode(name) if not prefix else f"{prefix}/{os.fsdecode(name)}"
        rows.extend(flatten(child, sub))
    return rows


def first_difference(a: bytes, b: bytes) -> str | None:
    """Human-readable description of the first entry where two archives differ."""
    if a == b:
        return None
    rows_a = dict(flatten(parse(a)))
    rows_b = dict(flatten(parse(b)))
    for path in sorted(set(rows_a) | set(rows_b)):
        if rows_a.get(path) != rows_b.get(path):
            return f"{path}: {_describe(rows_a.get(path))} != {_describe(rows_b.get(path))}"
    return "archives differ"


def _describe(row) -> str:
    if row is None:
        return "absent"
    if row[0] == "file":
        return f"file(exec={int(row[1])}, sha256={row[2][:16]}…)"
    if row[0] == "symlink":
        return f"symlink({os.fsdecode(row[1])})"
    return "directory"


# -- closure export / import -----------------------------------------------
#
# stream := "HERMITEXP1" record* trailer
# record := "R" str(path) u64(nrefs) str(ref)* str(deriver or "") str(contentDigest) str(archive)
# trailer:= "T" u64(record count) sha256(every preceding byte, 32 raw bytes)
# str    := u64(length) bytes

def _str(b: bytes | str) -> bytes:
    if isinstance(b, str):
        b = b.encode("utf-8")
    return _u64(len(b)) + b


def export_closure(store: "Store", roots: Iterable["StorePath"], sink: BinaryIO | None = None) -> bytes:
    """Serialize ``closure(roots)`` in dependency order; returns the stream bytes.

    The stream is also written to ``sink`` when given.
    """
    with store.shared_lock():
        paths = store.closure(roots)
        h = hashlib.sha256()
        chunks = []

        def emit(b: bytes) -> None:
            h.update(b)
            chunks.append(b)

        emit(EXPORT_MAGIC)
        for path in paths:
            rec = store.query(path)
            data = dump_path(store.real_path(path))
            if content_digest(data) != rec.content_digest:
                raise IntegrityError(f"{path}: content does not match its recorded digest")
            refs = sorted(str(r) for r in rec.references)
            emit(b"R" + _str(str(path)) + _u64(len(refs)) + b"".join(_str(r) for r in refs)
                 + _str(rec.deriver or "") + _str(rec.content_digest) + _str(data))
        emit(b"T" + _u64(len(paths)))
        chunks.append(h.digest())
    stream = b"".join(chunks)
    if sink is not None:
        sink.write(stream)
    return stream


class ExportRecord:
    __slots__ = ("path", "references", "deriver", "content_digest", "data")

    def __init__(self, path, references, deriver, content_digest, data):
        self.path = path
        self.references = references
        self.deriver = deriver
        self.content_digest = content_digest
        self.data = data


def read_stream(stream: bytes) -> list[ExportRecord]:
    """Check the trailer and split a stream into records (nothing is verified beyond framing)."""
    if len(stream) < len(EXPORT_MAGIC) + 1 + 8 + 32 or not stream.startswith(EXPORT_MAGIC):
        raise ArchiveError("not a hermit export stream (bad header or too short)")
    body, checksum = stream[:-32], stream[-32:]
    if hashlib.sha256(body).digest() != checksum:
        raise ArchiveError("export stream checksum mismatch (truncated or corrupted)")
    cur = _Cursor(body, len(EXPORT_MAGIC))
    records = []
    while True:
        tag = cur.take(1)
        if tag == b"T":
            count = cur.u64()
            if cur.pos != len(body):
                raise ArchiveError("trailing bytes after trailer")
            if count != len(records):
                raise ArchiveError(f"trailer claims {count} records, stream has {len(records)}")
            return records
        if tag != b"R":
            raise ArchiveError(f"unexpected record tag {tag!r}")
        path = cur.take(cur.u64()).decode("utf-8")
        refs = [cur.take(cur.u64()).decode("utf-8") for _ in range(cur.u64())]
        deriver = cur.take(cur.u64()).decode("utf-8") or None
        digest = cur.take(cur.u64()).decode("ascii")
        data = cur.take(cur.u64())
        records.append(ExportRecord(path, refs, deriver, digest, data))


class ImportReport(list):
    """Paths registered by an import; ``skipped`` lists already-valid items."""

    def __init__(self):
        super().__init__()
        self.skipped = []


def import_stream(source: bytes | BinaryIO, store: "Store") -> ImportReport:
    """Register every record of an export stream into ``store``.

    Returns the newly registered paths. Records already valid are verified
    bit-for-bit and skipped. A failing record aborts the import; records
    before it stay registered and are listed on the raised error.
    """
    stream = source if isinstance(source, (bytes, bytearray)) else source.read()
    records = read_stream(bytes(stream))
    report = ImportReport()
    seen: set[str] = set()
    for rec in records:
        try:
            _import_record(store, rec, seen, report)
        except (ArchiveError, IntegrityError, InvalidPathError) as exc:
            done = ", ".join(str(p) for p in report) or "none"
            raise type(exc)(f"{exc} (already imported: {done})") from exc
        seen.add(rec.path)
    return report


def _import_record(store: "Store", rec: ExportRecord, seen: set[str], report: ImportReport) -> None:
    path = store.parse_path(rec.path)
    if content_digest(rec.data) != rec.content_digest:
        raise IntegrityError(f"{rec.path}: archive does not match its content digest")
    refs = set()
    for r in rec.references:
        ref = store.parse_path(r)
        if r != rec.path and r not in seen and not store.is_valid(ref):
            raise IntegrityError(f"{rec.path}: references {r}, which is neither in the stream nor present")
        refs.add(ref)
    if store.is_valid(path):
        if store.query(path).content_digest != rec.content_digest:
            raise IntegrityError(f"{rec.path}: already present with different content")
        report.skipped.append(path)
        return
    store.add_archive(rec.data, path=path, references=refs, deriver=rec.deriver)
    report.append(path)
