"""The bootstrap seed: a pinned set of host tools imported into the store.

Every generic build runs its script with the seed's ``sh`` and sees only the
seed's ``bin`` (plus its declared inputs) on PATH. The seed is added by
content, so hosts with different tool binaries get different seed paths and
therefore different downstream hashes.
"""

from __future__ import annotations

import os
import shutil
from functools import lru_cache

from . import archive
from .errors import StoreError
from .store import Store, StorePath, source_digest

SEED_NAME = "bootstrap-seed"
SEED_ROOT = "bootstrap-seed"

# name inside the seed -> host program
TOOLS = {
    "sh": "dash",
    **{t: t for t in ("cat", "chmod", "cp", "date", "env", "false", "head", "ln", "ls",
                      "mkdir", "mv", "od", "rm", "sed", "sort", "touch", "tr", "true")},
}


def _host_program(name: str) -> str:
    found = shutil.which(name, path="/usr/bin:/bin")
    if found is None:
        raise StoreError(f"bootstrap seed: host program {name!r} not found")
    return os.path.realpath(found)


@lru_cache(maxsize=None)
def seed_archive() -> bytes:
    """Canonical archive of ``bin/<tool>`` for every seed tool, built in memory."""
    entries = []
    for name in sorted(TOOLS, key=str.encode):
        with open(_host_program(TOOLS[name]), "rb") as f:
            content = f.read()
        obj = b"F\x01" + len(content).to_bytes(8, "little") + content
        entries.append(len(name).to_bytes(8, "little") + name.encode() + obj)
    bin_dir = b"D" + len(entries).to_bytes(8, "little") + b"".join(entries)
    return archive.MAGIC + b"D" + (1).to_bytes(8, "little") + (3).to_bytes(8, "little") + b"bin" + bin_dir


def seed_path(root: str) -> StorePath:
    data = seed_archive()
    return StorePath(root, source_digest(archive.content_digest(data), SEED_NAME), SEED_NAME)


def ensure_seed(store: Store) -> StorePath:
    """Import the seed if needed and keep it permanently rooted."""
    path = seed_path(store.config.logical_root)
    if not store.is_valid(path):
        got = store.add_archive(seed_archive(), name=SEED_NAME)
        assert got == path
    if store.gc_roots().get(SEED_ROOT) != path:
        store.add_gc_root(SEED_ROOT, path)
    return path
