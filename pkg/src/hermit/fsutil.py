import fcntl
import os
import shutil
import stat
from contextlib import contextmanager

from .errors import BuildError

EPOCH = 1


class LockBusy(Exception):
    pass


@contextmanager
def file_lock(path, exclusive=True, blocking=True):
    """flock(2) on ``path``; one open file description per call, so threads contend too."""
    fd = os.open(path, os.O_RDWR | os.O_CREAT, 0o644)
    try:
        flags = fcntl.LOCK_EX if exclusive else fcntl.LOCK_SH
        if not blocking:
            flags |= fcntl.LOCK_NB
        try:
            fcntl.flock(fd, flags)
        except BlockingIOError:
            raise LockBusy(path) from None
        yield
    finally:
        os.close(fd)


def canonicalize(root):
    """Normalize a freshly produced tree in place.

    Timestamps go to 1, permissions to 0444/0555 (only the owner-exec bit of
    regular files survives), symlinks are kept as they are. Devices, fifos,
    sockets and multiply-linked files are refused.
    """
    root = os.fspath(root)
    st = os.lstat(root)
    if stat.S_ISDIR(st.st_mode):
        for dirpath, dirnames, filenames in os.walk(root, topdown=False):
            for name in filenames + dirnames:
                _canon_one(os.path.join(dirpath, name))
    _canon_one(root)


def _canon_one(path):
    st = os.lstat(path)
    mode = st.st_mode
    if stat.S_ISLNK(mode):
        pass
    elif stat.S_ISREG(mode):
        if st.st_nlink > 1:
            raise BuildError(f"{path}: hard link with {st.st_nlink} names is not allowed in outputs")
        os.chmod(path, 0o555 if mode & 0o100 else 0o444)
    elif stat.S_ISDIR(mode):
        os.chmod(path, 0o555)
    else:
        raise BuildError(f"{path}: special file (mode {oct(mode)}) is not allowed in outputs")
    os.utime(path, (EPOCH, EPOCH), follow_symlinks=False)


def make_writable(root):
    root = os.fspath(root)
    if os.path.islink(root) or not os.path.isdir(root):
        return
    os.chmod(root, 0o755)
    for dirpath, dirnames, _ in os.walk(root):
        for d in dirnames:
            p = os.path.join(dirpath, d)
            if not os.path.islink(p):
                os.chmod(p, 0o755)


def remove_tree(path):
    path = os.fspath(path)
    if not os.path.lexists(path):
        return
    if os.path.isdir(path) and not os.path.islink(path):
        make_writable(path)
        shutil.rmtree(path)
    else:
        os.unlink(path)


def tree_size(path):
    total = 0
    path = os.fspath(path)
    if not os.path.isdir(path) or os.path.islink(path):
        return os.lstat(path).st_size
    for dirpath, dirnames, filenames in os.walk(path):
        for name in filenames + dirnames:
            total += os.lstat(os.path.join(dirpath, name)).st_size
    return total


def atomic_symlink(target, link):
    """Point ``link`` at ``target``, replacing any previous link with one rename."""
    tmp = f"{link}.tmp-{os.getpid()}-{id(target) & 0xffff:x}"
    if os.path.lexists(tmp):
        os.unlink(tmp)
    os.symlink(target, tmp)
    os.replace(tmp, link)
