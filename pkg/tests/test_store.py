import os
import random

import pytest

from hermit import archive
from hermit.errors import CollisionError, IntegrityError, InvalidPathError, StoreError
from hermit.store import StoreConfig, compute_store_digest, parse_store_path

import oracles
from conftest import new_store


def test_empty_payload_digest_frozen():
    # frozen from the independent oracle in tests/oracles.py
    assert oracles.store_digest(b"") == "wfqc8hlqzhf196pvyk49jvxr4hkswhg4"
    assert compute_store_digest(b"") == "wfqc8hlqzhf196pvyk49jvxr4hkswhg4"


@pytest.mark.parametrize("payload", [b"x", b"source:00:hello", "ü".encode() * 50])
def test_digest_matches_oracle(payload):
    assert compute_store_digest(payload) == oracles.store_digest(payload)


def test_add_content_path_matches_oracle(store):
    p = store.add_content(b"hello\n", "greeting")
    data = archive.dump_file_bytes(b"hello\n")
    assert str(p) == oracles.source_path(store.root, data, "greeting")
    assert open(store.real_path(p), "rb").read() == b"hello\n"
    assert store.add_content(b"hello\n", "greeting") == p
    assert store.verify_item(p)


def test_add_directory_and_permissions(store, tmp_path):
    src = tmp_path / "tree"
    (src / "bin").mkdir(parents=True)
    (src / "bin" / "tool").write_text("#!/bin/sh\n")
    os.chmod(src / "bin" / "tool", 0o700)
    (src / "data").write_text("d")
    os.symlink("bin/tool", src / "link")
    p = store.add_content(src, "tree")
    real = store.real_path(p)
    assert str(p) == oracles.source_path(store.root, oracles.nar(src), "tree")
    assert oct(os.stat(os.path.join(real, "bin", "tool")).st_mode & 0o777) == "0o555"
    assert oct(os.stat(os.path.join(real, "data")).st_mode & 0o777) == "0o444"
    assert os.lstat(os.path.join(real, "data")).st_mtime == 1
    assert os.readlink(os.path.join(real, "link")) == "bin/tool"


@pytest.mark.parametrize("name", ["", ".hidden", "-dash", "a/b", "sp ace"])
def test_invalid_names(store, name):
    with pytest.raises(InvalidPathError):
        store.add_content(b"x", name)


def test_parse_store_path():
    root = "/hermit/store"
    d = "0" * 32
    p = parse_store_path(f"{root}/{d}-foo-1.0", root)
    assert p.name == "foo-1.0" and p.digest == d
    for bad in [f"/other/{d}-foo", f"{root}/{d}foo", f"{root}/{'e' * 32}-foo", f"{root}/{d}-foo/bin"]:
        with pytest.raises(InvalidPathError):
            parse_store_path(bad, root)


def test_config_validation(tmp_path):
    with pytest.raises(StoreError):
        StoreConfig.for_state(tmp_path, logical_root="relative")
    with pytest.raises(StoreError):
        StoreConfig.for_state(tmp_path, logical_root="/x/")


def test_register_requires_valid_references(store):
    a = store.add_content(b"a", "a")
    ghost = store.make_path("1" * 32, "ghost")
    with pytest.raises(IntegrityError):
        store.add_content(b"b", "b", references=[ghost])
    b = store.add_content(str(a).encode(), "b", references=[a])
    assert store.references(b) == {a}
    assert store.query(b).registered_at == 2


def test_collision_refused(store):
    p = store.add_content(b"one", "item")
    data = archive.dump_file_bytes(b"two")
    with pytest.raises(CollisionError):
        store.add_archive(data, path=p)


def test_database_sentinel(store):
    store.add_content(b"x", "x")
    with open(store.config.db_path) as f:
        text = f.read()
    assert text.endswith("ok\n")
    with open(store.config.db_path, "w") as f:
        f.write(text[:-3])
    with pytest.raises(IntegrityError):
        store.records()


def test_verify_detects_tampering(store):
    p = store.add_content(b"good", "f")
    real = store.real_path(p)
    os.chmod(real, 0o644)
    with open(real, "wb") as f:
        f.write(b"evil")
    assert not store.verify_item(p)


def test_scan_references(store):
    a = store.add_content(b"a", "a")
    b = store.add_content(b"b", "b")
    c = store.add_content(f"uses {a}/bin".encode(), "c")
    assert store.scan_references(c, [a, b]) == {a}


def test_closure_order_dependencies_first(store):
    a = store.add_content(b"a", "a")
    b = store.add_content(str(a).encode(), "b", references=[a])
    c = store.add_content(f"{a}{b}".encode(), "c", references=[a, b])
    assert store.closure([c]) == [a, b, c]
    assert store.closure([a]) == [a]


def test_recovery_removes_unregistered_entries(tmp_path):
    s = new_store(tmp_path / "s")
    junk = os.path.join(s.physical, "1" * 32 + "-junk")
    os.mkdir(junk)
    os.mkdir(os.path.join(s.physical, ".tmp-crash"))
    other = os.path.join(s.physical, "not-an-item")
    os.mkdir(other)
    new_store(tmp_path / "s")
    assert not os.path.exists(junk)
    assert not os.path.exists(os.path.join(s.physical, ".tmp-crash"))
    assert os.path.exists(other)


def test_gc_roots_and_collection(store):
    a = store.add_content(b"a", "a")
    b = store.add_content(str(a).encode(), "b", references=[a])
    dead = store.add_content(b"dead", "dead")
    store.add_gc_root("keep/b", b)
    report = store.collect_garbage()
    assert report.deleted == [dead]
    assert report.freed_bytes == 4
    assert not os.path.exists(store.real_path(dead))
    assert store.is_valid(a) and store.is_valid(b)
    assert store.gc_roots() == {"keep/b": b}
    store.remove_gc_root("keep/b")
    assert set(store.collect_garbage().deleted) == {a, b}


def test_gc_root_conflict_and_validation(store):
    a = store.add_content(b"a", "a")
    b = store.add_content(b"b", "b")
    store.add_gc_root("r", a)
    store.add_gc_root("r", a)
    with pytest.raises(StoreError):
        store.add_gc_root("r", b)
    with pytest.raises(StoreError):
        store.add_gc_root("../escape", a)
    with pytest.raises(StoreError):
        store.add_gc_root("ghost", store.make_path("1" * 32, "ghost"))


def test_indirect_root_follows_link_and_prunes(store, tmp_path):
    a = store.add_content(b"dir", "a")
    link = tmp_path / "result"
    os.symlink(str(a), link)
    store.add_indirect_root(str(link))
    assert store.collect_garbage().deleted == []
    os.unlink(link)
    assert store.collect_garbage().deleted == [a]
    assert store.gc_roots() == {}


def test_root_to_directory_item_is_honored(store, tmp_path):
    d = tmp_path / "d"
    d.mkdir()
    (d / "f").write_text("x")
    item = store.add_content(d, "d")
    store.add_gc_root("dir", item)
    assert store.collect_garbage().deleted == []


def test_gc_skips_busy_items(store):
    a = store.add_content(b"a", "a")
    b = store.add_content(str(a).encode(), "b", references=[a])
    with store.path_lock(b):
        report = store.collect_garbage()
    assert report.deleted == []
    assert set(report.skipped) == {a, b}
    assert set(store.collect_garbage().deleted) == {a, b}


def _random_dag(store, rng, n):
    items, edges = [], {}
    for i in range(n):
        deps = rng.sample(items, rng.randint(0, min(3, len(items))))
        body = f"node {i}\n" + "".join(f"{d}\n" for d in deps)
        p = store.add_content(body.encode(), f"n{i}", references=deps)
        items.append(p)
        edges[p] = deps
    return items, edges


def check_random_gc(store, seed):
    rng = random.Random(seed)
    items, edges = _random_dag(store, rng, rng.randint(1, 20))
    roots = rng.sample(items, rng.randint(0, min(4, len(items))))
    for i, r in enumerate(roots):
        store.add_gc_root(f"r{i}", r)
    live = oracles.reachable(edges, roots)
    report = store.collect_garbage()
    assert set(report.deleted) == set(items) - live
    for p in live:
        assert store.is_valid(p) and store.verify_item(p)
    for p in report.deleted:
        assert not os.path.lexists(store.real_path(p))
    return set(report.deleted) == set(items) - live


@pytest.mark.parametrize("seed", range(10))
def test_random_dag_gc(tmp_path, seed):
    check_random_gc(new_store(tmp_path / "s"), seed)
