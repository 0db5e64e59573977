import random
import shutil

import pytest

from hermit.deriv import (BOOTSTRAP, FLAG_SEPARATOR, Compiler, Derivation, DerivationGraph, escape,
                          output_path, parse, serialize, unescape)
from hermit.errors import DerivationError
from hermit.model import load_recipes, make_variant
from hermit.store import StorePath

import oracles
from conftest import RECIPES, VARIANTS

ROOT = "/hermit/store"
SEED = StorePath(ROOT, "0" * 32, "bootstrap-seed")
_CHARS = "ab;=,[]()%:\n\t\x01é/ -_"


def rand_text(rng, n=6):
    return "".join(rng.choice(_CHARS) for _ in range(rng.randint(0, n)))


def rand_drv(rng):
    keys = sorted({rand_text(rng) or "k" for _ in range(rng.randint(0, 4))}, key=str.encode)
    fixed = rng.random() < 0.2
    return Derivation(
        name=rand_text(rng) or "n",
        system=rand_text(rng),
        builder="builtin:fetch" if fixed else rng.choice(["builtin:exec", "builtin:union"]),
        args=tuple(rand_text(rng) or "a" for _ in range(rng.randint(0, 3))),
        env=tuple((k, rand_text(rng)) for k in keys),
        input_drvs=tuple((rng.randbytes(32).hex(), rand_text(rng)) for _ in range(rng.randint(0, 3))),
        input_srcs=tuple(rand_text(rng) or "s" for _ in range(rng.randint(0, 3))),
        fixed=("sha256", rand_text(rng)) if fixed else None,
    )


def test_empty_serialization_exact():
    d = Derivation(name="x-1", system="test", builder="builtin:write-files")
    assert serialize(d) == (b"Drv(name=x-1;system=test;builder=builtin:write-files;"
                            b"args=[];env=[];inputDrvs=[];inputSrcs=[];fixed=-)")


def test_env_semicolon_is_escaped():
    d = Derivation(name="x", system="s", builder="builtin:exec", env=(("K", "a;b"),))
    assert b"env=[K=a%3Bb]" in serialize(d)


def test_empty_list_items_rejected():
    with pytest.raises(DerivationError):
        Derivation(name="x", system="s", builder="builtin:exec", args=("",))


def test_escape():
    assert escape("a;b") == "a%3Bb"
    assert escape("%=,[]()") == "%25%3D%2C%5B%5D%28%29"
    assert escape("\n") == "%0A"
    assert escape("é") == "é"
    assert unescape(escape("x;%\x1f")) == "x;%\x1f"


def test_random_roundtrip_against_oracle_parser():
    rng = random.Random(7)
    for _ in range(1000):
        d = rand_drv(rng)
        text = serialize(d)
        assert parse(text) == d
        o = oracles.parse_drv(text)
        assert o["name"] == d.name and o["args"] == list(d.args)
        assert o["env"] == list(d.env)
        assert o["inputDrvs"] == list(d.input_drvs)
        assert o["inputSrcs"] == list(d.input_srcs)
        assert o["fixed"] == d.fixed


def test_variants_map_to_distinct_paths():
    rng = random.Random(11)
    texts, paths = set(), set()
    while len(texts) < 10_000:
        d = rand_drv(rng)
        if d.fixed is not None or not (d.name.isascii() and d.name.isalnum()):
            d = Derivation(name="pkg", system=d.system, builder="builtin:exec", args=d.args, env=d.env,
                           input_drvs=d.input_drvs, input_srcs=d.input_srcs)
        if d.text in texts:
            continue
        texts.add(d.text)
        paths.add(str(output_path(d, ROOT)))
    assert len(paths) == len(texts)


def test_validation():
    with pytest.raises(DerivationError):
        Derivation(name="x", system="s", builder="/bin/sh")
    with pytest.raises(DerivationError):
        Derivation(name="x", system="s", builder="builtin:fetch")
    with pytest.raises(DerivationError):
        Derivation(name="x", system="s", builder="builtin:exec", fixed=("sha256", "x"))
    with pytest.raises(DerivationError):
        Derivation(name="x", system="s", builder="builtin:exec", env=(("b", ""), ("a", "")))
    with pytest.raises(DerivationError):
        Derivation(name="x", system="s", builder="builtin:exec", input_drvs=(("a:b", "p"),))
    with pytest.raises(DerivationError):
        Derivation(name="x", system="s", builder="builtin:fetch", fixed=("md5", "x"))
    with pytest.raises(DerivationError):
        parse(b"Drv(name=x)")


def test_output_paths_match_oracle(recipes):
    graph = Compiler(SEED, "x86_64-linux").compile(recipes.resolve("openmpi"))
    for drv in graph.derivations.values():
        if drv.fixed is None:
            assert str(drv.output) == oracles.output_path(ROOT, drv.text, drv.name)
        else:
            assert str(drv.output) == oracles.fixed_path(ROOT, drv.fixed[1], drv.name)


def test_generic_lowering(recipes):
    ompi = recipes.resolve("openmpi")
    graph = Compiler(SEED, "x86_64-linux").compile(ompi)
    drv = graph.root_drv
    env = drv.env_dict
    assert drv.builder == "builtin:exec"
    assert drv.args[0].endswith("-bootstrap-0/bin/sh") and drv.args[1] == "-c"
    assert drv.args[2].startswith("set -e\n") and drv.args[2].endswith("sh build.sh\n")
    assert env["out"] == ""
    assert env["configureFlags"] == "--enable-oshmem"
    assert env["src"].endswith("-openmpi-1.8.1-source")
    assert env["PATH"].split(":")[0].endswith("-bootstrap-0/bin")
    assert {"input_hwloc", "input_gfortran", "input_pkg_config", "input_bootstrap"} <= set(env)
    # bootstrap, four fetches, four builds
    assert len(graph.derivations) == 9
    assert [d.name for d in graph.topological()][-1] == "openmpi-1.8.1"


def test_configure_flags_join():
    assert FLAG_SEPARATOR == "\x1f"


def test_fixed_output_shared_across_uris(recipes, tmp_path):
    hwloc = recipes.resolve("hwloc")
    moved = make_variant(hwloc, source=type(hwloc.source)("file-fetch", "file:///elsewhere", hwloc.source.sha256))
    c = Compiler(SEED, "x86_64-linux")
    a = c.compile(hwloc).root_drv.env_dict["src"]
    b = c.compile(moved).root_drv.env_dict["src"]
    assert a == b
    assert c.compile(hwloc).root_drv.output == c.compile(moved).root_drv.output


def test_trivial_and_seed(recipes):
    c = Compiler(SEED, "x86_64-linux")
    g = c.compile(recipes.resolve("gcc-toolchain"))
    assert g.root_drv.builder == "builtin:write-files"
    assert len(g.sources) == 1
    (path, (name, _)), = g.sources.items()
    assert name == "gcc-toolchain-4.9.3-files" and g.root_drv.input_srcs == (path,)
    s = c.compile(BOOTSTRAP).root_drv
    assert s.builder == "builtin:union" and s.args == (str(SEED),) and s.input_srcs == (str(SEED),)


def test_system_changes_paths(recipes):
    hwloc = recipes.resolve("hwloc")
    a = Compiler(SEED, "x86_64-linux").compile(hwloc).root_drv.output
    b = Compiler(SEED, "aarch64-linux").compile(hwloc).root_drv.output
    assert a != b


def test_version_bump_propagates(tmp_path):
    corpus = tmp_path / "fx"
    shutil.copytree(RECIPES.parent, corpus)
    doc = corpus / "recipes" / "hwloc.json"
    doc.write_text(doc.read_text().replace('"1.10.1"', '"1.10.2"'))
    c = Compiler(SEED, "x86_64-linux")
    before = {p.full_name.replace("hwloc-1.10.1", "hwloc"): c.compile(p).root_drv.output
              for p in load_recipes([RECIPES])}
    after = {p.full_name.replace("hwloc-1.10.2", "hwloc"): c.compile(p).root_drv.output
             for p in load_recipes([corpus / "recipes"])}
    changed = {k.rsplit("-", 1)[0] for k in before if before[k] != after[k]}
    expected = oracles.reverse_closure(oracles.recipe_edges([RECIPES]), {"hwloc"})
    assert changed == expected
    assert {"hwloc", "openmpi", "starpu", "chameleon"} <= changed
    assert "gfortran" not in changed


def test_graph_bytes_roundtrip(all_recipes):
    graph = Compiler(SEED, "x86_64-linux").compile(all_recipes.resolve("chameleon-simgrid"))
    graph.merge(Compiler(SEED, "x86_64-linux").compile(all_recipes.resolve("gcc-toolchain")))
    graph.root = Compiler(SEED, "x86_64-linux").compile(all_recipes.resolve("chameleon-simgrid")).root
    data = graph.to_bytes()
    back = DerivationGraph.from_bytes(data, ROOT)
    assert back.root == graph.root
    assert back.derivations == graph.derivations
    assert back.sources == graph.sources
    with pytest.raises(DerivationError):
        DerivationGraph.from_bytes(data + b"x", ROOT)
    with pytest.raises(DerivationError):
        DerivationGraph.from_bytes(data[:-3], ROOT)


def test_graph_rejects_tampered_source(recipes):
    graph = Compiler(SEED, "x86_64-linux").compile(recipes.resolve("gcc-toolchain"))
    path, (name, data) = next(iter(graph.sources.items()))
    bad = DerivationGraph(graph.root, dict(graph.derivations), {path: (name, data + b"!")})
    with pytest.raises(DerivationError):
        DerivationGraph.from_bytes(bad.to_bytes(), ROOT)


def test_compile_is_memoized(recipes):
    c = Compiler(SEED, "x86_64-linux")
    p = recipes.resolve("openmpi")
    assert c.compile(p) is c.compile(p)
