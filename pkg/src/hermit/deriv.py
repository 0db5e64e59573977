"""Lowering packages to derivations, and derivation hashing.

Canonical text of a derivation (the hash payload)::

    Drv(name=…;system=…;builder=…;args=[…];env=[k=v,…];inputDrvs=[digest:path,…];inputSrcs=[…];fixed=algo:digest|-)

Every value is percent-encoded for ``% ; , = [ ] ( )`` and bytes below 0x20.
"""

from __future__ import annotations

import hashlib
import json
import platform
import re
import shlex
from dataclasses import dataclass, field
from functools import cached_property

from . import archive
from .errors import ArchiveError, DerivationError
from .model import SEED_BUILD_SYSTEM, Package, SearchPathSpec
from .store import StorePath, compute_store_digest, parse_store_path, source_digest

BUILDERS = ("builtin:fetch", "builtin:write-files", "builtin:union", "builtin:exec")
FLAG_SEPARATOR = "\x1f"
DEFAULT_COMMANDS = (("sh", "build.sh"),)

_HEX_RE = re.compile(r"[0-9a-f]{64}\Z")
_ESCAPE = frozenset(b"%;,=[]()") | frozenset(range(0x20))


def default_system() -> str:
    return f"{platform.machine()}-{platform.system().lower()}"


def escape(value: str) -> str:
    out = []
    for byte in value.encode("utf-8"):
        out.append(f"%{byte:02X}" if byte in _ESCAPE else chr(byte))
    # non-ASCII bytes were appended as latin-1 code points; re-encode them
    return "".join(out).encode("latin-1").decode("utf-8")


def unescape(value: str) -> str:
    raw = value.encode("utf-8")
    out = bytearray()
    i = 0
    while i < len(raw):
        if raw[i] == 0x25:
            out.append(int(raw[i + 1:i + 3], 16))
            i += 3
        else:
            out.append(raw[i])
            i += 1
    return out.decode("utf-8")


@dataclass(frozen=True)
class Derivation:
    name: str
    system: str
    builder: str
    args: tuple = ()
    env: tuple = ()
    input_drvs: tuple = ()
    input_srcs: tuple = ()
    fixed: tuple | None = None
    output: StorePath | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.builder not in BUILDERS:
            raise DerivationError(f"unknown builder {self.builder!r}")
        if (self.fixed is not None) != (self.builder == "builtin:fetch"):
            raise DerivationError("a fixed output is required for, and only for, builtin:fetch")
        keys = [k for k, _ in self.env]
        if keys != sorted(set(keys), key=str.encode):
            raise DerivationError("env keys must be unique and sorted")
        # "[]" would read back as an empty list, so empty list items cannot round-trip
        if "" in self.args or "" in self.input_srcs:
            raise DerivationError("args and inputSrcs may not contain empty strings")
        # ":" is not escaped, so the part before it must be colon-free
        if any(not _HEX_RE.match(d) for d, _ in self.input_drvs):
            raise DerivationError("input derivation digests must be SHA-256 hex")
        if self.fixed is not None and self.fixed[0] != "sha256":
            raise DerivationError(f"unsupported fixed-output hash {self.fixed[0]!r}")
        object.__setattr__(self, "input_drvs", tuple(sorted(self.input_drvs)))
        object.__setattr__(self, "input_srcs", tuple(sorted(self.input_srcs, key=str.encode)))

    @cached_property
    def text(self) -> bytes:
        return serialize(self)

    @cached_property
    def digest(self) -> str:
        """Identity used by dependents; fixed outputs hash only their declared content."""
        if self.fixed is not None:
            algo, digest = self.fixed
            return hashlib.sha256(f"fixed:out:{algo}:{digest}:{self.name}".encode()).hexdigest()
        return hashlib.sha256(self.text).hexdigest()

    @property
    def env_dict(self) -> dict:
        return dict(self.env)


def serialize(drv: Derivation) -> bytes:
    def lst(items):
        return "[" + ",".join(items) + "]"

    fixed = "-" if drv.fixed is None else f"{escape(drv.fixed[0])}:{escape(drv.fixed[1])}"
    text = (
        f"Drv(name={escape(drv.name)};system={escape(drv.system)};builder={escape(drv.builder)};"
        f"args={lst(escape(a) for a in drv.args)};"
        f"env={lst(f'{escape(k)}={escape(v)}' for k, v in drv.env)};"
        f"inputDrvs={lst(f'{escape(d)}:{escape(p)}' for d, p in drv.input_drvs)};"
        f"inputSrcs={lst(escape(s) for s in drv.input_srcs)};"
        f"fixed={fixed})"
    )
    return text.encode("utf-8")


_DRV_RE = re.compile(
    r"Drv\(name=([^;]*);system=([^;]*);builder=([^;]*);args=\[([^\]]*)\];env=\[([^\]]*)\];"
    r"inputDrvs=\[([^\]]*)\];inputSrcs=\[([^\]]*)\];fixed=([^;()]*)\)\Z")


def parse(text: bytes | str) -> Derivation:
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    m = _DRV_RE.match(text)
    if not m:
        raise DerivationError("malformed derivation text")
    name, system, builder, args, env, inputs, srcs, fixed = m.groups()

    def items(s):
        return [] if s == "" else s.split(",")

    def pair(item, sep):
        k, _, v = item.partition(sep)
        return unescape(k), unescape(v)

    return Derivation(
        name=unescape(name), system=unescape(system), builder=unescape(builder),
        args=tuple(unescape(a) for a in items(args)),
        env=tuple(pair(e, "=") for e in items(env)),
        input_drvs=tuple(pair(d, ":") for d in items(inputs)),
        input_srcs=tuple(unescape(s) for s in items(srcs)),
        fixed=None if fixed == "-" else pair(fixed, ":"),
    )


def output_path(drv: Derivation, root: str) -> StorePath:
    if drv.fixed is not None:
        algo, digest = drv.fixed
        payload = f"fixed:out:{algo}:{digest}:{drv.name}"
    else:
        payload = f"output:out:{hashlib.sha256(serialize(drv)).hexdigest()}:{drv.name}"
    return StorePath(root, compute_store_digest(payload.encode()), drv.name)


def with_output(drv: Derivation, root: str) -> Derivation:
    object.__setattr__(drv, "output", output_path(drv, root))
    return drv


@dataclass
class DerivationGraph:
    """A root derivation plus everything it depends on.

    ``sources`` maps rendered store paths that must exist before building to
    ``(name, archive bytes)``; they are added by content.
    """
    root: str
    derivations: dict = field(default_factory=dict)
    sources: dict = field(default_factory=dict)
    packages: dict = field(default_factory=dict)

    @property
    def root_drv(self) -> Derivation:
        return self.derivations[self.root]

    def topological(self) -> list[Derivation]:
        order, seen = [], set()

        def visit(d):
            if d in seen:
                return
            seen.add(d)
            for dep, _ in sorted(self.derivations[d].input_drvs):
                if dep not in self.derivations:
                    raise DerivationError(f"graph is missing input derivation {dep}")
                visit(dep)
            order.append(self.derivations[d])

        for d in sorted(self.derivations):
            visit(d)
        return order

    def merge(self, other: "DerivationGraph") -> None:
        self.derivations.update(other.derivations)
        self.sources.update(other.sources)
        self.packages.update(other.packages)

    def to_bytes(self) -> bytes:
        """Wire form: root digest, derivation texts, then pending sources."""
        out = [_str(self.root.encode()), _u64(len(self.derivations))]
        out.extend(_str(self.derivations[k].text) for k in sorted(self.derivations))
        out.append(_u64(len(self.sources)))
        for path in sorted(self.sources):
            name, data = self.sources[path]
            out.extend((_str(path.encode()), _str(name.encode()), _str(data)))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes, root: str) -> "DerivationGraph":
        cur = archive._Cursor(bytes(data))
        try:
            graph = cls(cur.take(cur.u64()).decode())
            for _ in range(cur.u64()):
                drv = with_output(parse(cur.take(cur.u64())), root)
                graph.derivations[drv.digest] = drv
            for _ in range(cur.u64()):
                path = cur.take(cur.u64()).decode()
                name = cur.take(cur.u64()).decode()
                blob = cur.take(cur.u64())
                graph.sources[path] = (name, blob)
        except (ArchiveError, UnicodeDecodeError) as exc:
            raise DerivationError(f"malformed derivation graph: {exc}") from None
        if cur.pos != len(data):
            raise DerivationError("trailing bytes after derivation graph")
        if graph.root not in graph.derivations:
            raise DerivationError("graph root is not among its derivations")
        for drv in graph.derivations.values():
            for dep, path in drv.input_drvs:
                if dep not in graph.derivations or str(graph.derivations[dep].output) != path:
                    raise DerivationError(f"{drv.name}: input {dep} missing or inconsistent")
        for path, (name, blob) in graph.sources.items():
            expected = StorePath(root, source_digest(archive.content_digest(blob), name), name)
            if str(expected) != path:
                raise DerivationError(f"source {path} does not match its content")
        return graph


def _u64(n: int) -> bytes:
    return n.to_bytes(8, "little")


def _str(b: bytes) -> bytes:
    return _u64(len(b)) + b


# -- compilation -------------------------------------------------------------

BOOTSTRAP = Package(
    name="bootstrap", version="0", build_system=SEED_BUILD_SYSTEM,
    search_paths=(SearchPathSpec("PATH", "bin"),),
    synopsis="Pinned host tools that seed every generic build",
)


def env_label(label: str) -> str:
    return "input_" + re.sub(r"[^A-Za-z0-9_]", "_", label)


def implicit_inputs(pkg: Package) -> tuple:
    if pkg.build_system == "generic":
        return (("bootstrap", BOOTSTRAP),)
    return ()


def all_inputs(pkg: Package) -> tuple:
    return implicit_inputs(pkg) + tuple(pkg.inputs)


def manifest_json(entries) -> str:
    """Profile manifest stored in union outputs: package identities, paths and search paths."""
    doc = {"version": 1, "packages": [
        {"name": p.name, "version": p.version, "path": path,
         "search-paths": [{"variable": s.variable, "subdirectory": s.subdirectory,
                           "separator": s.separator} for s in p.search_paths]}
        for p, path in entries]}
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


class Compiler:
    """Compiles package values to derivations; memoized per package value."""

    def __init__(self, seed: StorePath, system: str | None = None):
        self.seed = seed
        self.root = seed.root
        self.system = system or default_system()
        self._memo: dict[Package, DerivationGraph] = {}

    def compile(self, pkg: Package) -> DerivationGraph:
        cached = self._memo.get(pkg)
        if cached is not None:
            return cached
        graph = DerivationGraph("")
        inputs = []
        for label, dep in all_inputs(pkg):
            sub = self.compile(dep)
            graph.merge(sub)
            inputs.append((label, dep, sub.root_drv))
        if pkg.build_system == "generic":
            drv = self._generic(pkg, inputs, graph)
        elif pkg.build_system == "trivial":
            drv = self._trivial(pkg, inputs, graph)
        elif pkg.build_system == "union":
            drv = self._union(pkg, inputs)
        elif pkg.build_system == SEED_BUILD_SYSTEM:
            drv = self._seed(pkg, graph)
        else:
            raise DerivationError(f"{pkg.full_name}: unknown build system {pkg.build_system!r}")
        drv = with_output(drv, self.root)
        graph.derivations[drv.digest] = drv
        graph.packages[drv.digest] = pkg
        graph.root = drv.digest
        self._memo[pkg] = graph
        return graph

    def _input_fields(self, inputs):
        input_drvs = tuple((d.digest, str(d.output)) for _, _, d in inputs)
        env = {env_label(label): str(d.output) for label, _, d in inputs}
        if len(env) != len(inputs):
            raise DerivationError("input labels collide after normalization")
        return input_drvs, env

    def _fetch(self, pkg: Package) -> Derivation:
        src = pkg.source
        return with_output(Derivation(
            name=f"{pkg.full_name}-source", system=self.system, builder="builtin:fetch",
            args=(src.uri,), fixed=("sha256", src.sha256)), self.root)

    def _generic(self, pkg, inputs, graph) -> Derivation:
        if pkg.source is None:
            raise DerivationError(f"{pkg.full_name}: the generic build system needs a source")
        fetch = self._fetch(pkg)
        graph.derivations[fetch.digest] = fetch
        input_drvs, env = self._input_fields(inputs)
        env["src"] = str(fetch.output)
        env["out"] = ""
        env["PATH"] = ":".join(f"{d.output}/bin" for _, _, d in inputs)
        if pkg.configure_flags:
            env["configureFlags"] = FLAG_SEPARATOR.join(pkg.configure_flags)
        bootstrap = next(d for label, _, d in inputs if label == "bootstrap")
        commands = pkg.commands if pkg.commands is not None else DEFAULT_COMMANDS
        script = "\n".join([
            "set -e",
            'if [ -d "$src" ]; then cp -R "$src"/. .; else cp "$src" .; fi',
            "chmod -R u+w .",
            *(" ".join(shlex.quote(a) for a in argv) for argv in commands),
        ]) + "\n"
        return Derivation(
            name=pkg.full_name, system=self.system, builder="builtin:exec",
            args=(f"{bootstrap.output}/bin/sh", "-c", script),
            env=tuple(sorted(env.items(), key=lambda kv: kv[0].encode())),
            input_drvs=input_drvs + ((fetch.digest, str(fetch.output)),))

    def _trivial(self, pkg, inputs, graph) -> Derivation:
        manifest = json.dumps([list(f) for f in pkg.files], separators=(",", ":")).encode()
        data = archive.dump_file_bytes(manifest)
        name = f"{pkg.full_name}-files"
        src = StorePath(self.root, source_digest(archive.content_digest(data), name), name)
        graph.sources[str(src)] = (name, data)
        input_drvs, env = self._input_fields(inputs)
        return Derivation(
            name=pkg.full_name, system=self.system, builder="builtin:write-files",
            args=(str(src),), env=tuple(sorted(env.items(), key=lambda kv: kv[0].encode())),
            input_drvs=input_drvs, input_srcs=(str(src),))

    def _union(self, pkg, inputs) -> Derivation:
        input_drvs, _ = self._input_fields(inputs)
        entries = [(dep, str(d.output)) for _, dep, d in inputs]
        return Derivation(
            name=pkg.full_name, system=self.system, builder="builtin:union",
            args=tuple(path for _, path in entries),
            env=(("manifest", manifest_json(entries)),),
            input_drvs=input_drvs)

    def _seed(self, pkg, graph) -> Derivation:
        return Derivation(
            name=pkg.full_name, system=self.system, builder="builtin:union",
            args=(str(self.seed),), input_srcs=(str(self.seed),))


def compile_package(pkg: Package, seed: StorePath, system: str | None = None) -> DerivationGraph:
    return Compiler(seed, system).compile(pkg)


def input_paths(drv: Derivation, root: str) -> list[StorePath]:
    return [parse_store_path(p, root) for _, p in drv.input_drvs] + \
           [parse_store_path(s, root) for s in drv.input_srcs]
