"""Package values, recipe loading and DAG operations.

A recipe directory holds JSON documents of the form ``{"packages": [...]}``.
Loading resolves inheritance and input references into immutable
:class:`Package` values whose ``inputs`` hold other packages, so a package
value carries its whole dependency DAG.
"""

from __future__ import annotations

import dataclasses
import difflib
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from . import base32
from .errors import RecipeError, ResolutionError

BUILD_SYSTEMS = ("generic", "trivial", "union")
# internal only: the pinned bootstrap seed; recipes cannot use it
SEED_BUILD_SYSTEM = "seed"

_VAR_RE = re.compile(r"[A-Z_][A-Z0-9_]*\Z")
_RECIPE_KEYS = {"name", "version", "source", "build-system", "inputs", "arguments", "search-paths",
                "inherit", "synopsis", "description", "home-page", "license"}
_ARGUMENT_KEYS = {"commands", "configure-flags", "files"}


@dataclass(frozen=True)
class Origin:
    method: str
    uri: str
    sha256: str

    def __post_init__(self):
        if self.method != "file-fetch":
            raise RecipeError(f"unsupported origin method {self.method!r}")
        if not base32.is_valid(self.sha256, 32):
            raise RecipeError(f"origin sha256 must be 52 base32 characters, got {self.sha256!r}")


@dataclass(frozen=True)
class SearchPathSpec:
    variable: str
    subdirectory: str
    separator: str = ":"

    def __post_init__(self):
        if not _VAR_RE.match(self.variable):
            raise RecipeError(f"invalid search-path variable {self.variable!r}")
        if os.path.isabs(self.subdirectory) or ".." in self.subdirectory.split("/"):
            raise RecipeError(f"search-path subdirectory must be relative: {self.subdirectory!r}")


@dataclass(frozen=True)
class PackageRef:
    name: str
    version: str | None = None

    @classmethod
    def parse(cls, text: str) -> "PackageRef":
        name, sep, version = text.partition("@")
        if not name or (sep and not version):
            raise ResolutionError(f"invalid package specification {text!r}")
        return cls(name, version or None)

    def __str__(self) -> str:
        return f"{self.name}@{self.version}" if self.version else self.name


@dataclass(frozen=True, eq=True)
class Package:
    name: str
    version: str
    source: Origin | None = None
    build_system: str = "generic"
    inputs: tuple = ()
    commands: tuple | None = None
    configure_flags: tuple = ()
    files: tuple = ()
    search_paths: tuple = ()
    synopsis: str = ""
    description: str = ""
    home_page: str = ""
    license: str = ""
    inherit_from: PackageRef | None = None
    _hash: int = field(default=0, init=False, repr=False, compare=False)

    def __post_init__(self):
        labels = [label for label, _ in self.inputs]
        if len(labels) != len(set(labels)):
            raise RecipeError(f"{self.full_name}: duplicate input labels {labels}")

    @property
    def full_name(self) -> str:
        return f"{self.name}-{self.version}" if self.version else self.name

    def __hash__(self):
        if not self._hash:
            object.__setattr__(self, "_hash", hash(tuple(
                getattr(self, f.name) for f in dataclasses.fields(self) if f.compare)))
        return self._hash

    def __repr__(self):
        return f"<Package {self.full_name}>"

    def input(self, label: str) -> "Package":
        for lab, pkg in self.inputs:
            if lab == label:
                return pkg
        raise KeyError(label)


VARIANT_FIELDS = frozenset(f.name for f in dataclasses.fields(Package) if f.init)


# -- versions ---------------------------------------------------------------

def version_key(version: str):
    """Components compare numerically when both are digits, bytewise otherwise."""
    return [_VersionPart(p) for p in version.split(".")]


class _VersionPart:
    __slots__ = ("text",)

    def __init__(self, text):
        self.text = text

    def _cmp(self, other):
        a, b = self.text, other.text
        if a.isdigit() and b.isdigit():
            a, b = int(a), int(b)
        else:
            a, b = a.encode(), b.encode()
        return (a > b) - (a < b)

    def __lt__(self, other):
        return self._cmp(other) < 0

    def __eq__(self, other):
        return self._cmp(other) == 0


# -- variants and DAG queries -----------------------------------------------

@dataclass(frozen=True)
class AppendInputs:
    """Input override that keeps the base inputs and adds entries around them."""
    prepend: tuple = ()
    append: tuple = ()


def make_variant(base: Package, overrides: dict | None = None, **kw) -> Package:
    overrides = {**(overrides or {}), **kw}
    unknown = set(overrides) - VARIANT_FIELDS
    if unknown:
        raise RecipeError(f"unknown package field(s): {', '.join(sorted(unknown))}")
    inputs = overrides.get("inputs")
    if isinstance(inputs, AppendInputs):
        overrides["inputs"] = tuple(inputs.prepend) + base.inputs + tuple(inputs.append)
    elif inputs is not None:
        overrides["inputs"] = tuple(inputs)
    return dataclasses.replace(base, **overrides)


def transitive_inputs(pkg: Package) -> list[tuple[str, str]]:
    """Direct and indirect inputs as ``(label, full name)``, DFS preorder, first occurrence wins."""
    out = []
    seen: set[Package] = set()

    def visit(p):
        for label, dep in p.inputs:
            if dep in seen:
                continue
            seen.add(dep)
            out.append((label, dep.full_name))
            visit(dep)

    visit(pkg)
    return out


def iter_dag(pkg: Package) -> Iterator[Package]:
    """Every package value in the DAG (including ``pkg``), dependencies first."""
    seen = set()
    order = []

    def visit(p):
        if id(p) in seen:
            return
        seen.add(id(p))
        for _, dep in p.inputs:
            visit(dep)
        order.append(p)

    visit(pkg)
    return iter(order)


def rewrite_inputs(root: Package, label: str, replacement: Package) -> tuple[Package, int]:
    """Point every input edge named ``label``, at any depth, at ``replacement``.

    Untouched subgraphs are returned as the very same objects. The second
    element of the result counts rewritten edges.
    """
    memo: dict[int, Package] = {}
    count = 0

    def go(p: Package) -> Package:
        nonlocal count
        if id(p) in memo:
            return memo[id(p)]
        new_inputs = []
        changed = False
        for lab, dep in p.inputs:
            if lab == label:
                new = replacement
                count += 1
            else:
                new = go(dep)
            changed = changed or new is not dep
            new_inputs.append((lab, new))
        result = dataclasses.replace(p, inputs=tuple(new_inputs)) if changed else p
        memo[id(p)] = result
        return result

    return go(root), count


# -- recipe documents -------------------------------------------------------

@dataclass
class _Raw:
    doc: dict
    file: str
    index: int
    dir_rank: int

    @property
    def where(self) -> str:
        return f"{self.file}: package #{self.index}"


class RecipeSet:
    """Immutable, resolved set of packages keyed by (name, version)."""

    def __init__(self, packages: dict[tuple[str, str], Package] | None = None):
        self._packages = dict(packages or {})

    def __len__(self):
        return len(self._packages)

    def __iter__(self):
        for key in sorted(self._packages, key=lambda k: (k[0], version_key(k[1]))):
            yield self._packages[key]

    def __contains__(self, ref):
        try:
            self.resolve(ref)
        except ResolutionError:
            return False
        return True

    def names(self) -> list[str]:
        return sorted({n for n, _ in self._packages})

    def resolve(self, ref: PackageRef | str) -> Package:
        if isinstance(ref, str):
            ref = PackageRef.parse(ref)
        if ref.version is not None:
            pkg = self._packages.get((ref.name, ref.version))
            if pkg is None:
                raise self._missing(ref)
            return pkg
        candidates = [v for (n, v) in self._packages if n == ref.name]
        if not candidates:
            raise self._missing(ref)
        best = max(candidates, key=version_key)
        return self._packages[(ref.name, best)]

    def _missing(self, ref: PackageRef) -> ResolutionError:
        close = difflib.get_close_matches(ref.name, self.names(), n=3, cutoff=0.6)
        versions = sorted(v for (n, v) in self._packages if n == ref.name)
        msg = f"unknown package {ref}"
        if versions:
            msg += f" (available versions: {', '.join(versions)})"
        elif close:
            msg += f"; did you mean {' or '.join(close)}?"
        return ResolutionError(msg, close)


def package_path_from_env(value: str | None) -> list[str]:
    return [d for d in (value or "").split(":") if d]


def load_recipes(search_dirs: Iterable[str | os.PathLike]) -> RecipeSet:
    """Load every ``*.json`` recipe document; later directories shadow earlier ones."""
    raws: list[_Raw] = []
    for rank, d in enumerate(search_dirs):
        d = Path(d)
        if not d.is_dir():
            raise RecipeError(f"recipe directory {d} does not exist")
        for f in sorted(d.glob("*.json")):
            raws.extend(_parse_file(f, rank))
    return _Resolver(raws).run()


def _parse_file(path: Path, rank: int) -> list[_Raw]:
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise RecipeError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("packages"), list):
        raise RecipeError(f"{path}:1: top-level object must have a 'packages' list")
    out = []
    for i, entry in enumerate(doc["packages"]):
        raw = _Raw(entry, str(path), i, rank)
        if not isinstance(entry, dict):
            raise RecipeError(f"{raw.where}: expected an object")
        unknown = set(entry) - _RECIPE_KEYS
        if unknown:
            raise RecipeError(f"{raw.where}: unknown keys {sorted(unknown)}")
        if "inherit" not in entry and ("name" not in entry or "version" not in entry):
            raise RecipeError(f"{raw.where}: 'name' and 'version' are required without 'inherit'")
        out.append(raw)
    return out


def _ref(obj, where) -> PackageRef:
    if not isinstance(obj, dict) or "name" not in obj or set(obj) - {"name", "version"}:
        raise RecipeError(f"{where}: package reference must be {{\"name\": ..., \"version\"?: ...}}")
    return PackageRef(obj["name"], obj.get("version"))


class _Resolver:
    def __init__(self, raws: list[_Raw]):
        self.raws = raws
        self.flat: dict[int, dict] = {}
        self.flattening: list[int] = []
        self.packages: dict[tuple[str, str], Package] = {}
        self.building: list[tuple[str, str]] = []

    def run(self) -> RecipeSet:
        for i in range(len(self.raws)):
            self._flatten(i)
        # later directories shadow earlier ones; within a directory a duplicate is an error
        self.by_key: dict[tuple[str, str], int] = {}
        for i, raw in enumerate(self.raws):
            key = (self.flat[i]["name"], self.flat[i]["version"])
            prev = self.by_key.get(key)
            if prev is not None and self.raws[prev].dir_rank == raw.dir_rank:
                raise RecipeError(f"{raw.where}: {key[0]}-{key[1]} already defined at {self.raws[prev].where}")
            self.by_key[key] = i
        for key in self.by_key:
            self._build(key)
        return RecipeSet(self.packages)

    def _lookup_raw(self, ref: PackageRef, exclude: int) -> int:
        candidates = []
        for j in range(len(self.raws)):
            if j == exclude:
                continue
            name = self._effective(j, "name")
            if name != ref.name:
                continue
            version = self._effective(j, "version")
            if ref.version is None or version == ref.version:
                candidates.append((self.raws[j].dir_rank, version_key(version), j))
        if not candidates:
            raise ResolutionError(f"{self.raws[exclude].where}: cannot inherit from unknown package {ref}")
        best_version = max(c[1] for c in candidates)
        return max(c for c in candidates if c[1] == best_version)[2]

    def _effective(self, i: int, key: str):
        doc = self.raws[i].doc
        if key in doc:
            return doc[key]
        return self._flatten(i)[key]

    def _flatten(self, i: int) -> dict:
        if i in self.flat:
            return self.flat[i]
        if i in self.flattening:
            cycle = self.flattening[self.flattening.index(i):] + [i]
            names = " -> ".join(self.raws[j].where for j in cycle)
            raise RecipeError(f"inheritance cycle: {names}")
        self.flattening.append(i)
        try:
            raw = self.raws[i]
            doc = dict(raw.doc)
            if "inherit" in doc:
                ref = _ref(doc["inherit"], raw.where)
                pflat = self._flatten(self._lookup_raw(ref, i))
                merged = dict(pflat)
                merged["_dir"] = os.path.dirname(raw.file) if "source" in doc else pflat["_dir"]
                inputs = doc.get("inputs")
                if isinstance(inputs, dict):
                    doc["inputs"] = (inputs.get("prepend", []) + pflat.get("inputs", [])
                                     + inputs.get("append", []))
                merged.update(doc)
                merged["inherit"] = doc["inherit"]
                doc = merged
            else:
                doc["_dir"] = os.path.dirname(raw.file)
                if isinstance(doc.get("inputs"), dict):
                    raise RecipeError(f"{raw.where}: prepend/append inputs need 'inherit'")
            self.flat[i] = doc
            return doc
        finally:
            self.flattening.pop()

    def _build(self, key: tuple[str, str]) -> Package:
        if key in self.packages:
            return self.packages[key]
        if key in self.building:
            cycle = self.building[self.building.index(key):] + [key]
            raise RecipeError("dependency cycle: " + " -> ".join(f"{n}-{v}" for n, v in cycle))
        self.building.append(key)
        try:
            i = self.by_key[key]
            raw, doc = self.raws[i], self.flat[i]
            inputs = []
            for entry in doc.get("inputs", []):
                if not (isinstance(entry, list) and len(entry) == 2 and isinstance(entry[0], str)):
                    raise RecipeError(f"{raw.where}: inputs must be [label, {{name, version?}}] pairs")
                ref = _ref(entry[1], raw.where)
                dep_key = self._resolve_key(ref, raw)
                inputs.append((entry[0], self._build(dep_key)))
            pkg = _package_from_doc(doc, tuple(inputs), raw)
            self.packages[key] = pkg
            return pkg
        finally:
            self.building.pop()

    def _resolve_key(self, ref: PackageRef, raw: _Raw) -> tuple[str, str]:
        versions = [v for (n, v) in self.by_key if n == ref.name]
        if ref.version is not None:
            if ref.version not in versions:
                raise ResolutionError(f"{raw.where}: input {ref} not found")
            return (ref.name, ref.version)
        if not versions:
            names = sorted({n for n, _ in self.by_key})
            close = difflib.get_close_matches(ref.name, names, n=3, cutoff=0.6)
            raise ResolutionError(f"{raw.where}: input {ref} not found", close)
        return (ref.name, max(versions, key=version_key))


def _package_from_doc(doc: dict, inputs: tuple, raw: _Raw) -> Package:
    where = raw.where
    build_system = doc.get("build-system", "generic")
    if build_system not in BUILD_SYSTEMS:
        raise RecipeError(f"{where}: unknown build system {build_system!r}")
    source = None
    if doc.get("source") is not None:
        src = doc["source"]
        if not isinstance(src, dict) or set(src) != {"method", "uri", "sha256"}:
            raise RecipeError(f"{where}: source needs exactly method, uri and sha256")
        source = Origin(src["method"], _absolute_uri(src["uri"], doc["_dir"]), src["sha256"])
    args = doc.get("arguments", {}) or {}
    if set(args) - _ARGUMENT_KEYS:
        raise RecipeError(f"{where}: unknown arguments {sorted(set(args) - _ARGUMENT_KEYS)}")
    commands = args.get("commands")
    if commands is not None:
        if not all(isinstance(c, list) and c and all(isinstance(a, str) for a in c) for c in commands):
            raise RecipeError(f"{where}: commands must be a list of non-empty argv lists")
        commands = tuple(tuple(c) for c in commands)
    files = []
    for f in args.get("files", []):
        if not isinstance(f, dict) or "path" not in f or "content" not in f:
            raise RecipeError(f"{where}: files entries need path and content")
        files.append((f["path"], f.get("mode", "0644"), f["content"]))
    search_paths = tuple(
        SearchPathSpec(s["variable"], s["subdirectory"], s.get("separator", ":"))
        for s in doc.get("search-paths", []))
    inherit = _ref(doc["inherit"], where) if "inherit" in doc else None
    return Package(
        name=doc["name"], version=doc["version"], source=source, build_system=build_system,
        inputs=inputs, commands=commands, configure_flags=tuple(args.get("configure-flags", ())),
        files=tuple(files), search_paths=search_paths,
        synopsis=doc.get("synopsis", ""), description=doc.get("description", ""),
        home_page=doc.get("home-page", ""), license=doc.get("license", ""), inherit_from=inherit)


def _absolute_uri(uri: str, base_dir: str) -> str:
    if uri.startswith("file://"):
        return uri
    if "://" in uri:
        raise RecipeError(f"only file:// sources are supported, got {uri!r}")
    return "file://" + os.path.abspath(os.path.join(base_dir, uri))


def read_manifest(path: str | os.PathLike) -> list[PackageRef]:
    """A manifest document: ``{"packages": ["name", "name@version", ...]}``."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise RecipeError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("packages"), list):
        raise RecipeError(f"{path}: manifest must be an object with a 'packages' list")
    return [PackageRef.parse(p) for p in doc["packages"]]
