"""Generational profiles.

A profile ``<dir>/<name>`` is a symlink to ``<name>-<N>-link``, which in turn
points at a store item built by a union derivation. Changing the profile
means building a new union, adding a new generation link and flipping the
current pointer with one rename; older generations stay until deleted.
"""

from __future__ import annotations

import json
import os
import re
import shutil
import subprocess
from dataclasses import dataclass, field
from datetime import datetime, timezone

from .build import MANIFEST_FILE
from .deriv import BOOTSTRAP, all_inputs
from .errors import HermitError, ProfileError
from .fsutil import atomic_symlink, file_lock
from .model import Package, PackageRef, RecipeSet
from .store import StorePath, parse_store_path

PROFILE_NAME = "profile"


def default_profile_path() -> str:
    return os.path.join(os.path.expanduser("~"), ".hermit-profile")


@dataclass
class Manifest:
    entries: list = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for ref in self.entries:
            key = (ref.name, ref.version)
            if key in seen:
                raise ProfileError(f"manifest lists {ref} twice")
            seen.add(key)


@dataclass
class Generation:
    number: int
    item: StorePath
    manifest: Manifest
    created_at: datetime = field(compare=False)
    current: bool = field(default=False, compare=False)


class Profile:
    def __init__(self, path: str, root: str):
        self.path = os.path.abspath(path)
        self.dir, self.name = os.path.split(self.path)
        self.root = root
        self._link_re = re.compile(re.escape(self.name) + r"-(\d+)-link\Z")

    def link_path(self, n: int) -> str:
        return os.path.join(self.dir, f"{self.name}-{n}-link")

    def numbers(self) -> list[int]:
        if not os.path.isdir(self.dir):
            return []
        found = []
        for entry in os.listdir(self.dir):
            m = self._link_re.match(entry)
            if m and os.path.islink(os.path.join(self.dir, entry)):
                found.append(int(m.group(1)))
        return sorted(found)

    def current_number(self) -> int | None:
        if not os.path.islink(self.path):
            return None
        m = self._link_re.match(os.readlink(self.path))
        return int(m.group(1)) if m else None

    def generation(self, n: int) -> Generation:
        link = self.link_path(n)
        if not os.path.islink(link):
            raise ProfileError(f"generation {n} does not exist")
        item = parse_store_path(os.readlink(link), self.root)
        created = datetime.fromtimestamp(os.lstat(link).st_mtime, timezone.utc)
        return Generation(n, item, Manifest(_manifest_refs(str(item))), created, n == self.current_number())

    def generations(self) -> list[Generation]:
        return [self.generation(n) for n in self.numbers()]

    def current(self) -> Generation | None:
        n = self.current_number()
        return None if n is None else self.generation(n)

    def lock(self):
        os.makedirs(self.dir, exist_ok=True)
        return file_lock(self.path + ".lock")


def _read_union_manifest(item: str) -> dict:
    try:
        with open(os.path.join(item, MANIFEST_FILE)) as f:
            return json.load(f)
    except FileNotFoundError:
        return {"packages": []}


def _manifest_refs(item: str) -> list[PackageRef]:
    return [PackageRef(p["name"], p["version"]) for p in _read_union_manifest(item)["packages"]]


def union_package(name: str, packages: list[Package]) -> Package:
    labels = [p.full_name for p in packages]
    if len(set(labels)) != len(labels):
        raise ProfileError("the same package appears twice")
    return Package(name=name, version="", build_system="union",
                   inputs=tuple(zip(labels, packages)))


def _resolve_all(recipes: RecipeSet, refs) -> list[Package]:
    return [recipes.resolve(r) for r in refs]


def _commit(profile: Profile, backend, packages: list[Package]) -> Generation:
    """Build the union for ``packages`` and make it current (caller holds the lock)."""
    graph = backend.compile(union_package(PROFILE_NAME, packages))
    item = backend.build(graph)
    current = profile.current()
    if current is not None and current.item == item:
        return current
    numbers = profile.numbers()
    n = (numbers[-1] if numbers else 0) + 1
    link = profile.link_path(n)
    atomic_symlink(str(item), link)
    backend.add_root(link, indirect=True)
    atomic_symlink(os.path.basename(link), profile.path)
    return profile.generation(n)


def apply_transaction(profile: Profile, installs, removals, *, recipes: RecipeSet, backend) -> Generation:
    """Install and remove packages in one step; the old generation stays current on failure."""
    with profile.lock():
        current = profile.current()
        entries = list(current.manifest.entries) if current else []
        for ref in removals:
            ref = PackageRef.parse(ref) if isinstance(ref, str) else ref
            matches = [e for e in entries if e.name == ref.name and (not ref.version or e.version == ref.version)]
            if not matches:
                raise ProfileError(f"cannot remove {ref}: not installed")
            entries = [e for e in entries if e not in matches]
        new = []
        for ref in installs:
            pkg = recipes.resolve(ref)
            new.append(PackageRef(pkg.name, pkg.version))
        # installing a name that is already present replaces it
        names = {r.name for r in new}
        entries = [e for e in entries if e.name not in names] + _dedupe(new)
        packages = _resolve_all(recipes, entries)
        return _commit(profile, backend, packages)


def _dedupe(refs):
    out = []
    for r in refs:
        if r not in out:
            out.append(r)
    return out


def apply_manifest(profile: Profile, manifest: Manifest, *, recipes: RecipeSet, backend) -> Generation:
    """Replace the profile contents with exactly ``manifest``."""
    packages = _resolve_all(recipes, manifest.entries)
    keys = [(p.name, p.version) for p in packages]
    if len(set(keys)) != len(keys):
        raise ProfileError("manifest resolves the same package twice")
    with profile.lock():
        return _commit(profile, backend, packages)


def switch_generation(profile: Profile, n: int) -> Generation:
    with profile.lock():
        gen = profile.generation(n)
        atomic_symlink(os.path.basename(profile.link_path(n)), profile.path)
        gen.current = True
        return gen


def rollback(profile: Profile) -> Generation:
    with profile.lock():
        cur = profile.current_number()
        older = [n for n in profile.numbers() if cur is not None and n < cur]
        if not older:
            raise ProfileError("nothing to roll back to")
        gen = profile.generation(older[-1])
        atomic_symlink(os.path.basename(profile.link_path(gen.number)), profile.path)
        gen.current = True
        return gen


def delete_generation(profile: Profile, n: int) -> None:
    with profile.lock():
        if n == profile.current_number():
            raise ProfileError(f"cannot delete the current generation {n}")
        link = profile.link_path(n)
        if not os.path.islink(link):
            raise ProfileError(f"generation {n} does not exist")
        os.unlink(link)


def search_paths_of(item: str) -> list[tuple[str, str, str]]:
    """(variable, value, separator) for every search path satisfied inside ``item``."""
    merged: dict[str, tuple[list, str]] = {}
    for pkg in _read_union_manifest(item)["packages"]:
        for spec in pkg.get("search-paths", []):
            d = os.path.join(item, spec["subdirectory"])
            if not os.path.isdir(d):
                continue
            dirs, sep = merged.setdefault(spec["variable"], ([], spec["separator"]))
            if d not in dirs:
                dirs.append(d)
    return [(var, sep.join(dirs), sep)
            for var, (dirs, sep) in sorted(merged.items(), key=lambda kv: kv[0].encode())]


def search_paths(profile: Profile) -> list[tuple[str, str, str]]:
    gen = profile.current()
    return [] if gen is None else search_paths_of(str(gen.item))


def format_search_paths(defs) -> str:
    return "".join(f'export {var}="{value}${{{var}:+{sep}}}${var}"\n' for var, value, sep in defs)


def format_generations(profile: Profile) -> str:
    lines = []
    for gen in profile.generations():
        mark = "  (current)" if gen.current else ""
        lines.append(f"Generation {gen.number}\t{gen.item}{mark}")
        for ref in gen.manifest.entries:
            lines.append(f"  {ref.name}\t{ref.version}")
    return "".join(line + "\n" for line in lines)


# -- environments -------------------------------------------------------------

PURE_EXTRAS = ("HOME", "TERM", "TMPDIR")


@dataclass
class Environment:
    item: StorePath
    variables: dict
    root_link: str | None = None

    @property
    def shell(self) -> str:
        return os.path.join(str(self.item), "bin", "sh")

    def which(self, program: str) -> str | None:
        if "/" in program:
            return program
        return shutil.which(program, path=self.variables.get("PATH", ""))

    def release(self) -> None:
        if self.root_link and os.path.lexists(self.root_link):
            os.unlink(self.root_link)


def environment_package(pkg: Package) -> Package:
    """Union over the inputs of ``pkg`` (implicit ones included), but not ``pkg`` itself."""
    inputs = list(all_inputs(pkg))
    if not any(label == "bootstrap" for label, _ in inputs):
        inputs.insert(0, ("bootstrap", BOOTSTRAP))
    return union_package(f"{pkg.full_name}-environment", [p for _, p in inputs])


def prepare_environment(pkg: Package, *, backend, state_dir: str, pure: bool = True,
                        host_env: dict | None = None) -> Environment:
    """Build the input union for ``pkg``, root it for this process, and compute its variables."""
    host_env = dict(os.environ if host_env is None else host_env)
    item = backend.build(backend.compile(environment_package(pkg)))
    link_dir = os.path.join(state_dir, "environments")
    os.makedirs(link_dir, exist_ok=True)
    link = os.path.join(link_dir, f"env-{os.getpid()}")
    atomic_symlink(str(item), link)
    backend.add_root(link, indirect=True)
    defs = search_paths_of(str(item))
    if pure:
        variables = {var: value for var, value, _ in defs}
        defaults = {"HOME": "/", "TERM": "dumb", "TMPDIR": "/tmp"}
        for key in PURE_EXTRAS:
            variables[key] = host_env.get(key, defaults[key])
    else:
        variables = dict(host_env)
        for var, value, sep in defs:
            old = variables.get(var)
            variables[var] = value + (sep + old if old else "")
    return Environment(item, variables, link)


def run_in_environment(env: Environment, command: list[str] | None = None) -> int:
    """Run ``command`` (or an interactive bootstrap shell) and drop the root afterwards."""
    try:
        if command:
            program = env.which(command[0])
            if program is None:
                raise HermitError(f"{command[0]}: not found in the environment")
            argv = [program] + list(command[1:])
        else:
            argv = [env.shell]
        return subprocess.call(argv, env=env.variables)
    finally:
        env.release()
