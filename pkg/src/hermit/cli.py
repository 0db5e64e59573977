"""Command-line front end: ``hermit <subcommand> ...``.

Exit status is 0 on success, 1 when an operation fails and 2 for usage
errors. Results go to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass

from . import __version__, archive, base32
from .client import DaemonClient, LocalBackend
from .daemon import serve, socket_path_for
from .errors import DaemonNotRunning, HermitError, ResolutionError
from .model import (PackageRef, RecipeSet, load_recipes, package_path_from_env, read_manifest,
                    rewrite_inputs, transitive_inputs, iter_dag)
from .profile import (Manifest, Profile, apply_manifest, apply_transaction,
                      format_generations, format_search_paths, prepare_environment, rollback,
                      run_in_environment, search_paths, switch_generation)
from .store import DEFAULT_LOGICAL_ROOT, Store, StoreConfig

log = logging.getLogger("hermit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class Settings:
    state_dir: str
    store_root: str
    package_path: list
    daemon: str  # auto | always | never
    verbose: bool
    jobs: int
    home: str

    @property
    def socket_path(self) -> str:
        return socket_path_for(self.state_dir)

    def store_config(self) -> StoreConfig:
        return StoreConfig.for_state(self.state_dir, self.store_root)


def settings_from(args, environ) -> Settings:
    home = environ.get("HOME") or os.path.expanduser("~")
    state = args.state or environ.get("HERMIT_STATE") or os.path.join(home, ".hermit")
    root = args.store or environ.get("HERMIT_STORE") or DEFAULT_LOGICAL_ROOT
    path = package_path_from_env(environ.get("HERMIT_PACKAGE_PATH")) + list(args.load_path or [])
    return Settings(os.path.abspath(state), root.rstrip("/") or "/", path, args.daemon,
                    args.verbose, args.jobs, home)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hermit", description="A miniature functional package manager.")
    p.add_argument("--version", action="version", version=f"hermit {__version__}")
    p.add_argument("--store", help="logical store root (env HERMIT_STORE)")
    p.add_argument("--state", help="state directory (env HERMIT_STATE, default ~/.hermit)")
    p.add_argument("-L", "--load-path", action="append", metavar="DIR",
                   help="recipe directory, searched after HERMIT_PACKAGE_PATH")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--no-daemon", dest="daemon", action="store_const", const="never",
                   help="access the store directly")
    g.add_argument("--daemon", dest="daemon", action="store_const", const="always",
                   help="require a running daemon")
    p.set_defaults(daemon="auto")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("-j", "--jobs", type=int, default=1, help="parallel builds")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("build", help="build packages and print their store paths")
    s.add_argument("packages", nargs="+", metavar="PKG[@VERSION]")
    s.add_argument("--check", action="store_true", help="rebuild and compare with the stored result")

    s = sub.add_parser("package", help="manage a profile")
    s.add_argument("-p", "--profile", help="profile path (default ~/.hermit-profile)")
    s.add_argument("-i", "--install", nargs="+", default=[], metavar="PKG")
    s.add_argument("-r", "--remove", nargs="+", default=[], metavar="PKG")
    s.add_argument("-m", "--manifest", metavar="FILE")
    s.add_argument("--roll-back", action="store_true")
    s.add_argument("--switch-generation", type=int, metavar="N")
    s.add_argument("-l", "--list-generations", action="store_true")
    s.add_argument("--search-paths", action="store_true")

    s = sub.add_parser("environment", help="run a shell, or the command after '--', with a package's inputs")
    s.add_argument("package", metavar="PKG[@VERSION]")
    s.add_argument("--pure", action="store_true", help="drop every variable but the search paths, HOME, TERM, TMPDIR")
    s.set_defaults(cmd=[])

    s = sub.add_parser("archive", help="export or import store closures")
    a = s.add_mutually_exclusive_group(required=True)
    a.add_argument("--export", nargs="+", metavar="ROOT")
    a.add_argument("--import", dest="import_", action="store_true")

    sub.add_parser("gc", help="delete store items unreachable from GC roots")

    s = sub.add_parser("graph", help="inspect a package's dependency graph")
    s.add_argument("package", metavar="PKG[@VERSION]")
    fmt = s.add_mutually_exclusive_group()
    fmt.add_argument("--refs", action="store_true", help="transitive inputs as a list of full names")
    fmt.add_argument("--dot", action="store_true", help="Graphviz output")

    s = sub.add_parser("rewrite", help="replace an input label throughout a package graph")
    s.add_argument("package", metavar="PKG[@VERSION]")
    s.add_argument("--replace", required=True, metavar="LABEL=PKG")
    s.add_argument("--then", choices=("build", "graph"), default="build")
    fmt = s.add_mutually_exclusive_group()
    fmt.add_argument("--refs", action="store_true")
    fmt.add_argument("--dot", action="store_true")

    sub.add_parser("daemon", help="run the store daemon in the foreground")

    s = sub.add_parser("hash", help="print the recipe sha256 of a file or directory")
    s.add_argument("path")
    return p


# -- helpers ------------------------------------------------------------------

class Context:
    def __init__(self, settings: Settings, stdout, stderr, stdin):
        self.settings = settings
        self.stdout = stdout
        self.stderr = stderr
        self.stdin = stdin
        self._recipes = None
        self._backend = None

    @property
    def recipes(self) -> RecipeSet:
        if self._recipes is None:
            self._recipes = load_recipes(self.settings.package_path)
        return self._recipes

    @property
    def backend(self):
        if self._backend is None:
            self._backend = self._connect()
        return self._backend

    def _connect(self):
        s = self.settings
        if s.daemon != "never":
            try:
                client = DaemonClient(s.socket_path, s.store_root)
                log.info("using daemon at %s", s.socket_path)
                return client
            except DaemonNotRunning:
                if s.daemon == "always":
                    raise
        log.info("using store %s directly (state %s)", s.store_root, s.state_dir)
        return LocalBackend(Store(s.store_config()))

    def close(self):
        if self._backend is not None:
            self._backend.close()

    def out(self, text: str) -> None:
        self.stdout.write(text)

    def resolve(self, ref: str):
        return self.recipes.resolve(PackageRef.parse(ref))


def _build_pkg(ctx: Context, pkg, check=False):
    return ctx.backend.build(ctx.backend.compile(pkg), check=check, jobs=ctx.settings.jobs)


def _graph_text(pkg, refs: bool, dot: bool) -> str:
    if refs:
        return "(" + " ".join(f'"{name}"' for _, name in transitive_inputs(pkg)) + ")\n"
    if dot:
        lines = ["digraph hermit {"]
        nodes = list(iter_dag(pkg))
        ids = {id(p): f"n{i}" for i, p in enumerate(nodes)}
        for p in nodes:
            lines.append(f'  {ids[id(p)]} [label="{p.full_name}"];')
        for p in nodes:
            for label, dep in p.inputs:
                lines.append(f'  {ids[id(p)]} -> {ids[id(dep)]} [label="{label}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"
    return "".join(f"{label}\t{name}\n" for label, name in transitive_inputs(pkg))


# -- subcommands --------------------------------------------------------------

def cmd_build(ctx: Context, args) -> int:
    pkgs = [ctx.resolve(r) for r in args.packages]
    for pkg in pkgs:
        ctx.out(f"{_build_pkg(ctx, pkg, check=args.check)}\n")
    return 0


def cmd_package(ctx: Context, args) -> int:
    actions = [bool(args.install or args.remove), bool(args.manifest), args.roll_back,
               args.switch_generation is not None, args.list_generations, args.search_paths]
    if sum(actions) != 1:
        raise UsageError("hermit package: give exactly one of --install/--remove, --manifest, "
                         "--roll-back, --switch-generation, --list-generations, --search-paths")
    path = args.profile or os.path.join(ctx.settings.home, ".hermit-profile")
    profile = Profile(path, ctx.settings.store_root)
    if args.list_generations:
        ctx.out(format_generations(profile))
    elif args.search_paths:
        ctx.out(format_search_paths(search_paths(profile)))
    elif args.roll_back:
        gen = rollback(profile)
        print(f"switched to generation {gen.number}", file=ctx.stderr)
    elif args.switch_generation is not None:
        gen = switch_generation(profile, args.switch_generation)
        print(f"switched to generation {gen.number}", file=ctx.stderr)
    else:
        if args.manifest:
            gen = apply_manifest(profile, Manifest(read_manifest(args.manifest)),
                                 recipes=ctx.recipes, backend=ctx.backend)
        else:
            gen = apply_transaction(profile, args.install, args.remove,
                                    recipes=ctx.recipes, backend=ctx.backend)
        print(f"generation {gen.number}: {gen.item}", file=ctx.stderr)
    return 0


def cmd_environment(ctx: Context, args) -> int:
    cmd = list(args.cmd)
    pkg = ctx.resolve(args.package)
    env = prepare_environment(pkg, backend=ctx.backend, state_dir=ctx.settings.state_dir, pure=args.pure)
    if ctx.settings.verbose:
        for k in sorted(env.variables):
            log.info("env %s=%s", k, env.variables[k])
    ctx.stdout.flush()
    return run_in_environment(env, cmd)


def cmd_archive(ctx: Context, args) -> int:
    backend = ctx.backend
    if args.import_:
        stream = ctx.stdin.buffer.read() if hasattr(ctx.stdin, "buffer") else ctx.stdin.read()
        for p in backend.import_(stream):
            ctx.out(f"{p}\n")
        return 0
    roots = []
    for r in args.export:
        if r.startswith("/"):
            roots.append(backend.parse_path(r))
        else:
            roots.append(_build_pkg(ctx, ctx.resolve(r)))
    data = backend.export(roots)
    ctx.stdout.flush()
    sink = ctx.stdout.buffer if hasattr(ctx.stdout, "buffer") else ctx.stdout
    sink.write(data)
    sink.flush()
    return 0


def cmd_gc(ctx: Context, args) -> int:
    report = ctx.backend.gc()
    for p in report.deleted:
        ctx.out(f"{p}\n")
    print(f"deleted {len(report.deleted)} items, freed {report.freed_bytes} bytes", file=ctx.stderr)
    return 0


def cmd_graph(ctx: Context, args) -> int:
    ctx.out(_graph_text(ctx.resolve(args.package), args.refs, args.dot))
    return 0


def cmd_rewrite(ctx: Context, args) -> int:
    label, sep, target = args.replace.partition("=")
    if not sep or not label or not target:
        raise UsageError("hermit rewrite: --replace expects LABEL=PKG")
    pkg = ctx.resolve(args.package)
    new, count = rewrite_inputs(pkg, label, ctx.resolve(target))
    print(f"rewrote {count} input edge(s) labeled {label!r}", file=ctx.stderr)
    if args.then == "graph":
        ctx.out(_graph_text(new, args.refs, args.dot))
    else:
        ctx.out(f"{_build_pkg(ctx, new)}\n")
    return 0


def cmd_daemon(ctx: Context, args) -> int:
    s = ctx.settings
    print(f"serving store {s.store_root} on {s.socket_path}", file=ctx.stderr)
    serve(Store(s.store_config()), s.socket_path)
    return 0


def cmd_hash(ctx: Context, args) -> int:
    data = archive.dump_path(args.path)
    ctx.out(base32.encode(hashlib.sha256(data).digest()) + "\n")
    return 0


COMMANDS = {
    "build": cmd_build, "package": cmd_package, "environment": cmd_environment,
    "archive": cmd_archive, "gc": cmd_gc, "graph": cmd_graph, "rewrite": cmd_rewrite,
    "daemon": cmd_daemon, "hash": cmd_hash,
}


def main(argv=None, *, environ=None, stdout=None, stderr=None, stdin=None) -> int:
    environ = os.environ if environ is None else environ
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    stdin = stdin or sys.stdin
    argv = list(sys.argv[1:] if argv is None else argv)
    # everything after "--" is a command line for `environment`
    tail = []
    if "--" in argv:
        cut = argv.index("--")
        argv, tail = argv[:cut], argv[cut + 1:]
    try:
        args = build_parser().parse_args(argv)
        if tail:
            if args.command != "environment":
                raise UsageError("hermit: '--' is only meaningful for 'environment'")
            args.cmd = tail
    except UsageError as exc:
        print(exc, file=stderr)
        return 2
    except SystemExit as exc:  # --help, --version
        return exc.code or 0
    settings = settings_from(args, environ)
    _setup_logging(settings.verbose, stderr)
    log.info("state=%s store=%s package-path=%s daemon=%s", settings.state_dir, settings.store_root,
             ":".join(settings.package_path), settings.daemon)
    ctx = Context(settings, stdout, stderr, stdin)
    try:
        return COMMANDS[args.command](ctx, args)
    except UsageError as exc:
        print(exc, file=stderr)
        return 2
    except ResolutionError as exc:
        print(f"hermit: error: {exc}", file=stderr)
        if exc.suggestions and "did you mean" not in str(exc):
            print(f"hermit: hint: did you mean {', '.join(exc.suggestions)}?", file=stderr)
        return 1
    except HermitError as exc:
        print(f"hermit: error: {exc}", file=stderr)
        log_bytes = getattr(exc, "log", b"")
        if log_bytes and settings.verbose:
            stderr.write(log_bytes.decode("utf-8", "replace"))
        return 1
    except (OSError, json.JSONDecodeError) as exc:
        print(f"hermit: error: {exc}", file=stderr)
        return 1
    finally:
        ctx.close()


def _setup_logging(verbose: bool, stream) -> None:
    root = logging.getLogger("hermit")
    for h in list(root.handlers):
        root.removeHandler(h)
    handler = logging.StreamHandler(stream)
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s: %(message)s"))
    root.addHandler(handler)
    root.setLevel(logging.INFO if verbose else logging.WARNING)
    root.propagate = False


if __name__ == "__main__":
    sys.exit(main())
