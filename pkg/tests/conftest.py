import io
import os
import shutil
from pathlib import Path

import pytest

from hermit.cli import main
from hermit.client import LocalBackend
from hermit.model import load_recipes
from hermit.store import Store, StoreConfig

FIXTURES = Path(__file__).parent / "fixtures"
RECIPES = FIXTURES / "recipes"
VARIANTS = FIXTURES / "variants"
PURITY = FIXTURES / "purity"
GOLDEN = FIXTURES / "golden"


def new_store(base, logical=None) -> Store:
    """Store whose state lives in ``base/state``; physical root ``base/store``."""
    base = Path(base)
    physical = str(base / "store")
    cfg = StoreConfig.for_state(str(base / "state"), logical_root=logical or physical, physical_root=physical)
    return Store(cfg)


def retire(base) -> Path:
    """Move a finished store out of the way so a fresh one can reuse its logical root."""
    base = Path(base)
    dest = base.with_name(base.name + "-old")
    n = 0
    while dest.exists():
        n += 1
        dest = base.with_name(f"{base.name}-old{n}")
    shutil.move(str(base), str(dest))
    return dest


def run_cli(argv, environ, stdin=b""):
    out = io.TextIOWrapper(io.BytesIO(), encoding="utf-8", write_through=True)
    err = io.StringIO()
    inp = io.TextIOWrapper(io.BytesIO(stdin), encoding="utf-8")
    code = main(list(argv), environ=environ, stdout=out, stderr=err, stdin=inp)
    out.flush()
    return code, out.buffer.getvalue(), err.getvalue()


def cli_env(base, *dirs, **extra):
    base = Path(base)
    env = {
        "HOME": str(base / "home"),
        "HERMIT_STATE": str(base / "state"),
        "HERMIT_STORE": str(base / "store"),
        "HERMIT_PACKAGE_PATH": ":".join(str(d) for d in (dirs or (RECIPES,))),
    }
    os.makedirs(env["HOME"], exist_ok=True)
    env.update(extra)
    return env


@pytest.fixture
def store(tmp_path):
    return new_store(tmp_path / "a")


@pytest.fixture
def backend(store):
    return LocalBackend(store)


@pytest.fixture(scope="session")
def recipes():
    return load_recipes([RECIPES])


@pytest.fixture(scope="session")
def all_recipes():
    return load_recipes([RECIPES, VARIANTS, PURITY])
