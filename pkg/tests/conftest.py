import os
from pathlib import Path

import pytest

from selfavg.engine import PrecisionConfig, build_or_resume, load_table, save_table
from selfavg.kernels import get_kernel

# criterion number -> (passed, one-line detail); printed at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (passed, detail)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): acceptance criterion n")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    missing = sorted(set(range(1, 11)) - set(ACCEPTANCE))
    for n in missing:
        terminalreporter.write_line(f"criterion {n:2d}: NOT RUN")


def _cache_dir(config) -> Path:
    override = os.environ.get("SELFAVG_TABLE_CACHE")
    if override:
        path = Path(override)
        path.mkdir(parents=True, exist_ok=True)
        return path
    return Path(config.cache.mkdir("selfavg-tables"))


def cached_table(config, kernel: str, n_max: int, bits: int = 256, *, build: bool = True):
    """Load a table from the test cache, building (with checkpoints) when missing."""
    path = _cache_dir(config) / f"{kernel}{n_max}_{bits}.native.json"
    if path.exists():
        return load_table(path)
    if not build:
        return None
    ckpt = path.with_suffix(".partial.json") if n_max >= 3000 else None
    table = build_or_resume(kernel, n_max, PrecisionConfig(initial_bits=bits, max_bits=max(4096, 4 * bits)), ckpt)
    save_table(table, path, "native")
    if ckpt is not None and ckpt.exists():
        ckpt.unlink()
    return table


@pytest.fixture(scope="session")
def roulette2000(request):
    return cached_table(request.config, "roulette", 2000)


@pytest.fixture(scope="session")
def roulette2000_doubled(request):
    return cached_table(request.config, "roulette", 2000, bits=512)


@pytest.fixture(scope="session")
def parity10k(request):
    return cached_table(request.config, "parity", 10_000)


@pytest.fixture(scope="session")
def roulette6000(request):
    build = os.environ.get("SELFAVG_FULL") == "1"
    table = cached_table(request.config, "roulette", 6000, build=build)
    if table is None:
        pytest.skip("6000-entry table not cached; set SELFAVG_FULL=1 to build it (hours)")
    return table


@pytest.fixture(scope="session")
def roulette():
    return get_kernel("roulette")
