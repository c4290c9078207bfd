"""Command-line front end.

Usage:
    selfavg table --kernel roulette --n-max 2000 --out p.json
    selfavg envelope --table p.json --x-range 40 108.73 --step 0.05 --out env.csv
    selfavg scan --table p.json
    selfavg simulate --kernel roulette --n 3 --trials 1000000 --seed 7
    selfavg verify --suite all --table p.json

Exit codes: 0 success, 2 usage, 3 numeric/precision failure, 4 verification failure.
Each written file gets a ``<file>.manifest.json`` sidecar; the data file
itself is byte-identical across reruns with the same parameters.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import __version__
from .engine import (PrecisionConfig, build_or_resume, load_table, martingale_check, table_to_csv,
                     table_to_json, table_to_native, transition_matrix)
from .envelope import (DEFAULT_K, contraction_constants, envelope_csv, envelope_curve,
                       envelope_json, expectation_bound_check, scan_over_K,
                       subsequence_containment, variance_bound_check)
from .errors import DomainError, PrecisionError, SelfAvgError, WindowError
from .kernels import DriftParameters, get_kernel, kernel_names, verify_drift
from .simulator import TrialConfig, run_trials

EXIT_NUMERIC = 3
EXIT_VERIFY = 4
OUTPUT_DIR_ENV = "SELFAVG_OUTPUT_DIR"

log = logging.getLogger("selfavg")


class Failure(click.ClickException):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.exit_code = code


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _resolve_out(out: str | None, default_name: str) -> Path | None:
    if out:
        return Path(out)
    base = os.environ.get(OUTPUT_DIR_ENV)
    return Path(base) / default_name if base else None


def _emit(text: str, out: Path | None, params: dict, inputs: list[Path], started: float) -> None:
    if out is None:
        click.echo(text, nl=False)
        return
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    manifest = {
        "command": click.get_current_context().info_name,
        "parameters": params,
        "version": __version__,
        "inputs": {str(p): _digest(p) for p in inputs},
        "outputs": {str(out): _digest(out)},
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    Path(str(out) + ".manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    click.echo(f"wrote {out}", err=True)


def _drift_for(kernel_name: str) -> DriftParameters:
    if kernel_name not in kernel_names():
        raise click.UsageError(f"table kernel {kernel_name!r} is not registered; pass --kernel")
    drift = get_kernel(kernel_name).drift
    if drift is None:
        raise Failure(f"kernel {kernel_name!r} has no drift parameters", 2)
    return drift


def _consts(kernel_name: str, K: float):
    try:
        return contraction_constants(_drift_for(kernel_name), K)
    except SelfAvgError as exc:
        raise Failure(str(exc), EXIT_NUMERIC) from exc


def _plain(obj):
    # numpy scalars in reports
    if hasattr(obj, "item"):
        return obj.item()
    raise TypeError(f"not serializable: {type(obj).__name__}")


def _threads(value: int | None) -> int:
    return value if value and value > 0 else (os.cpu_count() or 1)


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose: bool):
    """Self-averaging sequences: exact tables, Chebyshev envelopes, period scans."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")


@cli.command("table")
@click.option("--kernel", type=click.Choice(kernel_names()), default="roulette", show_default=True)
@click.option("--n-max", type=click.IntRange(min=0), required=True)
@click.option("--precision-bits", type=click.IntRange(min=64), default=256, show_default=True)
@click.option("--max-bits", type=click.IntRange(min=64), default=4096, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False))
@click.option("--format", "fmt", type=click.Choice(["json", "csv", "native"]), default=None,
              help="Defaults to csv for .csv files, json otherwise.")
@click.option("--checkpoint/--no-checkpoint", default=None,
              help="Save progress every 100 rows (on by default for n-max >= 3000).")
@click.option("--threads", type=int, default=None, help="Worker processes for pmf rows (default: all).")
def cmd_table(kernel, n_max, precision_bits, max_bits, out, fmt, checkpoint, threads):
    """Build p(0..n_max) for a kernel."""
    started = time.time()
    if max_bits < precision_bits:
        raise click.UsageError("--max-bits must be >= --precision-bits")
    out_path = _resolve_out(out, f"{kernel}_{n_max}.json")
    fmt = fmt or ("csv" if out_path is not None and out_path.suffix == ".csv" else "json")
    if checkpoint is None:
        checkpoint = n_max >= 3000
    ckpt = None
    if checkpoint and out_path is not None:
        ckpt = Path(str(out_path) + ".partial.json")
    precision = PrecisionConfig(initial_bits=precision_bits, max_bits=max_bits)
    try:
        table = build_or_resume(kernel, n_max, precision, ckpt, workers=_threads(threads))
    except PrecisionError as exc:
        raise Failure(str(exc), EXIT_NUMERIC) from exc
    text = {"json": table_to_json, "csv": table_to_csv, "native": table_to_native}[fmt](table)
    params = dict(kernel=kernel, n_max=n_max, precision_bits=precision_bits, max_bits=max_bits, format=fmt)
    _emit(text, out_path, params, [], started)
    if ckpt is not None and ckpt.exists():
        ckpt.unlink()


def _load(path: str):
    try:
        return load_table(path)
    except (OSError, ValueError, KeyError) as exc:
        raise click.BadParameter(f"cannot read table {path}: {exc}", param_hint="--table") from exc


@cli.command("envelope")
@click.option("--table", "table_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--kernel", type=click.Choice(kernel_names()), default=None,
              help="Drift constants to use (default: the table's kernel).")
@click.option("--x", "xs", type=float, multiple=True, help="Evaluation point (repeatable).")
@click.option("--x-range", nargs=2, type=float, default=None, help="Curve from A to B.")
@click.option("--step", type=float, default=0.1, show_default=True)
@click.option("--K", "K", type=float, default=DEFAULT_K, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False))
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default=None)
def cmd_envelope(table_path, kernel, xs, x_range, step, K, out, fmt):
    """Evaluate l(x), u(x) at points or along a range."""
    started = time.time()
    table = _load(table_path)
    consts = _consts(kernel or table.kernel_name, K)
    points = list(xs)
    if x_range:
        a, b = x_range
        points += [float(v) for v in np.arange(a, b + 0.5 * step, step) if v <= b + 1e-12]
    if not points:
        raise click.UsageError("give --x or --x-range")
    try:
        results = envelope_curve(table, consts, points)
    except WindowError as exc:
        raise Failure(str(exc), EXIT_NUMERIC) from exc
    out_path = _resolve_out(out, f"envelope_{table.kernel_name}.csv")
    fmt = fmt or ("json" if out_path is not None and out_path.suffix == ".json" else "csv")
    text = envelope_csv(results) if fmt == "csv" else envelope_json(results, consts)
    params = dict(table=table_path, kernel=kernel, x=list(xs), x_range=list(x_range) if x_range else None, step=step, K=K)
    _emit(text, out_path, params, [Path(table_path)], started)


@cli.command("scan")
@click.option("--table", "table_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--kernel", type=click.Choice(kernel_names()), default=None,
              help="Drift constants to use (default: the table's kernel).")
@click.option("--x0", type=float, default=None, help="Start of the period (default: automatic sweep).")
@click.option("--grid-step", type=float, default=0.1, show_default=True)
@click.option("--K", "Ks", type=float, multiple=True, default=[DEFAULT_K], show_default=True,
              help="Repeat to sweep K and keep the sharpest bands.")
@click.option("--out", type=click.Path(dir_okay=False))
def cmd_scan(table_path, kernel, x0, grid_step, Ks, out):
    """Bound liminf and limsup of p over one period and report the verdict."""
    started = time.time()
    table = _load(table_path)
    name = kernel or table.kernel_name
    for K in Ks:
        _consts(name, K)
    try:
        res = scan_over_K(table, _drift_for(name), Ks, x0, grid_step)
    except (WindowError, DomainError) as exc:
        raise Failure(str(exc), EXIT_NUMERIC) from exc
    click.echo(f"{res.liminf_lower:.6f} <= liminf p <= {res.liminf_upper:.6f}", err=True)
    click.echo(f"{res.limsup_lower:.6f} <= limsup p <= {res.limsup_upper:.6f}", err=True)
    click.echo(f"verdict: {res.verdict} (gap {res.gap:.6f})", err=True)
    text = json.dumps(res.to_dict(), indent=1, sort_keys=True) + "\n"
    _emit(text, _resolve_out(out, f"scan_{table.kernel_name}.json"),
          dict(table=table_path, kernel=kernel, x0=x0, grid_step=grid_step, K=list(Ks)), [Path(table_path)], started)


@cli.command("simulate")
@click.option("--kernel", type=click.Choice(kernel_names()), default="roulette", show_default=True)
@click.option("--n", "n", type=click.IntRange(min=0), required=True)
@click.option("--trials", type=click.IntRange(min=1), default=100_000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--batch-size", type=click.IntRange(min=1), default=10_000, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False))
@click.option("--histogram", type=click.Path(dir_okay=False), help="CSV of absorption states and round counts.")
@click.option("--threads", type=int, default=None)
def cmd_simulate(kernel, n, trials, seed, batch_size, out, histogram, threads):
    """Monte Carlo estimate of p(n)."""
    started = time.time()
    cfg = TrialConfig(kernel, n, trials, seed, batch_size)
    res = run_trials(cfg, threads=_threads(threads))
    params = dict(kernel=kernel, n=n, trials=trials, seed=seed, batch_size=batch_size)
    _emit(res.to_json(), _resolve_out(out, f"simulate_{kernel}_{n}.json"), params, [], started)
    if histogram:
        _emit(res.histogram_csv(), Path(histogram), params, [], started)


def _table_for(kernel: str, table_path: str | None, n_max: int):
    if table_path:
        return _load(table_path)
    return build_or_resume(kernel, n_max, PrecisionConfig(), None)


@cli.command("verify")
@click.option("--suite", type=click.Choice(["drift", "martingale", "lemmas", "containment", "all"]),
              default="all", show_default=True)
@click.option("--kernel", type=click.Choice(kernel_names()), default="roulette", show_default=True)
@click.option("--table", "table_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--n-max", type=click.IntRange(min=2), default=2000, show_default=True,
              help="Range for the drift suite and size of a table built on the fly.")
@click.option("--n", "n", type=click.IntRange(min=0), default=100, show_default=True,
              help="Start population for the martingale and lemma suites.")
@click.option("--k-max", type=click.IntRange(min=0), default=10, show_default=True)
@click.option("--K", "K", type=float, default=DEFAULT_K, show_default=True)
@click.option("--x", "xs", type=float, multiple=True, help="Containment anchors (default 40 60 80).")
@click.option("--json-out", type=click.Path(dir_okay=False), help="Write the JSON report here.")
def cmd_verify(suite, kernel, table_path, n_max, n, k_max, K, xs, json_out):
    """Run verification suites; exit 4 if any check fails."""
    started = time.time()
    report: dict = {}
    failures: list[str] = []
    suites = ["drift", "martingale", "lemmas", "containment"] if suite == "all" else [suite]
    table = None
    if table_path:
        table = _load(table_path)
        kernel = table.kernel_name
    kern = get_kernel(kernel)
    drift = _drift_for(kernel)

    if "drift" in suites:
        top = table.n_max if table is not None and suite == "all" else n_max
        r = verify_drift(kern, drift, range(2, top + 1))
        report["drift"] = r.to_dict()
        failures += [f"drift n={row.n}" for row in r.failures]
    if "martingale" in suites or "lemmas" in suites:
        P = transition_matrix(kern, n)
    if "martingale" in suites:
        t = table if table is not None and table.n_max >= n else _table_for(kernel, None, n)
        r = martingale_check(t, kern, n, k_max, matrix=P)
        report["martingale"] = {"n": n, "max_deviation": r.max_deviation, "passed": r.passed}
        if not r.passed:
            failures.append(f"martingale n={n} deviation {r.max_deviation:.3e}")
    if "lemmas" in suites:
        consts = _consts(kernel, K)
        e = expectation_bound_check(kern, drift, n, k_max, matrix=P)
        v = variance_bound_check(kern, consts, n, k_max, matrix=P)
        report["lemmas"] = {"n": n, "K": K, "C": consts.C, "D": consts.D,
                            "expectation_passed": e.passed, "variance_passed": v.passed}
        failures += [f"expectation k={row.k}" for row in e.violations]
        failures += [f"variance k={row.k}" for row in v.violations]
    if "containment" in suites:
        t = table if table is not None else _table_for(kernel, None, n_max)
        consts = _consts(kernel, K)
        report["containment"] = []
        for x in xs or (40.0, 60.0, 80.0):
            try:
                c = subsequence_containment(x, t, consts)
            except WindowError as exc:
                raise Failure(str(exc), EXIT_NUMERIC) from exc
            report["containment"].append({"x": x, "l": c.lower, "u": c.upper, "passed": c.passed,
                                          "N": [row.N for row in c.rows]})
            failures += [f"containment x={x} N={row.N}" for row in c.rows if not row.ok]

    report["passed"] = not failures
    text = json.dumps(report, indent=1, sort_keys=True, default=_plain) + "\n"
    if json_out:
        _emit(text, Path(json_out), dict(suite=suite, kernel=kernel, n_max=n_max, n=n, k_max=k_max, K=K),
              [Path(table_path)] if table_path else [], started)
    prefixes = {"drift": ("drift",), "martingale": ("martingale",), "lemmas": ("expectation", "variance"),
                "containment": ("containment",)}
    for name in suites:
        status = "FAIL" if any(f.startswith(prefixes[name]) for f in failures) else "pass"
        click.echo(f"{name:12s} {status}")
    if failures:
        for f in failures[:20]:
            click.echo(f"  failed: {f}", err=True)
        raise Failure(f"{len(failures)} check(s) failed", EXIT_VERIFY)


def main():
    try:
        cli.main(standalone_mode=False)
    except click.exceptions.Abort:
        sys.exit(1)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)
    except PrecisionError as exc:
        click.echo(f"Error: {exc}", err=True)
        sys.exit(EXIT_NUMERIC)


if __name__ == "__main__":
    main()
