"""Command-line front end: single solves and parameter sweeps.

    invpower --kind dirichlet-1d --M 200 --p 3 --q 2 --out-dir out/
    invpower --kind steklov --p 2 --q 2 --M 400 --mu-hat
    invpower --kind dirichlet --N 2 --p 2 --q 2 --sweep-file sweep.json

Exit status: 0 converged, 2 hit max_outer, 1 error.  Outputs are written
with 17 significant digits and no timestamps, so identical configurations
give byte-identical files.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .engine import EngineConfig, run, seed
from .errors import InvalidExponent, InvPowerError, MissingRequired
from .grid import Exponents, write_field_csv
from .inner import InnerConfig
from .operators import make_pair, parse_kind
from .oracle import rayleigh_minimize_direct

OUT_DIR_ENV = "INVPOWER_OUT_DIR"
SUMMARY_COLUMNS = ["kind", "p", "q", "M", "lambda", "iters", "converged", "mu_hat", "exit_code", "error"]


class UsageError(InvPowerError):
    pass


@dataclass(frozen=True)
class RunConfig:
    kind: str  # canonical label such as "dirichlet-2d"
    p: float
    q: float
    M: int = 64
    s: float | None = None
    R: float = 1.0
    seed_kind: str = "const-one"
    rng_seed: int = 0
    seed_file: str | None = None
    rtol: float = 1e-10
    wtol: float = 1e-10
    max_outer: int = 1000
    inner_tol: float = 1e-10
    inner_max_iter: int = 200
    out_dir: str = "invpower_out"
    trace_csv: str = "trace.csv"
    eigen_csv: str = "eigenfunction.csv"
    result_json: str = "result.json"
    plot_svg: str = "convergence.svg"
    strict: bool = False
    mu_hat: bool = False
    debug_inner: bool = False

    @property
    def N(self) -> int:
        return parse_kind(self.kind)[1]

    def engine_config(self, mu_hat: float | None = None) -> EngineConfig:
        inner = InnerConfig(max_iter=self.inner_max_iter,
                            debug_csv=str(self.path("inner_debug.csv")) if self.debug_inner else None)
        return EngineConfig(rtol=self.rtol, wtol=self.wtol, max_outer=self.max_outer,
                            inner_tol=self.inner_tol, inner=inner, strict=self.strict, mu_hat=mu_hat)

    def path(self, name: str) -> Path:
        return Path(self.out_dir) / name

    def to_dict(self) -> dict:
        return asdict(self)


_FIELD_NAMES = [f.name for f in fields(RunConfig)]
_FLOATS = {"p", "q", "s", "R", "rtol", "wtol", "inner_tol"}
_INTS = {"M", "rng_seed", "max_outer", "inner_max_iter"}
_BOOLS = {"strict", "mu_hat", "debug_inner"}


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which would collide with "max-iters"
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="invpower", description="Inverse power iteration for nonlinear eigenproblems.")
    ap.add_argument("--config", help="JSON file with RunConfig fields (flags override it)")
    ap.add_argument("--kind", help="dirichlet-1d, dirichlet-2d, fractional-1d, steklov-1d, or a bare kind with --N")
    ap.add_argument("--N", type=int)
    ap.add_argument("--M", type=int)
    ap.add_argument("--p", type=float)
    ap.add_argument("--q", type=float)
    ap.add_argument("--s", type=float)
    ap.add_argument("--R", type=float)
    ap.add_argument("--seed-kind", dest="seed_kind", choices=["const-one", "random", "file"])
    ap.add_argument("--rng-seed", dest="rng_seed", type=int)
    ap.add_argument("--seed-file", dest="seed_file")
    ap.add_argument("--rtol", type=float)
    ap.add_argument("--wtol", type=float)
    ap.add_argument("--max-outer", dest="max_outer", type=int)
    ap.add_argument("--inner-tol", dest="inner_tol", type=float)
    ap.add_argument("--inner-max-iter", dest="inner_max_iter", type=int)
    ap.add_argument("--out-dir", dest="out_dir")
    ap.add_argument("--strict", action="store_true", default=None, help="abort on an invariant violation")
    ap.add_argument("--mu-hat", dest="mu_hat", action="store_true", default=None,
                    help="compute the direct Rayleigh minimum and check the lower bound")
    ap.add_argument("--debug-inner", dest="debug_inner", action="store_true", default=None)
    ap.add_argument("--sweep-file", dest="sweep_file", help="JSON list of config overrides, one run each")
    return ap


def _coerce(key, value):
    if value is None:
        return None
    if key in _FLOATS:
        return float(value)
    if key in _INTS:
        if isinstance(value, float) and not value.is_integer():
            raise UsageError(f"{key} must be an integer (got {value!r})")
        return int(value)
    if key in _BOOLS:
        if not isinstance(value, bool):
            raise UsageError(f"{key} must be true or false (got {value!r})")
        return value
    return str(value)


def config_from_mapping(values: dict, env=None) -> RunConfig:
    """Validate a merged mapping of settings and build a RunConfig."""
    env = os.environ if env is None else env
    values = {k: v for k, v in values.items() if v is not None}
    unknown = sorted(set(values) - set(_FIELD_NAMES) - {"N"})
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    missing = [k for k in ("kind", "p", "q") if k not in values]
    if missing:
        raise MissingRequired("missing required setting(s): " + ", ".join(missing))
    values = {k: _coerce(k, v) for k, v in values.items()}
    base, n = parse_kind(values["kind"], values.pop("N", None))
    values["kind"] = f"{base}-{n}d"
    if base == "fractional":
        values.setdefault("s", 0.5)
    elif "s" in values:
        values.pop("s")
    values.setdefault("out_dir", env.get(OUT_DIR_ENV) or RunConfig.out_dir)

    problems = []
    for name in ("rtol", "wtol", "inner_tol", "R"):
        if name in values and not values[name] > 0:
            problems.append(f"{name} must be positive (got {values[name]!r})")
    for name in ("M", "max_outer", "inner_max_iter"):
        if name in values and values[name] < 1:
            problems.append(f"{name} must be at least 1 (got {values[name]})")
    if values.get("seed_kind") == "file" and not values.get("seed_file"):
        problems.append("seed_kind=file needs seed_file")
    try:
        Exponents(p=values["p"], q=values["q"], N=n, kind=base, s=values.get("s"))
    except InvalidExponent as exc:
        raise InvalidExponent(exc.violations + problems) from None
    if problems:
        raise UsageError("; ".join(problems))
    return RunConfig(**values)


def _load_json(path) -> dict | list:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc


def parse_args(argv=None):
    """Parse argv with config-file values overridden by flags.

    Returns (RunConfig, None) for a single run, or (merged base mapping, deltas)
    when a sweep file is given.
    """
    ns = build_parser().parse_args(argv)
    merged = {}
    if ns.config:
        data = _load_json(ns.config)
        if not isinstance(data, dict):
            raise UsageError(f"{ns.config}: expected a JSON object")
        merged.update(data)
    flags = {k: v for k, v in vars(ns).items() if v is not None and k not in ("config", "sweep_file")}
    if "kind" in flags and "N" not in flags:
        merged.pop("N", None)  # a kind given on the command line carries its own dimension
    merged.update(flags)
    deltas = None
    if ns.sweep_file:
        deltas = _load_json(ns.sweep_file)
        if isinstance(deltas, dict):
            deltas = deltas.get("deltas")
        if not isinstance(deltas, list) or not deltas:
            raise UsageError("sweep file must hold a non-empty list of config overrides")
        return merged, deltas
    return config_from_mapping(merged), None


def parse_config(argv=None) -> RunConfig:
    cfg, deltas = parse_args(argv)
    if deltas is not None:
        raise UsageError("parse_config does not accept --sweep-file; use sweep()")
    return cfg


def render(cfg: RunConfig) -> list[str]:
    """Command-line flags that parse back to ``cfg``."""
    argv = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if value is None:
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.name in ("trace_csv", "eigen_csv", "result_json", "plot_svg"):
            continue  # file names are only settable through a config file
        if f.name in _BOOLS:
            if value:
                argv.append(flag)
            continue
        argv += [flag, format(value, ".17g") if isinstance(value, float) else str(value)]
    return argv


# ---------------------------------------------------------------- serialization


def _json_value(x, indent, level):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(x, dict):
        if not x:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_json_value(v, indent, level + 1)}" for k, v in x.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(x, (list, tuple)):
        if not x:
            return "[]"
        return "[\n" + ",\n".join(pad + _json_value(v, indent, level + 1) for v in x) + "\n" + end + "]"
    if isinstance(x, bool) or x is None:
        return json.dumps(x)
    if isinstance(x, int):
        return str(x)
    if isinstance(x, float):
        if not math.isfinite(x):
            return "null"
        text = format(x, ".17g")
        return text if any(c in text for c in ".en") else text + ".0"
    return json.dumps(str(x))


def dumps_json(obj, indent: int = 2) -> str:
    """JSON text with every float written to 17 significant digits."""
    return _json_value(obj, indent, 0) + "\n"


def convergence_svg(lambdas, lam, width: int = 480, height: int = 320) -> str:
    """Polyline of log10(|lambda_n - lambda| / lambda) against n."""
    floor = -17.0
    ys = []
    for v in lambdas:
        rel = abs(v - lam) / lam if lam else 0.0
        ys.append(max(math.log10(rel), floor) if rel > 0 else floor)
    lo = math.floor(min(ys + [0.0]))
    hi = math.ceil(max(ys + [lo + 1.0]))
    n_max = max(len(ys) - 1, 1)
    left, right, top, bottom = 56, 16, 16, 40
    pw, ph = width - left - right, height - top - bottom

    def sx(n):
        return left + pw * n / n_max

    def sy(y):
        return top + ph * (hi - y) / (hi - lo)

    pts = " ".join(f"{sx(n):.2f},{sy(y):.2f}" for n, y in enumerate(ys))
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    step = max(1, (hi - lo) // 6)
    for e in range(lo, hi + 1, step):
        y = sy(e)
        out.append(f'<line x1="{left - 4}" y1="{y:.2f}" x2="{left}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 6}" y="{y + 4:.2f}" font-size="10" text-anchor="end">1e{e}</text>')
    for n in sorted({0, n_max // 2, n_max}):
        x = sx(n)
        out.append(f'<text x="{x:.2f}" y="{top + ph + 14}" font-size="10" text-anchor="middle">{n}</text>')
    out.append(f'<text x="{left + pw / 2:.2f}" y="{height - 6}" font-size="11" text-anchor="middle">n</text>')
    out.append(f'<text x="12" y="{top + ph / 2:.2f}" font-size="11" text-anchor="middle" '
               f'transform="rotate(-90 12 {top + ph / 2:.2f})">|lambda_n - lambda| / lambda</text>')
    out.append(f'<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{pts}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------- commands


@dataclass
class RunSummary:
    cfg: RunConfig
    exit_code: int
    lam: float | None = None
    iterations: int = 0
    converged: bool = False
    mu_hat: float | None = None
    error: str = ""


def run_command(cfg: RunConfig) -> RunSummary:
    """Seed, optionally compute mu_hat, iterate, and write all artifacts."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.debug_inner:
        cfg.path("inner_debug.csv").unlink(missing_ok=True)
    pair = make_pair(cfg.kind, cfg.M, cfg.p, cfg.q, s=cfg.s, R=cfg.R)
    w0 = seed(pair, cfg.seed_kind, cfg.rng_seed, cfg.seed_file)
    oracle = None
    if cfg.mu_hat:
        oracle = rayleigh_minimize_direct(pair, w0)
    result = run(pair, w0, cfg.engine_config(oracle.mu_hat if oracle else None))
    trace = result.trace

    cfg.path(cfg.trace_csv).write_text(trace.to_csv())
    write_field_csv(result.w, cfg.path(cfg.eigen_csv))
    cfg.path(cfg.plot_svg).write_text(convergence_svg(trace.lambdas, result.lam))
    record = {
        "kind": pair.kind,
        "N": pair.grid.N,
        "M": cfg.M,
        "p": cfg.p,
        "q": cfg.q,
        "s": cfg.s,
        "R": cfg.R,
        "lambda": result.lam,
        "converged": result.converged,
        "termination": trace.termination,
        "iterations": result.iterations,
        "residual": result.residual,
        "slack": trace.slack,
        "ledger": [{"n": e.n, "check": e.check, "magnitude": e.magnitude} for e in trace.ledger],
        "mu_hat": oracle.mu_hat if oracle else None,
        "mu_hat_optimality": oracle.optimality if oracle else None,
        "mu_hat_converged": oracle.converged if oracle else None,
        "files": {"trace": cfg.trace_csv, "eigenfunction": cfg.eigen_csv, "plot": cfg.plot_svg},
        "config": cfg.to_dict(),
    }
    cfg.path(cfg.result_json).write_text(dumps_json(record))
    return RunSummary(cfg, 0 if result.converged else 2, result.lam, result.iterations,
                      result.converged, oracle.mu_hat if oracle else None)


def _safe_run(cfg: RunConfig) -> RunSummary:
    try:
        return run_command(cfg)
    except (InvPowerError, ValueError, OSError) as exc:
        return RunSummary(cfg, 1, error=_one_line(exc))


def _one_line(exc) -> str:
    return f"{type(exc).__name__}: {exc}".replace("\n", " ")


def sweep(base: dict, deltas: list, out_dir: str | None = None, workers: int | None = None,
          env=None) -> tuple[int, list[RunSummary]]:
    """Run ``base`` updated by each delta in parallel; write summary.csv.

    Returns 0 if every run converged, 1 if every run failed, 2 otherwise.
    """
    if not deltas:
        raise UsageError("sweep needs at least one config override")
    env = os.environ if env is None else env
    root = Path(out_dir or base.get("out_dir") or env.get(OUT_DIR_ENV) or RunConfig.out_dir)
    jobs = []
    for k, delta in enumerate(deltas):
        if not isinstance(delta, dict):
            jobs.append(UsageError(f"sweep entry {k} is not a JSON object"))
            continue
        merged = dict(base)
        if "kind" in delta and "N" not in delta:
            merged.pop("N", None)
        merged.update(delta)
        merged["out_dir"] = str(root / f"run_{k:03d}")
        try:
            jobs.append(config_from_mapping(merged, env))
        except (InvPowerError, ValueError) as exc:
            jobs.append(exc)

    def work(job):
        if isinstance(job, Exception):
            return None
        return _safe_run(job)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        done = list(pool.map(work, jobs))
    summaries = []
    for job, res in zip(jobs, done):
        if res is None:
            cfg = None
            res = RunSummary(cfg, 1, error=_one_line(job))
        summaries.append(res)

    root.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(SUMMARY_COLUMNS)
    for delta, s in zip(deltas, summaries):
        src = s.cfg.to_dict() if s.cfg else {**base, **(delta if isinstance(delta, dict) else {})}
        wr.writerow([
            src.get("kind", ""), _cell(src.get("p")), _cell(src.get("q")), src.get("M", ""),
            _cell(s.lam), s.iterations, int(s.converged), _cell(s.mu_hat), s.exit_code, s.error,
        ])
    (root / "summary.csv").write_text(buf.getvalue())
    codes = [s.exit_code for s in summaries]
    if all(c == 1 for c in codes):
        return 1, summaries
    return (0 if all(c == 0 for c in codes) else 2), summaries


def _cell(x) -> str:
    if x is None:
        return ""
    return format(float(x), ".17g")


def main(argv=None) -> int:
    try:
        cfg, deltas = parse_args(argv)
        if deltas is not None:
            code, summaries = sweep(cfg, deltas)
            for s in summaries:
                if s.error:
                    print(f"invpower: {s.error}", file=sys.stderr)
            return code
        summary = run_command(cfg)
    except (InvPowerError, ValueError, OSError) as exc:
        print(f"invpower: error: {_one_line(exc)}", file=sys.stderr)
        return 1
    status = "converged" if summary.exit_code == 0 else "max-outer reached"
    print(f"lambda = {summary.lam:.17g} ({status}, {summary.iterations} steps)")
    return summary.exit_code


if __name__ == "__main__":
    sys.exit(main())
