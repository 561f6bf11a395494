"""Command-line entry point: ``sublinear-sparse <command> [options]``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import experiments as ex

# per-command defaults; a config file overrides these and flags override both
DEFAULTS = {
    "common": dict(alphabet="1", trials=100, seed=0, iters=30, damping="search",
                   switch_db=6.0, tune_trials=20, threads=1, out=None, estimators=None),
    "sweep-snr": dict(n=1024, k=8, snr_db="0:12:2", trials=1000),
    "sweep-delta": dict(n=4096, k=8, delta="0.25,0.5,1,1.5,2,2.5,3,4", snr_db="40"),
    "transfer": dict(n=4096, k=8, delta="2.5", snr_db="40", trials=5),
    "bounds": dict(n=256, k=4, snr_db="0:20:5"),
    "verify": dict(n=16, k=2, trials=1),
}
KIND = {"sweep-snr": "snr-sweep", "sweep-delta": "delta-sweep", "transfer": "transfer",
        "bounds": "bounds", "verify": "verify"}


def read_config(path: str) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment; dashes in keys become underscores."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sublinear-sparse", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in DEFAULTS:
        if name == "common":
            continue
        s = sub.add_parser(name)
        # every flag defaults to None so that unset flags fall through to the config file
        s.add_argument("--n", type=int)
        s.add_argument("--k", type=int)
        s.add_argument("--alphabet", help="comma-separated non-zero amplitudes")
        s.add_argument("--snr-db", dest="snr_db", help="1/sigma^2 in dB: list or start:stop:step")
        s.add_argument("--delta", help="measurement ratios: list or start:stop:step")
        s.add_argument("--trials", type=int)
        s.add_argument("--seed", type=int)
        s.add_argument("--estimators", help="comma list of estimators or AMP policies")
        s.add_argument("--iters", type=int)
        s.add_argument("--damping", help="damping factor in (0, 1] or 'search'")
        s.add_argument("--switch-db", dest="switch_db", type=float)
        s.add_argument("--tune-trials", dest="tune_trials", type=int)
        s.add_argument("--out", help="output CSV path (default stdout)")
        s.add_argument("--config", help="key=value file supplying defaults")
        s.add_argument("--threads", type=int)
        if name == "bounds":
            s.add_argument("--no-oracle", action="store_true",
                           help="skip the numerical reliability oracle column")
        if name == "verify":
            s.add_argument("--inject-fault", dest="inject_fault",
                           help="negative control, e.g. flip-kstar")
    return p


_TYPES = dict(n=int, k=int, trials=int, seed=int, iters=int, switch_db=float,
              tune_trials=int, threads=int)


def resolve(args: argparse.Namespace) -> dict:
    """Merge command defaults, the config file and explicit flags, in that order."""
    opts = dict(DEFAULTS["common"])
    opts.update(DEFAULTS[args.command])
    if args.config:
        for key, value in read_config(args.config).items():
            opts[key] = _TYPES.get(key, str)(value)
    for key, value in vars(args).items():
        if value is not None and key not in ("command", "config"):
            opts[key] = value
    return opts


def make_spec(command: str, o: dict) -> ex.SweepSpec:
    grid_key = "delta" if command in ("sweep-delta", "transfer") else "snr_db"
    grid = ex.parse_grid(str(o[grid_key])) if command != "verify" else ()
    snr = ex.parse_grid(str(o["snr_db"]))[0] if grid_key == "delta" else 40.0
    ests = tuple(e.strip() for e in o["estimators"].split(",")) if o.get("estimators") else ()
    return ex.SweepSpec(kind=KIND[command], N=int(o["n"]), k=int(o["k"]),
                        alphabet=str(o["alphabet"]), estimators=ests, grid=grid, snr_db=snr,
                        trials=int(o["trials"]), seed=int(o["seed"]),
                        iterations=int(o["iters"]), damping=str(o["damping"]),
                        switch_db=float(o["switch_db"]), tune_trials=int(o["tune_trials"]),
                        threads=int(o["threads"]), out=o.get("out"))


def _emit(text: str, out: Optional[str]) -> None:
    if out and out != "-":
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def run(command: str, o: dict) -> int:
    spec = make_spec(command, o)
    if command == "sweep-snr":
        _emit(ex.render_csv(spec, ex.MAIN_HEADER, ex.sweep_snr(spec)), spec.out)
    elif command == "sweep-delta":
        res = ex.sweep_delta(spec)
        notes = [f"damping delta={d!r} policy={p} theta={t!r}"
                 for (d, p), t in sorted(res.thetas.items())]
        _emit(ex.render_csv(spec, ex.MAIN_HEADER, res.rows, notes), spec.out)
    elif command == "transfer":
        _emit(ex.render_csv(spec, ex.TRANSFER_HEADER, ex.denoiser_transfer(spec)), spec.out)
    elif command == "bounds":
        rows = ex.bounds_report(spec, oracle=not o.get("no_oracle", False))
        _emit(ex.render_csv(spec, ex.BOUNDS_HEADER, rows), spec.out)
    else:
        results = ex.verify(seed=spec.seed, fault=o.get("inject_fault"))
        for r in results:
            status = "PASS" if r.passed else "FAIL"
            print(f"{status} {r.name}: {r.instances} instances (min {r.minimum}), "
                  f"{r.failures} failures. {r.detail}")
        return 0 if all(r.passed for r in results) else 1
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run(args.command, resolve(args))
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
