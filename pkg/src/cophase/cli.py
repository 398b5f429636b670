"""Command-line front end.

Subcommands: ``sweep``, ``trial``, ``spectrum``, ``noise-bound``, ``antenna``.
Options may also come from a flat ``key = value`` file passed with
``--config``; keys carry the subcommand as prefix (``sweep.trials = 200``)
and command-line flags override them.
"""
from __future__ import annotations

import argparse
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import cplx1, experiments, linear
from .antenna import AntennaConfig, build_scenario, run_antenna_scenario
from .model import CoherenceLayout, ForwardOperator, NoiseSpec, add_noise, observe_partial


class ConfigError(ValueError):
    pass


def parse_ratios(text: str) -> list[float]:
    """``start:step:stop`` (inclusive) or a comma-separated list."""
    text = text.strip()
    if ":" in text:
        try:
            start, step, stop = (float(t) for t in text.split(":"))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad ratio range {text!r}; use start:step:stop") from None
        if step <= 0 or stop < start:
            raise argparse.ArgumentTypeError(f"empty ratio range {text!r}")
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 12) for i in range(count)]
    return parse_floats(text)


def parse_floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def parse_names(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def read_config(path: str) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (t.strip() for t in line.split("=", 1))
            out[key] = value
    return out


# (dest, flag, type, required, default, help)
_COMMON = [
    ("seed", "--seed", int, False, 0, "master seed"),
    ("out", "--out", str, False, None, "output CSV path (default: stdout)"),
    ("threads", "--threads", int, False, None, "worker processes (env COPHASE_THREADS)"),
]

COMMANDS = {
    "sweep": [
        ("N", "--N", int, True, None, "number of unknowns"),
        ("C", "--C", int, True, None, "coherent observations per group"),
        ("noise", "--noise", float, True, None, "noise-to-signal ratio"),
        ("ratios", "--ratios", parse_ratios, True, None, "CM/N values, start:step:stop or list"),
        ("trials", "--trials", int, True, None, "trials per point"),
        ("solver", "--solver", parse_names, False, ["svd-r"], "comma-separated solvers"),
    ],
    "trial": [
        ("N", "--N", int, True, None, "number of unknowns"),
        ("M", "--M", int, True, None, "number of coherent groups"),
        ("C", "--C", int, True, None, "coherent observations per group"),
        ("noise", "--noise", float, False, 0.0, "noise-to-signal ratio"),
        ("solver", "--solver", parse_names, False, ["svd-r"], "comma-separated solvers"),
    ],
    "spectrum": [
        ("from_file", "--from-file", str, False, None, "CPLX1 operator file"),
        ("obs_file", "--obs-file", str, False, None, "CPLX1 complex observation vector"),
        ("kind", "--kind", str, False, "R", "Q or R"),
        ("N", "--N", int, False, None, "unknowns (random operator)"),
        ("M", "--M", int, False, None, "groups (random operator)"),
        ("C", "--C", int, False, 2, "coherent observations per group"),
        ("noise", "--noise", float, False, 0.0, "noise-to-signal ratio"),
    ],
    "noise-bound": [
        ("N", "--N", int, False, 40, "number of unknowns"),
        ("CM", "--CM", int, False, 100, "total observations"),
        ("C", "--C", int, False, 2, "coherent observations per group"),
        ("noises", "--noises", parse_floats, False, [1e-4, 1e-3, 1e-2], "noise levels"),
        ("trials", "--trials", int, False, 1000, "trials per noise level"),
        ("pin", "--pin", int, False, 0, "pinned phase entry (0-based)"),
    ],
    "antenna": [
        ("N", "--N", int, False, AntennaConfig.N, "equivalent dipoles (even)"),
        ("C", "--C", int, False, AntennaConfig.C, "probe elements: 3 (L-shape) or 2 (diagonal)"),
        ("ratio", "--ratio", float, False, AntennaConfig.ratio, "CM/N"),
        ("noise", "--noise", float, False, AntennaConfig.noise, "noise-to-signal ratio"),
        ("trials", "--trials", int, False, AntennaConfig.trials, "random excitations"),
        ("solver", "--solver", parse_names, False, list(AntennaConfig.solvers), "solvers"),
        ("source_diameter", "--source-diameter", float, False, AntennaConfig.source_diameter,
         "source sphere diameter (wavelengths)"),
        ("measurement_diameter", "--measurement-diameter", float, False,
         AntennaConfig.measurement_diameter, "measurement sphere diameter (wavelengths)"),
        ("spacing", "--spacing", float, False, AntennaConfig.spacing, "probe element spacing"),
        ("export_operator", "--export-operator", str, False, None, "write the operator as CPLX1"),
    ],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cophase", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="key = value file with <command>.<option> keys")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        for dest, flag, typ, required, default, help_ in opts + _COMMON:
            suffix = " (required)" if required else ""
            p.add_argument(flag, dest=dest, type=typ, default=None, help=help_ + suffix)
        if name in ("sweep", "trial", "antenna"):
            p.add_argument("--timing", action="store_true", help="fill the seconds column")
    return parser


def _spec_for(command):
    return {dest: (flag, typ, required, default)
            for dest, flag, typ, required, default, _ in COMMANDS[command] + _COMMON}


def resolve_options(command: str, args: argparse.Namespace, config: dict[str, str]) -> dict:
    """Merge defaults, config-file values and flags; reject unknown keys."""
    spec = _spec_for(command)
    for key in config:
        section, _, opt = key.partition(".")
        if section not in COMMANDS or not opt:
            raise ConfigError(f"unknown config key {key!r}")
        dest = opt.replace("-", "_")
        if dest not in _spec_for(section):
            raise ConfigError(f"unknown config key {key!r}")
    opts = {}
    for dest, (flag, typ, required, default) in spec.items():
        value = getattr(args, dest)
        if value is None:
            key = f"{command}.{dest}"
            alt = f"{command}.{flag.lstrip('-')}"
            raw = config.get(key, config.get(alt))
            if raw is not None:
                try:
                    value = typ(raw)
                except (ValueError, argparse.ArgumentTypeError) as exc:
                    raise ConfigError(f"config key {key!r}: {exc}") from None
        if value is None:
            value = default
        opts[dest] = value
    missing = [spec[d][0] for d in spec if spec[d][2] and opts[d] is None]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join(missing))
    if opts["threads"] is None:
        opts["threads"] = int(os.environ.get("COPHASE_THREADS", "1"))
    opts["timing"] = getattr(args, "timing", False)
    return opts


def _validate_paths(opts):
    out = opts.get("out")
    if out is not None:
        parent = Path(out).resolve().parent
        if not parent.is_dir():
            raise ConfigError(f"output directory does not exist: {parent}")
    for key in ("from_file", "obs_file"):
        path = opts.get(key)
        if path is not None and not Path(path).is_file():
            raise ConfigError(f"--{key.replace('_', '-')}: no such file {path}")
    exp = opts.get("export_operator")
    if exp is not None and not Path(exp).resolve().parent.is_dir():
        raise ConfigError(f"--export-operator: directory does not exist for {exp}")
    if "solver" in opts:
        experiments.check_solvers(opts["solver"])


def _emit(text: str, out: str | None):
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8", newline="") as f:
            f.write(text)


def _report_failures(records) -> int:
    failed = [r for r in records if r.error]
    for r in failed:
        print(f"trial failed: solver={r.solver} M={r.M} seed={r.seed}: {r.error}", file=sys.stderr)
    return 1 if failed else 0


def cmd_sweep(o) -> int:
    grid = experiments.ExperimentGrid.from_ratios(
        o["N"], o["C"], o["ratios"], n=o["noise"], trials=o["trials"], seed=o["seed"],
        solvers=tuple(o["solver"]))
    records = experiments.run_grid(grid, o["threads"])
    rows = experiments.sweep_rows(grid, records)
    _emit(experiments.sweep_csv(rows), o["out"])
    return _report_failures(records)


def cmd_trial(o) -> int:
    point = experiments.GridPoint(o["N"], o["M"], o["C"], o["noise"])
    op, xi, b = experiments.draw_instance(point, o["seed"])
    records = [experiments._solve_one(s, op, xi, b, point, o["seed"]) for s in o["solver"]]
    _emit(experiments.trials_csv(records, o["timing"]), o["out"])
    return _report_failures(records)


def cmd_spectrum(o) -> int:
    C = o["C"]
    rng = np.random.default_rng(o["seed"])
    if o["from_file"]:
        A = cplx1.read(o["from_file"])
        if A.shape[0] % C:
            raise ConfigError(f"operator has {A.shape[0]} rows, not a multiple of C={C}")
        op = ForwardOperator(A, CoherenceLayout(A.shape[0] // C, C))
        if o["obs_file"]:
            b = cplx1.read(o["obs_file"]).ravel()
        else:
            b = op.entries @ experiments.complex_gaussian(rng, op.N)
            b = add_noise(b, NoiseSpec(o["noise"], int(rng.integers(2 ** 63))))
    else:
        if o["N"] is None or o["M"] is None:
            raise ConfigError("spectrum needs --from-file or both --N and --M")
        point = experiments.GridPoint(o["N"], o["M"], C, o["noise"])
        op, _, b = experiments.draw_instance(point, o["seed"])
    obs = observe_partial(op.layout, b)
    kind = o["kind"].upper()
    if kind not in ("Q", "R"):
        raise ConfigError(f"--kind must be Q or R, got {o['kind']!r}")
    system = linear.build_Q(op, obs) if kind == "Q" else linear.build_R(op, obs)
    _emit(experiments.spectrum_csv(experiments.spectrum_dump(system)), o["out"])
    return 0


def cmd_noise_bound(o) -> int:
    rows = experiments.noise_bound_study(o["N"], o["CM"], o["C"], o["noises"], o["trials"],
                                         seed=o["seed"], pin_index=o["pin"], threads=o["threads"])
    _emit(experiments.noise_bound_csv(rows), o["out"])
    for n in o["noises"]:
        sub = [r for r in rows if r.n == n]
        frac = sum(r.satisfied for r in sub) / len(sub)
        fail = sum(r.failed for r in sub) / len(sub)
        print(f"n={n:g}: bound satisfied {frac:.3f}, failure regime {fail:.3f}", file=sys.stderr)
    return 0


def cmd_antenna(o) -> int:
    cfg = AntennaConfig(N=o["N"], C=o["C"], ratio=o["ratio"], noise=o["noise"],
                        trials=o["trials"], solvers=tuple(o["solver"]),
                        source_diameter=o["source_diameter"],
                        measurement_diameter=o["measurement_diameter"], spacing=o["spacing"],
                        seed=o["seed"])
    if o["export_operator"]:
        cplx1.write(o["export_operator"], build_scenario(cfg).entries)
    records = run_antenna_scenario(cfg, threads=o["threads"])
    _emit(experiments.trials_csv(records, o["timing"]), o["out"])
    return _report_failures(records)


HANDLERS = {
    "sweep": cmd_sweep,
    "trial": cmd_trial,
    "spectrum": cmd_spectrum,
    "noise-bound": cmd_noise_bound,
    "antenna": cmd_antenna,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = read_config(args.config) if args.config else {}
        opts = resolve_options(args.command, args, config)
        _validate_paths(opts)
    except (ConfigError, ValueError, OSError) as exc:
        parser.error(str(exc))
    try:
        return HANDLERS[args.command](opts)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"cophase: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
