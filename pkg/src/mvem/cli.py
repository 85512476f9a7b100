"""Command-line entry point: ``mvem run | validate | list-presets``.

Config files are INI text (configparser) with four sections::

    [study]    id, description
    [model]    id = linear, lam, theta, sigma0, constants = example | none
    [constants] optional explicit alpha, beta, gamma, kappa, rho, c0, a, b
    [params]   keyword arguments of the study function
    [run]      seed, threads (0 = auto), output_dir

Values are typed from the study signature; lists are comma separated and
``none`` clears optional values. Unknown sections or keys are rejected.
The output root is ``--out``, else ``$MVEM_OUTPUT_ROOT``, else ``[run]
output_dir``, else ``./mvem-results``.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import inspect
import math
import os
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from . import experiments as ex
from .brownian import TimeGrid, ratio, steps_for
from .model import LINEAR_EXAMPLE_CONSTANTS, AssumptionConstants, LinearMeanFieldModel
from .scheme import BlowUpError, UnsupportedLawError, compute_thresholds

EXIT_OK, EXIT_FAIL, EXIT_ERROR = 0, 1, 2
OUTPUT_ENV = "MVEM_OUTPUT_ROOT"
DEFAULT_OUTPUT = "mvem-results"

STUDIES = {
    "strong_convergence": ex.study_strong_convergence,
    "chaos_vs_N": ex.study_chaos_vs_N,
    "error_vs_h": ex.study_error_vs_h,
    "invariant_measure": ex.study_invariant_measure,
    "contraction": ex.study_contraction,
    "moment_bound": ex.study_moment_bound,
    "density_evolution": ex.study_density_evolution,
}

PRESET_ORDER = ("figure1", "figure2", "figure3_left", "figure3_right", "figure4",
                "lemma31", "lemma32", "theorem24_rate")

# parameters whose default is None, with the type they take when set
OPTIONAL_TYPES = {"h_ref": float, "tau": float, "compare_times": "floats"}
RESERVED = ("model", "seed", "threads")
MODEL_KEYS = ("id", "lam", "theta", "sigma0", "constants")
CONSTANT_KEYS = tuple(f.name for f in dataclasses.fields(AssumptionConstants))
RUN_KEYS = ("seed", "threads", "output_dir")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    study: str
    description: str
    model: LinearMeanFieldModel
    params: dict
    seed: int = ex.DEFAULT_SEED
    threads: int = 1
    output_dir: str | None = None
    source: str = ""
    warnings: list = field(default_factory=list)


# --------------------------------------------------------------------------
# parsing


def _to_float(key, raw):
    try:
        v = float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    if not math.isfinite(v):
        raise ConfigError(f"{key}: expected a finite number, got {raw!r}")
    return v


def _to_int(key, raw):
    v = _to_float(key, raw)
    if v != int(v):
        raise ConfigError(f"{key}: expected an integer, got {raw!r}")
    return int(v)


def _to_list(key, raw, conv):
    items = [s.strip() for s in raw.split(",") if s.strip()]
    if not items:
        raise ConfigError(f"{key}: expected a comma-separated list")
    return tuple(conv(key, s) for s in items)


def _to_bool(key, raw):
    low = raw.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {raw!r}")


def _converter(name, default):
    if default is None:
        kind = OPTIONAL_TYPES.get(name, str)
        if kind == "floats":
            return lambda k, r: _to_list(k, r, _to_float)
        return _to_float if kind is float else (lambda k, r: r)
    if isinstance(default, bool):
        return _to_bool
    if isinstance(default, int):
        return _to_int
    if isinstance(default, float):
        return _to_float
    if isinstance(default, tuple):
        conv = _to_int if default and all(isinstance(v, int) for v in default) else _to_float
        return lambda k, r: _to_list(k, r, conv)
    return lambda k, r: r.strip()


def study_schema(study: str) -> dict:
    """Parameter name -> (default, converter) for a study function."""
    sig = inspect.signature(STUDIES[study])
    return {
        name: (p.default, _converter(name, p.default))
        for name, p in sig.parameters.items()
        if name not in RESERVED
    }


def _read_parser(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep N_set, M, T as written
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except configparser.Error as e:
        raise ConfigError(f"malformed config {path}: {e}") from None
    return cp


def _check_keys(section, got, allowed):
    for key in got:
        if key not in allowed:
            raise ConfigError(f"unknown key {section}.{key}")


def parse_config(path) -> RunConfig:
    cp = _read_parser(path)
    for sec in cp.sections():
        if sec not in ("study", "model", "constants", "params", "run"):
            raise ConfigError(f"unknown section [{sec}]")
    if not cp.has_section("study") or "id" not in cp["study"]:
        raise ConfigError("missing key study.id")
    _check_keys("study", cp["study"], ("id", "description"))
    study = cp["study"]["id"].strip()
    if study not in STUDIES:
        raise ConfigError(f"study.id: unknown study {study!r}; known: {', '.join(STUDIES)}")

    model = _parse_model(cp)
    schema = study_schema(study)
    params = {}
    if cp.has_section("params"):
        _check_keys("params", cp["params"], schema)
        for key, raw in cp["params"].items():
            if raw.strip().lower() == "none":
                if schema[key][0] is not None:
                    raise ConfigError(f"params.{key}: none is only allowed for optional values")
                params[key] = None
            else:
                params[key] = schema[key][1](f"params.{key}", raw)

    run = cp["run"] if cp.has_section("run") else {}
    _check_keys("run", run, RUN_KEYS)
    seed = _to_int("run.seed", run["seed"]) if "seed" in run else ex.DEFAULT_SEED
    threads = _to_int("run.threads", run["threads"]) if "threads" in run else 1
    if threads < 0:
        raise ConfigError("run.threads must be >= 0")
    return RunConfig(study, cp["study"].get("description", "").strip(), model, params, seed, threads,
                     run.get("output_dir"), str(path))


def _parse_model(cp) -> LinearMeanFieldModel:
    sec = cp["model"] if cp.has_section("model") else {}
    _check_keys("model", sec, MODEL_KEYS)
    mid = sec.get("id", "linear").strip()
    if mid != "linear":
        raise ConfigError(f"model.id: unknown model {mid!r}; custom models are registered in code")
    kwargs = {k: _to_float(f"model.{k}", sec[k]) for k in ("lam", "theta", "sigma0") if k in sec}
    choice = sec.get("constants", "example").strip().lower()
    if choice not in ("example", "none"):
        raise ConfigError(f"model.constants: expected 'example' or 'none', got {choice!r}")
    constants = LINEAR_EXAMPLE_CONSTANTS if choice == "example" else None
    if cp.has_section("constants"):
        _check_keys("constants", cp["constants"], CONSTANT_KEYS)
        base = dataclasses.asdict(constants or LINEAR_EXAMPLE_CONSTANTS)
        base.update({k: _to_float(f"constants.{k}", v) for k, v in cp["constants"].items()})
        try:
            constants = AssumptionConstants(**base)
        except ValueError as e:
            raise ConfigError(f"constants: {e}") from None
    try:
        return LinearMeanFieldModel(constants=constants, **kwargs)
    except ValueError as e:
        raise ConfigError(f"model: {e}") from None


# --------------------------------------------------------------------------
# physics checks


def _param(cfg: RunConfig, name):
    if name in cfg.params:
        return cfg.params[name]
    schema = study_schema(cfg.study)
    return schema[name][0] if name in schema else None


def physics_check(cfg: RunConfig) -> list:
    """Warnings for step sizes at or above h_sharp; ConfigError for hard errors."""
    hs = []
    for key in ("h", "h_uniq"):
        v = _param(cfg, key)
        if v is not None:
            hs.append((key, v))
    for key in ("h_set",):
        v = _param(cfg, key)
        if v is not None:
            hs.extend((key, h) for h in v)
    for key, h in hs:
        if not 0 < h < 1:
            raise ConfigError(f"params.{key}: step size {h} outside (0, 1)")

    h_set = _param(cfg, "h_set")
    if h_set is not None and cfg.study in ("strong_convergence", "error_vs_h"):
        if len(h_set) < 3:
            raise ConfigError("params.h_set: at least 3 step sizes are needed for a slope")
        h_ref = _param(cfg, "h_ref")
        h_ref = h_ref if h_ref is not None else ex._default_href(h_set)
        try:
            for h in h_set:
                ratio(h, h_ref)
            steps_for(_param(cfg, "T"), h_ref)
            TimeGrid(h_ref, 1)
        except ValueError as e:
            raise ConfigError(f"params.h_set/h_ref: {e}") from None
    for tkey in ("T", "T_long"):
        T = _param(cfg, tkey)
        if T is None:
            continue
        for key, h in hs:
            try:
                steps_for(T, h)
            except ValueError as e:
                raise ConfigError(f"params.{tkey}: {e}") from None

    warnings = []
    if cfg.model.constants is not None:
        th = compute_thresholds(cfg.model.constants)
        for key, h in hs:
            if h >= th.h_sharp:
                warnings.append(f"params.{key}={h} is not below h_sharp={th.h_sharp:.6g}")
    return warnings


# --------------------------------------------------------------------------
# presets


def preset_dir() -> Path:
    return Path(str(resources.files("mvem") / "presets"))


def preset_path(name: str) -> Path:
    return preset_dir() / f"{name}.cfg"


def list_presets() -> str:
    lines = []
    for name in PRESET_ORDER:
        cp = _read_parser(preset_path(name))
        lines.append(f"{name}: {cp['study'].get('description', '').strip()}")
    return "\n".join(lines)


def resolve(target: str) -> Path:
    p = Path(target)
    if p.exists() or p.suffix or os.sep in target:
        return p
    if target in PRESET_ORDER:
        return preset_path(target)
    return p


# --------------------------------------------------------------------------
# verbs


def _output_root(cfg: RunConfig, override=None) -> Path:
    return Path(override or os.environ.get(OUTPUT_ENV) or cfg.output_dir or DEFAULT_OUTPUT)


def format_verdicts(report: ex.StudyReport) -> str:
    rows = [f"{'verdict':<28} {'status':<13} value"]
    for v in report.verdicts:
        value = v.value
        if isinstance(value, float):
            value = f"{value:.6g}"
        rows.append(f"{v.name:<28} {v.status:<13} {value}")
        rows.append(f"{'':<28} {'':<13} ({v.criterion})")
    return "\n".join(rows)


def cmd_validate(target) -> int:
    try:
        cfg = parse_config(resolve(target))
        warnings = physics_check(cfg)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    for w in warnings:
        print(f"warning: {w}")
    if warnings:
        return EXIT_FAIL
    print(f"ok: {cfg.source} ({cfg.study})")
    return EXIT_OK


def cmd_run(target, out=None, seed=None, threads=None) -> int:
    try:
        cfg = parse_config(resolve(target))
        warnings = physics_check(cfg)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    for w in warnings:
        print(f"warning: {w}")
    if seed is not None:
        cfg.seed = seed
    if threads is not None:
        cfg.threads = threads
    try:
        report = STUDIES[cfg.study](cfg.model, seed=cfg.seed, threads=cfg.threads, **cfg.params)
    except BlowUpError as e:
        print(f"error: simulation blew up: {e}", file=sys.stderr)
        return EXIT_ERROR
    except (UnsupportedLawError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    try:
        run_dir = ex.write_outputs(report, _output_root(cfg, out), extra_notes=warnings)
    except OSError as e:
        print(f"error: cannot write outputs: {e}", file=sys.stderr)
        return EXIT_ERROR
    print(f"{cfg.study} (seed {cfg.seed}, {report.wall_clock:.1f} s, backend {report.backend})")
    print(format_verdicts(report))
    print(f"outputs: {run_dir}")
    return EXIT_OK if report.passed else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvem", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)
    run = sub.add_parser("run", help="run a study from a config file or preset id")
    run.add_argument("config", help="config path or preset id")
    run.add_argument("--out", help=f"output root (overrides ${OUTPUT_ENV})")
    run.add_argument("--seed", type=int, help="override run.seed")
    run.add_argument("--threads", type=int, help="override run.threads (0 = auto)")
    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("config", help="config path or preset id")
    sub.add_parser("list-presets", help="list built-in presets")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.verb == "list-presets":
        print(list_presets())
        return EXIT_OK
    if args.verb == "validate":
        return cmd_validate(args.config)
    return cmd_run(args.config, out=args.out, seed=args.seed, threads=args.threads)


if __name__ == "__main__":
    sys.exit(main())
