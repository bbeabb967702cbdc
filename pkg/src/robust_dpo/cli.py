"""Command-line entry point: ``robust-dpo <command> --config cfg.json --out dir``.

Exit status: 0 on success, 1 on a runtime failure (the failing stage is
named on stderr), 2 when the config cannot be read or fails its schema.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import jsonschema
import numpy as np

from .core import FeatureMap, PolicyParams, PreferenceDataset, substream
from .experiments import (NamedMethod, RateStudySpec, ShiftStudySpec, distributed_kernel_sim,
                          rate_environment, rate_experiment, shift_environment, shift_sweep)
from .policy import PolicyPair
from .prefgen import MixtureSpec, mixture_reward, realizable_reward, sample_dataset
from .robust import RobustSpec
from .train import TrainConfig, train

log = logging.getLogger("robust_dpo")

SCHEMA_VERSION = 1


class Command(str, Enum):
    GEN_DATA = "gen-data"
    TRAIN = "train"
    EVAL_SHIFT = "eval-shift"
    RATE_EXP = "rate-exp"
    DIST_SIM = "dist-sim"
    VERIFY = "verify"


@dataclass(frozen=True)
class RunManifest:
    command: Command
    config_path: Path
    out_dir: Path
    log_level: str = "WARNING"


class ConfigError(Exception):
    """The config file is unreadable or does not match its schema."""


class StageError(Exception):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage


# -- schemas ----------------------------------------------------------------

_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_COUNT = {"type": "integer", "minimum": 1}
_SEED = {"type": "integer", "minimum": 0}

ROBUST_SCHEMA = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["wasserstein_approx", "kl_approx", "kl_exact", "wasserstein_exact"]},
        "rho_o": _NONNEG, "tau": _POS, "rho": _NONNEG, "p": {"const": 2},
        "lambda_lo": _POS, "lambda_hi": _POS, "tol": _POS,
    },
    "additionalProperties": False,
}

TRAIN_SCHEMA = {
    "type": "object",
    "properties": {
        "method": {"enum": ["dpo", "wdpo", "kldpo"]},
        "lr": _NONNEG, "epochs": _COUNT,
        "batch": {"oneOf": [{"const": "full"}, _COUNT]},
        "seed": _SEED, "stop_tol": _NONNEG, "beta": _POS, "B": _POS,
        "lr_mode": {"enum": ["absolute", "smoothness"]},
        "robust": ROBUST_SCHEMA,
    },
    "required": ["method"],
    "additionalProperties": False,
}

ENV_SCHEMA = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["rate", "shift"]},
        "seed": _SEED, "dim": _COUNT, "num_states": _COUNT, "num_actions": {"type": "integer", "minimum": 2},
        "beta": _POS, "B": _POS, "theta_norm": _POS, "scale": _POS,
        "correlation": {"type": "number", "minimum": -1, "maximum": 1},
    },
    "required": ["kind", "seed"],
    "additionalProperties": False,
}

METHOD_SCHEMA = {
    "type": "object",
    "properties": {"name": {"type": "string", "minLength": 1}, "robust": {"type": "boolean"}, "train": TRAIN_SCHEMA},
    "required": ["name", "train"],
    "additionalProperties": False,
}

_ALPHA = {"type": "number", "minimum": 0, "maximum": 1}


def _schema(props: dict, required: list) -> dict:
    props = {"schema_version": {"const": SCHEMA_VERSION}, **props}
    return {"type": "object", "properties": props, "required": ["schema_version", *required], "additionalProperties": False}


SCHEMAS = {
    Command.GEN_DATA: _schema({
        "environment": ENV_SCHEMA, "n": _COUNT, "seed": _SEED,
        "mixture": {"type": "object", "properties": {"mode": {"enum": ["convex", "geometric"]}, "alpha": _ALPHA},
                    "required": ["mode", "alpha"], "additionalProperties": False},
    }, ["environment", "n", "seed"]),
    Command.TRAIN: _schema({
        "features": {"type": "string"}, "dataset": {"type": "string"},
        "init": {"type": "string"}, "reference": {"type": "string"}, "train": TRAIN_SCHEMA,
    }, ["features", "dataset", "train"]),
    Command.EVAL_SHIFT: _schema({
        "environment": ENV_SCHEMA, "n": _COUNT, "alpha_train": _ALPHA,
        "alpha_grid": {"type": "array", "items": _ALPHA, "minItems": 1},
        "modes": {"type": "array", "items": {"enum": ["convex", "geometric"]}, "minItems": 1},
        "seeds": {"type": "array", "items": _SEED, "minItems": 1},
        "methods": {"type": "array", "items": METHOD_SCHEMA, "minItems": 1},
    }, ["environment", "n", "alpha_train", "alpha_grid", "modes", "seeds", "methods"]),
    Command.RATE_EXP: _schema({
        "environment": ENV_SCHEMA, "seed": _SEED,
        "n_grid": {"type": "array", "items": _COUNT, "minItems": 1},
        "repetitions": {"type": "integer", "minimum": 3}, "reference_n": _COUNT,
        "methods": {"type": "array", "items": METHOD_SCHEMA, "minItems": 1},
    }, ["environment", "seed", "n_grid", "repetitions", "reference_n", "methods"]),
    Command.DIST_SIM: _schema({
        "environment": ENV_SCHEMA, "n": _COUNT, "seed": _SEED, "tau": _POS,
        "workers": _COUNT, "microbatch": _COUNT, "theta_norm": _NONNEG,
    }, ["environment", "n", "seed", "tau", "workers", "microbatch"]),
    Command.VERIFY: _schema({
        "seed": _SEED, "checks": {"type": "array", "items": {"type": "string"}},
    }, ["seed"]),
}


def load_config(command: Command, path: Path) -> dict:
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc
    validator = jsonschema.Draft202012Validator(SCHEMAS[command])
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"{path}: {e.json_path}: {e.message}" for e in errors]
        raise ConfigError("\n".join(lines))
    return doc


# -- builders ---------------------------------------------------------------

def build_environment(cfg: dict):
    kw = {k: v for k, v in cfg.items() if k not in ("kind", "seed")}
    if cfg["kind"] == "rate":
        kw.pop("scale", None), kw.pop("correlation", None)
        env, theta_true = rate_environment(cfg["seed"], **kw)
        return env, {"theta_true": theta_true}
    kw.pop("theta_norm", None)
    env, r1, r2 = shift_environment(cfg["seed"], **kw)
    return env, {"r1": r1, "r2": r2}


def build_train_config(cfg: dict) -> TrainConfig:
    cfg = dict(cfg)
    robust = cfg.pop("robust", None)
    if robust is None:
        kind = {"wdpo": "wasserstein_approx", "kldpo": "kl_approx"}.get(cfg["method"], "kl_approx")
        robust = {"kind": kind}
    return TrainConfig(robust=RobustSpec(**robust), **cfg)


def build_methods(items: list) -> tuple:
    return tuple(NamedMethod(m["name"], build_train_config(m["train"]), m.get("robust", m["train"]["method"] != "dpo"))
                 for m in items)


# -- output -----------------------------------------------------------------

def versioned_path(out_dir: Path, name: str) -> Path:
    """out_dir/name, or name.1.ext, name.2.ext, ... if taken; never overwrites."""
    path = out_dir / name
    stem, dot, ext = name.partition(".")
    k = 0
    while path.exists():
        k += 1
        path = out_dir / (f"{stem}.{k}.{ext}" if dot else f"{stem}.{k}")
    return path


def write_outputs(out_dir: Path, files: dict[str, str]) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, content in files.items():
        path = versioned_path(out_dir, name)
        with open(path, "x", newline="") as f:
            f.write(content)
        written.append(path)
    return written


# -- commands ---------------------------------------------------------------

def _stage(name: str, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except Exception as exc:
        raise StageError(name, exc) from exc


def cmd_gen_data(cfg: dict, base: Path) -> dict[str, str]:
    env, extra = _stage("environment", build_environment, cfg["environment"])
    if cfg["environment"]["kind"] == "rate":
        reward = realizable_reward(extra["theta_true"], env.reference, env.beta, env.fm)
        alpha, desc = None, "realizable"
    else:
        mix = cfg.get("mixture", {"mode": "convex", "alpha": 0.1})
        reward = _stage("mixture", mixture_reward, extra["r1"], extra["r2"], MixtureSpec(mix["mode"], mix["alpha"]))
        alpha, desc = mix["alpha"], f"{mix['mode']}-mixture"
    ds = _stage("sampling", sample_dataset, env.fm, env.sampling(cfg["n"], cfg["seed"]), reward, alpha, desc)
    files = {"dataset.txt": ds.dumps(), "features.json": env.fm.to_json(), "reward.json": reward.to_json()}
    if "theta_true" in extra:
        files["theta_true.json"] = extra["theta_true"].to_json()
    return files


def cmd_train(cfg: dict, base: Path) -> dict[str, str]:
    def read(key):
        return (base / cfg[key]).read_text()

    fm = _stage("load features", lambda: FeatureMap.from_json(read("features")))
    ds = _stage("load dataset", lambda: PreferenceDataset.loads(read("dataset")))
    tc = _stage("config", build_train_config, cfg["train"])
    init = _stage("load init", lambda: PolicyParams.from_json(read("init"))) if "init" in cfg else PolicyParams.zeros(fm.dim, tc.B)
    ref = _stage("load reference", lambda: PolicyParams.from_json(read("reference"))) if "reference" in cfg else PolicyParams.zeros(fm.dim, tc.B)
    pp = _stage("policy", lambda: PolicyPair(PolicyParams(init.theta, max(init.bound, float(np.linalg.norm(init.theta)))),
                                             ref, tc.beta))
    report = _stage("training", train, tc, pp, fm, ds)
    return {"params.json": report.final_params.to_json(), "train_report.json": report.to_json(),
            "train_trace.csv": report.to_csv()}


def cmd_eval_shift(cfg: dict, base: Path) -> dict[str, str]:
    env, extra = _stage("environment", build_environment, cfg["environment"])
    if "r1" not in extra:
        raise StageError("environment", ValueError("eval-shift needs a 'shift' environment"))
    methods = _stage("config", build_methods, cfg["methods"])
    files = {}
    for mode in cfg["modes"]:
        spec = ShiftStudySpec(cfg["alpha_train"], tuple(cfg["alpha_grid"]), mode, methods, tuple(cfg["seeds"]),
                              env, extra["r1"], extra["r2"], cfg["n"])
        rep = _stage(f"shift sweep ({mode})", shift_sweep, spec)
        files[f"shift_{mode}.csv"] = rep.to_csv()
        files[f"shift_{mode}.json"] = rep.to_json()
    return files


def cmd_rate_exp(cfg: dict, base: Path) -> dict[str, str]:
    env, extra = _stage("environment", build_environment, cfg["environment"])
    if "theta_true" not in extra:
        raise StageError("environment", ValueError("rate-exp needs a 'rate' environment"))
    methods = _stage("config", build_methods, cfg["methods"])
    spec = _stage("config", RateStudySpec, tuple(cfg["n_grid"]), cfg["repetitions"], extra["theta_true"], env,
                  methods, cfg["reference_n"], cfg["seed"])
    rep = _stage("rate experiment", rate_experiment, spec)
    return {"rate.csv": rep.to_csv(), "rate.json": rep.to_json()}


def cmd_dist_sim(cfg: dict, base: Path) -> dict[str, str]:
    env, extra = _stage("environment", build_environment, cfg["environment"])
    reward = extra.get("theta_true")
    if reward is not None:
        reward = realizable_reward(reward, env.reference, env.beta, env.fm)
    else:
        reward = mixture_reward(extra["r1"], extra["r2"], MixtureSpec("convex", 0.5))
    ds = _stage("sampling", sample_dataset, env.fm, env.sampling(cfg["n"], cfg["seed"]), reward)
    rng = substream(cfg["seed"], "dist-sim/theta")
    direction = rng.standard_normal(env.fm.dim)
    B = cfg["environment"].get("B", 3.0)
    theta = direction / np.linalg.norm(direction) * min(cfg.get("theta_norm", 1.0), B)
    pp = PolicyPair(PolicyParams(theta, B), env.reference, env.beta)
    rep = _stage("kernel simulation", distributed_kernel_sim, ds, cfg["tau"], cfg["workers"], cfg["microbatch"], pp, env.fm)
    return {"dist_sim.csv": rep.to_csv(), "dist_sim.json": rep.to_json()}


def cmd_verify(cfg: dict, base: Path) -> dict[str, str]:
    from .verify import run_checks
    report = _stage("verify", run_checks, cfg["seed"], cfg.get("checks"))
    if not report["passed"]:
        failed = [c["id"] for c in report["checks"] if not c["passed"]] + report["missing"]
        # the report is still written so the failing checks can be inspected
        raise VerifyFailed(json.dumps(report, indent=1) + "\n", failed)
    return {"verify.json": json.dumps(report, indent=1) + "\n"}


class VerifyFailed(Exception):
    def __init__(self, report: str, failed: list):
        super().__init__(f"checks failed: {', '.join(failed)}")
        self.report = report


HANDLERS = {
    Command.GEN_DATA: cmd_gen_data, Command.TRAIN: cmd_train, Command.EVAL_SHIFT: cmd_eval_shift,
    Command.RATE_EXP: cmd_rate_exp, Command.DIST_SIM: cmd_dist_sim, Command.VERIFY: cmd_verify,
}


def execute(manifest: RunManifest) -> int:
    logging.basicConfig(level=getattr(logging, manifest.log_level.upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(manifest.command, manifest.config_path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        files = HANDLERS[manifest.command](cfg, manifest.config_path.parent)
    except VerifyFailed as exc:
        write_outputs(manifest.out_dir, {"verify.json": exc.report})
        print(f"error: stage 'verify' failed: {exc}", file=sys.stderr)
        return 1
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: stage '{manifest.command.value}' failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    for path in write_outputs(manifest.out_dir, files):
        log.info("wrote %s", path)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="robust-dpo", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=[c.value for c in Command])
    parser.add_argument("--config", required=True, type=Path)
    parser.add_argument("--out", required=True, type=Path)
    parser.add_argument("--log", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR", "debug", "info", "warning", "error"])
    args = parser.parse_args(argv)
    return execute(RunManifest(Command(args.command), args.config, args.out, args.log))


if __name__ == "__main__":
    sys.exit(main())
