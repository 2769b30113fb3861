"""Command-line harness: ``profile``, ``select``, ``train``, ``theory`` and ``bench``.

Configs are flat ``key = value`` files with dotted namespaces (``train.lr``);
``--set key=value`` overrides win over the file.  Exit codes: 0 success
(recorded run failures included), 1 failed ``--check``, 2 config error,
3 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import os
import subprocess
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import problems as P
from .metrics import write_profile
from .model import AdapterConfig, PINN, TrunkConfig, save_checkpoint
from .regime import SelectorConfig, profile, select
from .serialize import dumps, read_json, sha256, write_csv, write_json
from .theorysim import TailModel, mc_uk
from .trainer import TrainConfig, train, write_train_log

OUT_ENV = "CONFLICTLAB_OUT"
COMMANDS = ("profile", "select", "train", "theory", "bench")

# method tag -> (balance strategy, adapters on, mixing mode)
METHODS = {
    "vanilla": ("fixed", False, "uam"),
    "famo": ("famo", False, "uam"),
    "famo_log": ("famo_log", False, "uam"),
    "gradnorm": ("gradnorm", False, "uam"),
    "uncertainty": ("uncertainty", False, "uam"),
    "pcgrad": ("pcgrad", False, "uam"),
    "pcgrad_grouped": ("pcgrad_grouped", False, "uam"),
    "uam": ("fixed", True, "uam"),
    "famo_uam": ("famo", True, "uam"),
    "famo_cam": ("famo", True, "cam"),
    "famo_lcam": ("famo", True, "lcam"),
}


class ConfigError(ValueError):
    pass


def _schema() -> dict:
    """Every accepted key with its type and default."""
    s = {"seed": (int, 0), "problem.name": (str, "poisson1d"), "method": (str, "famo")}
    trunk = TrunkConfig()
    for f in ("hidden_dim", "depth", "fourier_bands", "omega_max"):
        s[f"model.{f}"] = (type(getattr(trunk, f)), getattr(trunk, f))
    s["model.rank"] = (int, 16)
    s["model.alpha_ad"] = (float, 1.0)
    for f in dataclasses.fields(TrainConfig):
        if f.name in ("seed", "balance", "mixing"):
            continue
        s[f"train.{f.name}"] = (type(f.default), f.default)
    s["profile.steps"] = (int, 1000)
    for f in dataclasses.fields(SelectorConfig):
        s[f"select.{f.name}"] = (float, f.default)
    s.update({
        "theory.tail": (str, "pareto"), "theory.alpha": (float, 2.0), "theory.t0": (float, 1.0),
        "theory.nu": (float, 1.0), "theory.d": (int, 3), "theory.K": (str, "2,4,8,16,32,64"),
        "theory.trials": (int, 100_000), "theory.workers": (int, 1),
        "bench.methods": (str, "vanilla,famo,famo_uam"), "bench.seeds": (str, "0"),
        "bench.workers": (int, 1),
    })
    return s


def _coerce(key, typ, raw):
    try:
        if typ is bool:
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {typ.__name__}, got {raw!r}") from None


def _parse_lines(lines, source):
    out = {}
    for i, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{i}: expected 'key = value'")
        k, v = (p.strip() for p in line.split("=", 1))
        out[k] = v
    return out


def parse_config(path=None, overrides=(), seed=None) -> dict:
    """Resolve defaults, file values and overrides into one validated flat dict."""
    schema = _schema()
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {path} not found")
        raw.update(_parse_lines(p.read_text().splitlines(), path))
    raw.update(_parse_lines(overrides, "--set"))
    if seed is not None:
        raw["seed"] = str(seed)

    cfg = {k: d for k, (_, d) in schema.items()}
    name = raw.get("problem.name", cfg["problem.name"])
    if name not in P.REGISTRY:
        raise ConfigError(f"unknown problem {name!r}; registered: {sorted(P.REGISTRY)}")
    prob_defaults = P.REGISTRY[name]().params
    for k, v in raw.items():
        if k in schema:
            cfg[k] = _coerce(k, schema[k][0], v)
        elif k.startswith("problem.") and k[len("problem."):] in prob_defaults:
            d = prob_defaults[k[len("problem."):]]
            cfg[k] = _coerce(k, type(d), v)
        else:
            raise ConfigError(f"unknown config key {k!r}")
    if cfg["method"] not in METHODS:
        raise ConfigError(f"unknown method {cfg['method']!r}; choose from {sorted(METHODS)}")
    for m in _list(cfg["bench.methods"], str):
        if m not in METHODS:
            raise ConfigError(f"bench.methods: unknown method {m!r}")
    if not 1 <= cfg["model.rank"] <= cfg["model.hidden_dim"]:
        raise ConfigError("model.rank must lie in [1, model.hidden_dim]")
    if cfg["theory.tail"] not in ("pareto", "exponential"):
        raise ConfigError("theory.tail must be 'pareto' or 'exponential'")
    try:
        build_problem(cfg)
        train_config(cfg, cfg["method"])
        trunk_config(cfg, build_problem(cfg))
        _list(cfg["theory.K"], int)
        _list(cfg["bench.seeds"], int)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def _list(text, typ):
    try:
        return [typ(v.strip()) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad list {text!r}") from None


def build_problem(cfg) -> P.PDEProblem:
    params = {k[len("problem."):]: v for k, v in cfg.items()
              if k.startswith("problem.") and k != "problem.name"}
    return P.make_problem(cfg["problem.name"], **params)


def trunk_config(cfg, problem) -> TrunkConfig:
    return TrunkConfig(input_dim=problem.input_dim, output_dim=problem.output_dim,
                       hidden_dim=cfg["model.hidden_dim"], depth=cfg["model.depth"],
                       fourier_bands=cfg["model.fourier_bands"], omega_max=cfg["model.omega_max"])


def train_config(cfg, method, seed=None) -> TrainConfig:
    balance, _, mixing = METHODS[method]
    kw = {k[len("train."):]: v for k, v in cfg.items() if k.startswith("train.")}
    return TrainConfig(**kw, seed=cfg["seed"] if seed is None else seed, balance=balance, mixing=mixing)


def build_model(cfg, problem, method, seed) -> PINN:
    _, with_adapters, mixing = METHODS[method]
    adapters = AdapterConfig(n_adapters=problem.K if with_adapters else 0, rank=cfg["model.rank"],
                             alpha_ad=cfg["model.alpha_ad"], mixing=mixing)
    physical = {problem.physical.name: problem.physical.init} if problem.physical else None
    return PINN(trunk_config(cfg, problem), adapters, seed=seed, physical=physical)


def config_hash(cfg) -> str:
    return hashlib.sha256(dumps(cfg).encode()).hexdigest()


def git_commit() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(out: Path, cfg, command, extra=None) -> dict:
    files = sorted(str(p.relative_to(out)) for p in out.rglob("*")
                   if p.is_file() and p.name != "manifest.json")
    manifest = {"command": command, "seed": cfg["seed"], "git_commit": git_commit(),
                "config_hash": config_hash(cfg), "config": cfg,
                "files": {f: sha256(out / f) for f in files}, **(extra or {})}
    write_json(out / "manifest.json", manifest)
    return manifest


def check_manifest(out: Path) -> list[str]:
    """Names of listed files that are missing or whose hash changed."""
    manifest = read_json(out / "manifest.json")
    bad = []
    for name, digest in manifest["files"].items():
        p = out / name
        if not p.exists() or sha256(p) != digest:
            bad.append(name)
    return bad


# -- commands --------------------------------------------------------------------

def run_profile(cfg, out: Path) -> dict:
    problem = build_problem(cfg)
    prof = profile(problem, trunk_config(cfg, problem), cfg["profile.steps"], cfg["seed"],
                   train_config(cfg, "vanilla"))
    if prof.records:
        write_profile(prof, out / "profile.csv", out / "profile.json")
    else:
        write_json(out / "profile.json", prof.summary())
    return {"profile": prof}


def _selector(cfg) -> SelectorConfig:
    return SelectorConfig(**{f.name: cfg[f"select.{f.name}"] for f in dataclasses.fields(SelectorConfig)})


def run_select(cfg, out: Path) -> dict:
    problem = build_problem(cfg)
    has_phys = problem.physical is not None
    prof = None
    if not (has_phys and problem.K in (3, 4)):
        prof = run_profile(cfg, out)["profile"]
    decision = select(prof, has_phys, problem.K, _selector(cfg))
    record = decision.to_dict()
    write_json(out / "decision.json", record)
    print(dumps(record), end="")
    return {"decision": decision}


def _train_one(cfg, problem, method, seed, run_dir: Path) -> dict:
    run_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg, problem, method, seed)
    result = train(problem, model, train_config(cfg, method, seed))
    write_train_log(result, run_dir / "train_log.csv", problem.loss_names)
    summary = {"method": method, "seed": seed, "problem": problem.metadata(), **result.summary()}
    write_json(run_dir / "result.json", summary)
    if not result.failed:
        save_checkpoint(model, run_dir / "checkpoint.bin")
    return summary


def run_train(cfg, out: Path) -> dict:
    problem = build_problem(cfg)
    summary = _train_one(cfg, problem, cfg["method"], cfg["seed"], out)
    return {"runs": 1, "failures": int(summary["failed"])}


def run_theory(cfg, out: Path) -> dict:
    if cfg["theory.tail"] == "pareto":
        tail = TailModel.pareto(cfg["theory.alpha"], cfg["theory.t0"])
    else:
        tail = TailModel.exponential(cfg["theory.nu"], cfg["theory.t0"])
    rows = []
    d = cfg["theory.d"]
    for K in _list(cfg["theory.K"], int):
        r = mc_uk(tail, d, K, cfg["theory.trials"], cfg["seed"], cfg["theory.workers"])
        rows.append([K, d, tail.describe(), r["joint"].mean, r["joint"].se,
                     r["factorized"].mean, r["factorized"].se])
    write_csv(out / "theory.csv", ["K", "d", "tail", "E_UK", "SE", "E_UK_factorized", "SE_factorized"], rows)
    return {}


def run_bench(cfg, out: Path) -> dict:
    problem = build_problem(cfg)
    methods = _list(cfg["bench.methods"], str)
    seeds = _list(cfg["bench.seeds"], int)
    jobs = [(m, s) for m in methods for s in seeds]

    def job(ms):
        m, s = ms
        try:
            return _train_one(cfg, problem, m, s, out / f"{m}_seed{s}")
        except Exception as exc:  # one broken run must not sink the sweep
            return {"method": m, "seed": s, "failed": True, "fail_reason": f"error: {exc}"}

    workers = max(1, cfg["bench.workers"])
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(job, jobs))
    else:
        results = [job(j) for j in jobs]
    write_json(out / "summary.json", {"problem": cfg["problem.name"], "runs": results})
    failures = sum(bool(r["failed"]) for r in results)
    return {"runs": len(results), "failures": failures}


RUNNERS = {"profile": run_profile, "select": run_select, "train": run_train,
           "theory": run_theory, "bench": run_bench}


def default_out(command: str) -> Path:
    root = os.environ.get(OUT_ENV, "runs")
    return Path(root) / command


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="conflictlab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/{name} or runs/{name})")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key; repeatable")
        p.add_argument("--check", action="store_true",
                       help="verify the hashes in an existing manifest instead of running")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out) if args.out else default_out(args.command)
    try:
        if args.check:
            bad = check_manifest(out)
            for b in bad:
                print(f"hash mismatch: {b}", file=sys.stderr)
            print("manifest ok" if not bad else f"{len(bad)} file(s) changed")
            return 1 if bad else 0
        cfg = parse_config(args.config, args.set, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        out.mkdir(parents=True, exist_ok=True)
        extra = RUNNERS[args.command](cfg, out) or {}
        counts = {k: v for k, v in extra.items() if k in ("runs", "failures")}
        write_manifest(out, cfg, args.command, counts)
    except Exception:
        traceback.print_exc()
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
