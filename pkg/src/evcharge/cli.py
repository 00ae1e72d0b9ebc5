"""Command line: gen, train, eval, compare.

Exit codes: 0 ok, 1 usage, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import tomli
import tomli_w

from . import metrics
from .baselines import BASELINES, iddpg_train, make_baseline
from .domain import ConfigError, TrainConfig
from .scenario import GeneratorConfig, generate, load, save
from .simulator import run_days

log = logging.getLogger("evcharge")

DEFAULT_SPLIT = (28, 3, 14)
TRAIN_MODES = ("cwt-only", "cp-only", "multi", "avg", "iddpg")
POLICIES = BASELINES + ("master", "iddpg")
RUN_KEYS = {
    "scenario": str, "mode": str, "policy": str, "checkpoint": str, "cwt_checkpoint": str,
    "cp_checkpoint": str, "split": list, "seed": int, "price_k": int,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---- configuration ----------------------------------------------------------

@dataclasses.dataclass
class RunConfig:
    train: TrainConfig
    generator: GeneratorConfig
    run: dict

    def to_toml(self) -> str:
        doc = {"run": {k: v for k, v in self.run.items() if v is not None},
               "train": _plain(dataclasses.asdict(self.train)),
               "generator": _plain(dataclasses.asdict(self.generator))}
        return tomli_w.dumps(doc)


def _plain(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if v is None:
            continue
        out[k] = _listify(v)
    return out


def _listify(v):
    if isinstance(v, (tuple, list)):
        return [_listify(x) for x in v]
    return v


def _tupleify(v):
    if isinstance(v, list):
        return tuple(_tupleify(x) for x in v)
    return v


def _section(doc: dict, name: str, cls) -> dict:
    raw = doc.get(name, {})
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown config key '{name}.{key}'")
    return {k: _tupleify(v) for k, v in raw.items()}


def load_config(path: Optional[str], overrides: dict) -> RunConfig:
    doc = {}
    if path:
        try:
            with open(path, "rb") as fh:
                doc = tomli.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for key in doc:
        if key not in ("run", "train", "generator"):
            raise ConfigError(f"unknown config key '{key}'")
    run = dict(doc.get("run", {}))
    for key, val in run.items():
        if key not in RUN_KEYS:
            raise ConfigError(f"unknown config key 'run.{key}'")
        if not isinstance(val, RUN_KEYS[key]):
            raise ConfigError(f"run.{key} must be of type {RUN_KEYS[key].__name__}")
    train_kw = _section(doc, "train", TrainConfig)
    gen_kw = _section(doc, "generator", GeneratorConfig)
    run.update({k: v for k, v in overrides.items() if v is not None and k in RUN_KEYS})
    for k in ("iterations",):
        if overrides.get(k) is not None:
            train_kw[k] = overrides[k]
    seed = run.get("seed")
    if seed is None:
        seed = train_kw.get("seed")
    if seed is None:
        # seeds are mandatory in resolved configs; draw one and record it
        seed = int(np.random.SeedSequence().entropy % (2 ** 63))
    run["seed"] = int(seed)
    train_kw["seed"] = int(seed)
    gen_kw["seed"] = int(seed)
    try:
        return RunConfig(TrainConfig(**train_kw), GeneratorConfig(**gen_kw), run)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def split_days(n_days: int, ratios: Sequence[float] = DEFAULT_SPLIT):
    """Contiguous (train, validation, test) day lists in proportion to ``ratios``.

    Largest-remainder rounding; at least one training and, given two or
    more days, one test day.
    """
    if n_days < 1:
        raise ConfigError("scenario has no days")
    if len(ratios) != 3 or min(ratios) < 0 or sum(ratios) <= 0 or ratios[0] <= 0:
        raise ConfigError("split must be three non-negative numbers with a positive train share")
    total = float(sum(ratios))
    exact = [n_days * r / total for r in ratios]
    counts = [math.floor(x) for x in exact]
    rest = n_days - sum(counts)
    for i in sorted(range(3), key=lambda i: (-(exact[i] - counts[i]), i))[:rest]:
        counts[i] += 1
    if counts[0] == 0:
        counts[0] = 1
        counts[max(range(3), key=lambda i: counts[i])] -= 1
    if n_days >= 2 and counts[2] == 0 and ratios[2] > 0:
        counts[2] = 1
        counts[max(range(2), key=lambda i: counts[i])] -= 1
    a, b = counts[0], counts[0] + counts[1]
    return list(range(a)), list(range(a, b)), list(range(b, n_days))


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(out: Path, rc: RunConfig) -> None:
    (out / "config.resolved.toml").write_text(rc.to_toml(), encoding="utf-8")


def _scenario(rc: RunConfig):
    path = rc.run.get("scenario")
    if not path:
        raise ConfigError("no scenario: pass --scenario or set run.scenario")
    return load(path)


# ---- commands ---------------------------------------------------------------

def cmd_gen(args, rc: RunConfig) -> int:
    out = _out_dir(args)
    sc = generate(rc.generator)
    save(sc, out)
    _write_resolved(out, rc)
    n_req = sum(len(e) for e in sc.episodes)
    print(f"stations={sc.n_stations} days={sc.n_days} requests={n_req} -> {out}")
    return 0


def cmd_train(args, rc: RunConfig) -> int:
    from .master.trainer import load_model, save_model, train, write_history

    mode = rc.run.get("mode") or "cwt-only"
    if mode not in TRAIN_MODES:
        raise ConfigError(f"unknown mode {mode!r}; valid: {', '.join(TRAIN_MODES)}")
    optimal = None
    if mode == "multi":
        paths = {o: rc.run.get(f"{o}_checkpoint") for o in ("cwt", "cp")}
        missing = [o for o, p in paths.items() if not p]
        if missing:
            raise ConfigError(
                "multi mode requires well-trained objective-specific networks; pretrain with "
                "--mode cwt-only and --mode cp-only and pass --cwt-checkpoint/--cp-checkpoint "
                f"(missing: {', '.join(missing)})")
        optimal = {}
        for o, p in paths.items():
            model, manifest = load_model(p)
            if o not in model.objectives:
                raise ConfigError(f"{p}: checkpoint was trained as {manifest['mode']}, not {o}-only")
            optimal[o] = model.frozen(o)
    sc = _scenario(rc)
    tr, va, _ = split_days(sc.n_days, rc.run.get("split", DEFAULT_SPLIT))
    out = _out_dir(args)
    _write_resolved(out, rc)

    def progress(row):
        val = "" if "val_MCWT" not in row else (
            f" val MCWT={row['val_MCWT']:.3f} MCP={row['val_MCP']:.3f} CFR={row['val_CFR']:.3f}")
        print(f"iter {row['iteration']:3d} day {row['episode']:3d}{val}", flush=True)

    if mode == "iddpg":
        res = iddpg_train(sc, rc.train, tr, va, progress=progress)
        kind, saved_mode = "independent", "avg"
    else:
        # objective-specific optima keep their final iterate (see train_pipeline)
        res = train(sc, rc.train, mode, tr, va, optimal=optimal, progress=progress,
                    select_best=mode not in ("cwt-only", "cp-only"))
        kind, saved_mode = "attentive", mode
    best = res.best_report.as_dict() if res.best_report else {}
    best.pop("per_day", None)
    save_model(res, out / "checkpoint.json", rc.train, saved_mode, res.best_iteration, best, kind)
    write_history(res.history, out / "history.csv")
    print(f"best iteration {res.best_iteration}; checkpoint -> {out / 'checkpoint.json'}")
    return 0


def cmd_eval(args, rc: RunConfig) -> int:
    policy_name = rc.run.get("policy")
    if policy_name not in POLICIES:
        raise ConfigError(f"unknown policy {policy_name!r}; valid: {', '.join(POLICIES)}")
    sc = _scenario(rc)
    _, _, test = split_days(sc.n_days, rc.run.get("split", DEFAULT_SPLIT))
    if not test:
        raise ConfigError("split leaves no test days")
    if policy_name in ("master", "iddpg"):
        from .master.executor import MasterPolicy
        from .master.trainer import load_model

        ckpt = rc.run.get("checkpoint")
        if not ckpt:
            raise ConfigError(f"policy {policy_name} needs --checkpoint")
        model, _ = load_model(ckpt)
        policy = MasterPolicy(model.actor, rc.train.k)
    else:
        policy = make_baseline(policy_name, rc.run["seed"], rc.train.k, rc.run.get("price_k", 5))
    out = _out_dir(args)
    _write_resolved(out, rc)
    rep = metrics.report_for_days(run_days(sc, test, policy, rc.train, rc.run["seed"]))
    metrics.emit(rep, out / "report.json", "json")
    metrics.emit(rep, out / "report.csv", "csv")
    print(f"{policy_name}: MCWT={rep.mcwt:.4f} MCP={rep.mcp:.4f} TSF={rep.tsf:.4f} CFR={rep.cfr:.4f}")
    return 0


def _report_name(path: Path, taken) -> str:
    name = path.parent.name if path.name.startswith("report") and path.parent.name else path.stem
    base, i = name, 2
    while name in taken:
        name = f"{base}-{i}"
        i += 1
    return name


def cmd_compare(args, rc: RunConfig) -> int:
    if len(args.reports) < 2:
        raise UsageError("compare needs at least two report paths")
    reports = {}
    for p in args.reports:
        path = Path(p)
        try:
            reports[_report_name(path, reports)] = metrics.load_report(path)
        except FileNotFoundError:
            raise ConfigError(f"report not found: {p}") from None
    ref = args.reference
    if ref is not None and ref not in reports:
        raise ConfigError(f"unknown reference {ref!r}; have {', '.join(reports)}")
    rows = metrics.compare(reports, ref)
    print(metrics.format_table(rows))
    out = _out_dir(args)
    metrics.write_compare_csv(rows, out / "compare.csv")
    return 0


# ---- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="evcharge", description="EV charging recommendation experiments")
    p.add_argument("--config", help="TOML configuration file")
    p.add_argument("--seed", type=int, help="run seed (recorded in the resolved config)")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    sub.add_parser("gen", help="generate a synthetic scenario")

    t = sub.add_parser("train", help="train a policy")
    t.add_argument("--scenario")
    t.add_argument("--mode", choices=TRAIN_MODES)
    t.add_argument("--iterations", type=int)
    t.add_argument("--cwt-checkpoint", dest="cwt_checkpoint")
    t.add_argument("--cp-checkpoint", dest="cp_checkpoint")

    e = sub.add_parser("eval", help="evaluate a policy on the test days")
    e.add_argument("--scenario")
    e.add_argument("--policy")
    e.add_argument("--checkpoint")

    c = sub.add_parser("compare", help="compare metric reports")
    c.add_argument("reports", nargs="*")
    c.add_argument("--reference")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "compare": cmd_compare}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = load_config(args.config, {**vars(args)})
        return COMMANDS[args.command](args, rc)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
