"""Command-line entry point.

Every command resolves a flat config (dotted keys such as ``agent.gamma``), writes its outputs
to ``--out`` and records a ``manifest.json`` there. Passing a manifest back as ``--config``
repeats the run with the same config, seed and inputs.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .agent import AgentConfig
from .boosting import TrainConfig
from .estimator import GELSTracker
from .evaluation import BandwidthGreedyPolicy, RandomPolicy, improvement_experiment
from .qoe import QoeConfig
from .selftest import run_selftest
from .sim import EnvConfig, GeneratorConfig, generate_event, load_event_trace, save_event_trace

log = logging.getLogger("gels")

COMMANDS = ("gen", "train", "train-star", "eval", "improve", "selftest")
MANIFEST_VERSION = 1


class ValidationError(ValueError):
    pass


def _defaults(prefix: str, cls, skip=()) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        value = f.default
        out[f"{prefix}.{f.name}"] = list(value) if isinstance(value, tuple) else value
    return out


def default_config() -> dict:
    cfg = {"seed": 0}
    cfg.update(_defaults("gen", GeneratorConfig, skip=("seed",)))
    # long enough for the default split point
    cfg["gen.T"] = 45
    cfg["gen.count"] = 10
    cfg.update(_defaults("qoe", QoeConfig))
    cfg.update(_defaults("env", EnvConfig, skip=("ladder", "qoe")))
    cfg.update(_defaults("agent", AgentConfig))
    cfg.update(_defaults("train", TrainConfig, skip=("agent", "env", "seed")))
    cfg["improve.minutes"] = 5
    cfg["improve.policy"] = "gels"
    cfg["eval.adapt"] = True
    return cfg


def _coerce(key: str, value, default):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValidationError(f"{key} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"{key} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{key} must be a number")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or len(value) != len(default):
            raise ValidationError(f"{key} must be a list of {len(default)} numbers")
        return [float(v) for v in value]
    if isinstance(default, str) and not isinstance(value, str):
        raise ValidationError(f"{key} must be a string")
    return value


def resolve_config(overrides: dict) -> dict:
    cfg = default_config()
    for key, value in overrides.items():
        if key not in cfg:
            raise ValidationError(f"unknown config key {key!r}")
        cfg[key] = _coerce(key, value, cfg[key])
    return cfg


def _section(cfg: dict, prefix: str) -> dict:
    out = {}
    for key, value in cfg.items():
        if key.startswith(prefix + "."):
            out[key[len(prefix) + 1 :]] = tuple(value) if isinstance(value, list) else value
    return out


def build_configs(cfg: dict):
    try:
        qoe_cfg = QoeConfig(**_section(cfg, "qoe"))
        env_cfg = EnvConfig(qoe=qoe_cfg, **_section(cfg, "env"))
        gen = _section(cfg, "gen")
        gen.pop("count")
        gen_cfg = GeneratorConfig(seed=cfg["seed"], **gen)
        agent_cfg = AgentConfig(**_section(cfg, "agent"))
        train_cfg = TrainConfig(agent=agent_cfg, env=env_cfg, seed=cfg["seed"], **_section(cfg, "train"))
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from exc
    return gen_cfg, env_cfg, train_cfg


def tracker_from_config(cfg: dict, boosting: bool) -> GELSTracker:
    a = _section(cfg, "agent")
    t = _section(cfg, "train")
    return GELSTracker(
        **a,
        boost_eta=t["eta"],
        epochs=t["epochs"],
        adapt_epochs=t["adapt_epochs"],
        cut=t["cut"],
        value_init=t["value_init"],
        boosting=boosting,
        seed=cfg["seed"],
    )


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _event_files(events_dir) -> list[Path]:
    if events_dir is None:
        raise ValidationError("--events is required for this command")
    d = Path(events_dir)
    if not d.is_dir():
        raise ValidationError(f"events directory {d} does not exist")
    files = sorted(d.glob("*.jsonl"))
    if not files:
        raise ValidationError(f"no .jsonl traces in {d}")
    return files


def _load_events(files):
    return [load_event_trace(f) for f in files]


def _require_checkpoint(path) -> Path:
    if path is None:
        raise ValidationError("--checkpoint is required for this command")
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"checkpoint {p} does not exist")
    return p


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


# ---------------------------------------------------------------- commands


def cmd_gen(cfg, args, out: Path) -> list[str]:
    gen_cfg, env_cfg, _ = build_configs(cfg)
    written = []
    for i in range(cfg["gen.count"]):
        event = generate_event(dataclasses.replace(gen_cfg, seed=cfg["seed"] * 1000 + i), env_cfg)
        name = f"event_{i:03d}.jsonl"
        save_event_trace(event, out / name)
        written.append(name)
    return written


def cmd_train(cfg, args, out: Path, boosting: bool = True) -> list[str]:
    _, env_cfg, _ = build_configs(cfg)
    files = _event_files(args.events)
    events = _load_events(files)
    if boosting:
        (out / "checkpoints").mkdir(exist_ok=True)
        epoch_files = []

        def save_epoch(epoch, params):
            name = f"checkpoints/epoch_{epoch:04d}.json"
            snap = tracker_from_config(cfg, boosting=True)
            snap.params_ = params
            snap.save(out / name)
            epoch_files.append(name)

        est = tracker_from_config(cfg, boosting=True).fit(events, env=env_cfg, on_epoch=save_epoch)
        est.save(out / "checkpoint.json")
        _write_rows(
            out / "training_log.csv",
            ["epoch", "event_id", "adapt_loss", "test_loss"],
            [[r["epoch"], r["event_id"], _fmt(r["adapt_loss"]), _fmt(r["test_loss"])] for r in est.training_log_],
        )
        return ["checkpoint.json", "training_log.csv"] + epoch_files
    written = []
    for f, event in zip(files, events):
        est = tracker_from_config(cfg, boosting=False).fit([event], env=env_cfg)
        name = f"{f.stem}.star.json"
        est.save(out / name)
        written.append(name)
    return written


def cmd_eval(cfg, args, out: Path) -> list[str]:
    _, env_cfg, _ = build_configs(cfg)
    ckpt = _require_checkpoint(args.checkpoint)
    files = _event_files(args.events)
    est = GELSTracker.load(ckpt, env_cfg)
    est.set_params(cut=cfg["train.cut"])
    written, summary = [], []
    for f, event in zip(files, _load_events(files)):
        report = est.evaluate(event, adapt=cfg["eval.adapt"])
        name = f"eval_{f.stem}.csv"
        report.to_csv(out / name)
        written.append(name)
        o = report.overall
        summary.append([f.stem, _fmt(o.get("macro_auc")), _fmt(o.get("micro_f1")), _fmt(o.get("macro_f1"))])
    _write_rows(out / "eval_summary.csv", ["event", "macro_auc", "micro_f1", "macro_f1"], summary)
    return written + ["eval_summary.csv"]


def cmd_improve(cfg, args, out: Path) -> list[str]:
    _, env_cfg, _ = build_configs(cfg)
    events = _load_events(_event_files(args.events))
    kind = cfg["improve.policy"]
    if kind == "gels":
        est = GELSTracker.load(_require_checkpoint(args.checkpoint), env_cfg)
        factory = lambda event: est.policy()  # noqa: E731
    elif kind == "random":
        factory = lambda event: RandomPolicy(cfg["seed"])  # noqa: E731
    elif kind == "greedy":
        factory = lambda event: BandwidthGreedyPolicy(cfg["seed"])  # noqa: E731
    else:
        raise ValidationError(f"improve.policy must be gels, random or greedy, not {kind!r}")
    if cfg["improve.minutes"] < 1:
        raise ValidationError("improve.minutes must be at least 1")
    result = improvement_experiment(factory, events, cfg["improve.minutes"], seed=cfg["seed"], env_cfg=env_cfg)
    result.to_csv(out / "improvement.csv")
    _write_rows(
        out / "quality.csv",
        ["minute", "mean_normalized_qoe"],
        [[m, _fmt(q)] for m, q in sorted(result.mean_quality.items())],
    )
    return ["improvement.csv", "quality.csv"]


def cmd_selftest(cfg, args, out: Path) -> list[str]:
    results = run_selftest()
    lines = [f"{'PASS' if r.ok else 'FAIL'} {r.name}: {r.detail}" for r in results]
    print("\n".join(lines))
    (out / "selftest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if not all(r.ok for r in results):
        raise RuntimeError(f"{sum(not r.ok for r in results)} selftest checks failed")
    return ["selftest.txt"]


HANDLERS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "train-star": lambda cfg, args, out: cmd_train(cfg, args, out, boosting=False),
    "eval": cmd_eval,
    "improve": cmd_improve,
    "selftest": cmd_selftest,
}


# ---------------------------------------------------------------- plumbing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gels", description="P2P streaming simulator and graph RL tracker")
    p.add_argument("--version", action="version", version=f"gels {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="JSON file of dotted keys, or a manifest.json to re-run")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", type=Path, default=Path("."))
        s.add_argument("--events", type=Path)
        s.add_argument("--checkpoint", type=Path)
        s.add_argument("--threads", type=int, default=1)
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _read_config(args) -> tuple[dict, dict]:
    """Overrides from ``--config`` plus any paths a manifest recorded."""
    if args.config is None:
        return {}, {}
    try:
        data = json.loads(args.config.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(data, dict):
        raise ValidationError("config must be a JSON object")
    if "manifest_version" in data:
        if data.get("command") != args.command:
            raise ValidationError(f"manifest was written by {data.get('command')!r}, not {args.command!r}")
        return dict(data["config"]), dict(data.get("paths", {}))
    return data, {}


def _manifest(command, cfg, paths, outputs, out: Path) -> dict:
    inputs = {}
    if paths.get("events"):
        inputs["events"] = {f.name: _sha256(f) for f in _event_files(paths["events"])}
    if paths.get("checkpoint"):
        inputs["checkpoint"] = _sha256(Path(paths["checkpoint"]))
    return {
        "manifest_version": MANIFEST_VERSION,
        "version": __version__,
        "command": command,
        "config": cfg,
        "paths": paths,
        "inputs": inputs,
        "outputs": {name: _sha256(out / name) for name in outputs},
    }


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides, saved_paths = _read_config(args)
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = resolve_config(overrides)
        if args.threads < 1:
            raise ValidationError("--threads must be at least 1")
        paths = {
            "events": str(args.events) if args.events is not None else saved_paths.get("events"),
            "checkpoint": str(args.checkpoint) if args.checkpoint is not None else saved_paths.get("checkpoint"),
        }
        args.events, args.checkpoint = paths["events"], paths["checkpoint"]
        paths = {k: v for k, v in paths.items() if v is not None}
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(limits=args.threads):
            outputs = HANDLERS[args.command](cfg, args, out)
        manifest = _manifest(args.command, cfg, paths, outputs, out)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except ValueError as exc:
        print(f"gels {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except RuntimeError as exc:
        print(f"gels {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
