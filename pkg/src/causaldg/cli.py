"""Command-line surface: gen-data, train, eval, bench, report, icp.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import dataio, harness
from . import rng as rngmod
from .baselines import icp_run
from .scm import SettingData, enumerate_settings
from .training import (
    ClassificationData,
    RunReport,
    TrainConfig,
    train_anm,
    train_classifier,
    train_flow,
)

_CONFIG_FIELDS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _coerce(key: str, value: str):
    if key not in _CONFIG_FIELDS:
        raise ValueError(f"unknown config key {key!r}")
    current = getattr(TrainConfig(), key)
    if isinstance(current, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


def parse_config_file(path) -> dict:
    """Flat `key = value` lines, `#` comments; keys mirror TrainConfig."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = _coerce(key, value)
    return out


def build_config(args) -> TrainConfig:
    values: dict = {}
    if getattr(args, "config", None):
        values.update(parse_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), value.strip())
    if getattr(args, "model", None):
        values["model"] = args.model
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    return TrainConfig(**values)


def _parse_filter(text: str | None) -> dict:
    out = {}
    if not text:
        return out
    for item in text.split(","):
        if "=" not in item:
            raise ValueError(f"--filter expects key=value pairs, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip()
        out[key] = int(value) if key == "target" else value.strip()
    return out


def load_setting_dir(path) -> SettingData:
    path = Path(path)
    train = dataio.read_dataset_csv(path / "train.csv")
    test = dataio.read_dataset_csv(path / "test.csv")
    dg = dataio.read_dataset_csv(path / "dg.csv")
    setting = train[0].setting
    if setting is None:
        raise ValueError(f"{path}: missing sidecar metadata, cannot train")
    return SettingData(setting=setting, train=train, test=test, dg=dg[0])


def write_setting_dir(path, data: SettingData) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    dataio.write_dataset_csv(path / "train.csv", data.train)
    dataio.write_dataset_csv(path / "test.csv", data.test)
    dataio.write_dataset_csv(path / "dg.csv", [data.dg])


def _classification_data(args) -> ClassificationData:
    seed = args.seed or 0
    if getattr(args, "idx_images", None):
        base = dataio.make_idx_base(args.idx_images, args.idx_labels)
        half = base.shape.shape[0] // 2
        bases = {
            1: dataio.ClassBase(base.evidence[:half], base.shape[:half]),
            2: dataio.ClassBase(base.evidence[half:], base.shape[half:]),
        }
        test_base = bases[2]
    else:
        bases = {
            env: dataio.make_blob_base(args.n_train, rngmod.stream(seed, "base", env))
            for env in (1, 2)
        }
        test_base = None
    tests = {}
    for env in (1, 2, 3):
        tb = test_base or dataio.make_blob_base(
            args.n_test, rngmod.stream(seed, "testbase", env)
        )
        tests[env] = dataio.make_colored_env(tb, env, rngmod.stream(seed, "testcolor", env))
    return ClassificationData(train_bases=bases, test_envs=tests)


# -- subcommand implementations -------------------------------------------------


def cmd_gen_data(args) -> int:
    from .scm import generate_setting_data

    settings = enumerate_settings(_parse_filter(args.filter), args.count, seed=args.seed)
    out = Path(args.out)
    for setting in settings:
        data = generate_setting_data(setting, args.n_train, args.n_test)
        write_setting_dir(out / setting.setting_id, data)
    print(f"wrote {len(settings)} settings under {out}")
    return 0


def cmd_train(args) -> int:
    cfg = build_config(args)
    if cfg.model == "classifier":
        data = _classification_data(args)
        report, model = train_classifier(data, cfg)
    else:
        data = load_setting_dir(args.data)
        if cfg.model in ("flow", "flowg"):
            report, model = train_flow(data, cfg)
        else:
            report, model = train_anm(data, cfg)
    if args.checkpoint:
        dataio.save_checkpoint(args.checkpoint, model.params())
        report.checkpoint = str(args.checkpoint)
    out = Path(args.out) if args.out else None
    if out:
        harness.write_report_atomic(out, report)
        print(f"report written to {out}")
    else:
        print(json.dumps(report.to_dict(), indent=1))
    return 0


def cmd_eval(args) -> int:
    report = harness.load_report(args.report)
    if report is None:
        raise ValueError(f"cannot read report {args.report}")
    cfg = TrainConfig(**report.config)
    data = load_setting_dir(args.data)
    model = _rebuild_model(cfg, data)
    ckpt = args.checkpoint or report.checkpoint
    if not ckpt:
        raise ValueError("no checkpoint recorded in the report; pass --checkpoint")
    dataio.restore_params(model.params(), dataio.load_checkpoint(ckpt))
    from .training import _regression_metrics

    metrics = _regression_metrics(model, data, cfg)
    print(json.dumps(metrics, indent=1))
    return 0


def _rebuild_model(cfg: TrainConfig, data: SettingData):
    """Fresh model objects with the architecture implied by (cfg, data);
    parameter values come from the checkpoint afterwards."""
    from .flow import MtaFlowStack
    from .models import GateVector, Mlp
    from .training import (
        TrainedFlowRegressor,
        TrainedRegressor,
        _input_columns,
    )

    cols = _input_columns(data, cfg)
    init_rng = rngmod.stream(cfg.seed, "init")
    if cfg.model in ("flow", "flowg"):
        if cfg.model == "flowg":
            net, gate, cond_dim = None, GateVector(len(cols)), len(cols)
        else:
            net = Mlp([len(cols), cfg.hidden_width, cfg.hidden_width, cfg.feature_dim], init_rng)
            gate, cond_dim = None, cfg.feature_dim
        stack = MtaFlowStack(
            cond_dim,
            n_layers=cfg.flow_layers,
            width=cfg.flow_width,
            cond_hidden=cfg.cond_width,
            rng=init_rng,
        )
        return TrainedFlowRegressor(
            stack=stack, net=net, gate=gate, input_cols=cols,
            draws=cfg.prediction_draws, seed=cfg.seed,
        )
    mlp = Mlp([len(cols), cfg.hidden_width, cfg.hidden_width, 1], init_rng)
    gate = GateVector(len(cols)) if cfg.model == "anmg" else None
    return TrainedRegressor(mlp=mlp, gate=gate, input_cols=cols)


def cmd_bench(args) -> int:
    spec = harness.BenchmarkSpec(
        out_dir=Path(args.out) if args.out else harness.default_out_root(),
        models=[m.strip() for m in args.models.split(",")],
        filter=_parse_filter(args.filter),
        count=args.count,
        seeds=args.seeds,
        enum_seed=args.seed,
        workers=args.workers,
        profile=args.profile,
    )
    stats = harness.run_benchmark(spec)
    print(json.dumps(stats))
    return 0


def cmd_report(args) -> int:
    reports = harness.load_reports(args.runs)
    if not reports:
        raise ValueError(f"no valid reports under {args.runs}")
    summary = harness.write_aggregates(args.out, reports)
    print(f"aggregated {summary['n_reports']} reports into {args.out}")
    return 0


def cmd_icp(args) -> int:
    data = load_setting_dir(args.data)
    report, result = icp_run(data, alpha=args.alpha)
    payload = report.to_dict()
    payload["icp"] = {
        "accepted": [list(s) for s in result.accepted],
        "intersection": list(result.intersection),
        "alpha": result.alpha,
        "no_invariant_subset": result.no_invariant_subset,
    }
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=1))
    else:
        print(json.dumps(payload, indent=1))
    return 0


def make_parser() -> _Parser:
    parser = _Parser(prog="causaldg")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate benchmark datasets")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--filter", default=None, help="k=v[,k=v] over target/mechanism/intervention/location")
    p.add_argument("--n-train", type=int, default=1024)
    p.add_argument("--n-test", type=int, default=1024)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model and write its report")
    p.add_argument("--data", help="setting directory from gen-data")
    p.add_argument("--model", default=None)
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--n-train", type=int, default=4096, help="classifier data size")
    p.add_argument("--n-test", type=int, default=2048)
    p.add_argument("--idx-images", default=None)
    p.add_argument("--idx-labels", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="recompute metrics from a checkpoint")
    p.add_argument("--report", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="run a (setting x model x seed) grid")
    p.add_argument("--out", default=None)
    p.add_argument("--models", required=True, help="comma-separated model kinds")
    p.add_argument("--filter", default=None)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--seed", type=int, default=0, help="enumeration seed")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--profile", default="desk", choices=sorted(harness.PROFILES))
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="aggregate run reports into tables")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("icp", help="run linear ICP on a setting directory")
    p.add_argument("--data", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_icp)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError, RuntimeError, FloatingPointError) as exc:
        print(f"causaldg: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
