"""Command-line interface: synth, train, eval, predict, inspect.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

The run config is one JSON document; every section is optional and unknown
keys are rejected::

    {"model": {"scale_preset": "tiny"}, "stage1": {"epochs": 60},
     "stage2": {"epochs": 60}, "augment": {"enabled": true}, "seed": 0}

Seed precedence: ``--seed``, then the config's ``seed``, then the
``GRIPNET_SEED`` environment variable, then 0.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data, metrics, model, train
from .probdist import TruncatedNormal, interval

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "GRIPNET_SEED"
_CONFIG_KEYS = {"model", "stage1", "stage2", "augment", "seed"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunConfig:
    model: model.ModelConfig = field(default_factory=model.ModelConfig)
    stage1: train.StageConfig = field(default_factory=train.StageConfig.stage1)
    stage2: train.StageConfig = field(default_factory=train.StageConfig.stage2)
    augment: train.AugmentConfig = field(default_factory=train.AugmentConfig)
    seed: int | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise UsageError("config must be a JSON object")
        unknown = set(d) - _CONFIG_KEYS
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(
                model=model.ModelConfig.from_dict(d.get("model", {})),
                stage1=train.StageConfig.from_dict({**_defaults(train.StageConfig.stage1()), **d.get("stage1", {})}),
                stage2=train.StageConfig.from_dict({**_defaults(train.StageConfig.stage2()), **d.get("stage2", {})}),
                augment=train.AugmentConfig.from_dict(d.get("augment", {})),
                seed=d.get("seed"),
            )
        except (TypeError, ValueError) as e:
            raise UsageError(f"invalid config: {e}") from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        return cls.from_dict(_read_json(path, "config"))


def _defaults(cfg) -> dict:
    return train.config_dict(cfg)


def _read_json(path, what: str):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"{what} file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"{what} file {path} is not valid JSON: {e}") from None


def resolve_seed(flag: int | None, config_seed: int | None) -> int:
    if flag is not None:
        return flag
    if config_seed is not None:
        return int(config_seed)
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return 0


def _say(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _load_model(path) -> model.SIWNet:
    if not Path(path).exists():
        raise UsageError(f"model file not found: {path}")
    return model.load(path)


def _crop(path) -> data.BevCrop | None:
    return data.BevCrop.from_json(path) if path else None


def _dataset(manifest, size: int, crop) -> train.Dataset:
    path = Path(manifest)
    if not path.exists():
        raise UsageError(f"manifest not found: {manifest}")
    records = data.read_manifest(path)
    x = data.load_inputs(records, path.parent, size, crop)
    return train.Dataset(x, np.array([r.friction_factor for r in records]))


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    spec = data.SyntheticSpec.from_dict(_read_json(args.spec, "spec"))
    seed = resolve_seed(args.seed, None)
    ds = data.generate_synthetic(spec, seed)
    sidecar = data.write_synthetic(ds, args.out)
    _say({"manifest": str(args.out), "n": spec.n, "seed": seed, "truth": str(sidecar)})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    overrides = {}
    if args.no_point_sigmoid:
        overrides["point_sigmoid"] = False
    if args.no_pi_sigmoid:
        overrides["pi_sigmoid"] = False
    if args.no_dropout:
        overrides["dropout_p"] = 0.0
    seed = train.RunSeed(resolve_seed(args.seed, cfg.seed))
    aug = cfg.augment

    if args.stage == "2":
        if args.init is None:
            raise UsageError("--stage 2 needs a stage-1 model via --init")
        m = _load_model(args.init)
        if overrides:
            m.config = model.ModelConfig.from_dict({**m.config.to_dict(), **overrides})
    else:
        if args.init is not None:
            m = _load_model(args.init)
        else:
            mcfg = model.ModelConfig.from_dict({**cfg.model.to_dict(), **overrides})
            m = model.build(mcfg, seed=seed.init_seed())
    size = m.config.input_size
    crop = _crop(args.crop)
    train_set = _dataset(args.manifest, size, crop)
    if len(train_set) == 0:
        raise data.DataError(f"manifest {args.manifest} has no samples")
    val_set = _dataset(args.val_manifest, size, crop) if args.val_manifest else None

    log: list[dict] = []
    if args.stage in ("both", "1"):
        m, entries = train.train_stage1(m, train_set, cfg.stage1, aug, seed, val_set)
        log += entries
    if args.stage in ("both", "2"):
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            m, entries = train.train_stage2(m, train_set, cfg.stage2, aug, seed, val_set)
        log += entries
    if args.stage == "joint":
        m, entries = train.train_joint_ablation(m, train_set, cfg.stage2, aug, seed, val_set)
        log += entries
    model.save(m, args.out)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log.jsonl")
    train.write_log(log, log_path)
    _say({"model": str(args.out), "log": str(log_path), "sha256": model.file_digest(args.out), "epochs": len(log)})
    return EXIT_OK


def cmd_eval(args) -> int:
    m = _load_model(args.model)
    crop = _crop(args.crop)
    test = _dataset(args.manifest, m.config.input_size, crop)
    f, s = train.predict(m, test.images)
    if args.mode == "static":
        if not args.val_manifest:
            raise UsageError("--mode static needs --val-manifest to fit the e90 threshold")
        val = _dataset(args.val_manifest, m.config.input_size, crop)
        fv, _ = train.predict(m, val.images)
        e90 = metrics.e90_threshold(np.abs(fv - val.labels))
        report = metrics.evaluate([(p, None) for p in f], test.labels, metrics.Static(e90))
    else:
        report = metrics.evaluate(list(zip(f, s)), test.labels)
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n", encoding="utf-8")
    for k, v in report.to_dict().items():
        print(f"{k}\t{v}")
    return EXIT_OK


def _read_input(path: Path, size: int, crop) -> np.ndarray:
    if not path.exists():
        raise UsageError(f"input not found: {path}")
    if path.suffix.lower() in (".png", ".ppm", ".pnm"):
        return data.prepare(data.load_image(path), crop, size).astype(np.float32)
    text = path.read_text(encoding="utf-8")
    try:
        v = np.array([float(t) for t in re.split(r"[\s,]+", text.strip()) if t], dtype=np.float32)
    except ValueError as e:
        raise data.DataError(f"{path}: not a numeric vector: {e}") from None
    if v.size != 3 * size * size:
        raise data.DataError(f"{path}: vector has {v.size} values, model needs 3*{size}*{size}={3 * size * size}")
    return v.reshape(3, size, size)


def cmd_predict(args) -> int:
    m = _load_model(args.model)
    x = _read_input(Path(args.input), m.config.input_size, _crop(args.crop))
    f, s = train.predict(m, x[None])
    iv = interval(TruncatedNormal(float(f[0]), float(s[0])), 0.9)
    _say({"f_hat": float(f[0]), "sigma_hat": float(s[0]), "interval_90": [iv.lo, iv.hi]})
    return EXIT_OK


def cmd_inspect(args) -> int:
    cfg = RunConfig.load(args.config).model
    _say(
        {
            "parameters": model.param_count(cfg),
            "gflops": model.flop_estimate(cfg) / 1e9,
            "feature_map_sizes": cfg.feature_map_sizes(),
            "scale_preset": cfg.scale_preset,
        }
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="siwnet", description="Road friction estimation with prediction intervals.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--spec", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model (stage 1 then stage 2 by default)")
    t.add_argument("--config")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--log", help="JSONL log path (default: <out>.log.jsonl)")
    t.add_argument("--val-manifest")
    t.add_argument("--stage", choices=["both", "1", "2", "joint"], default="both")
    t.add_argument("--init", help="start from this model file (required for --stage 2)")
    t.add_argument("--crop")
    t.add_argument("--seed", type=int)
    t.add_argument("--no-point-sigmoid", action="store_true")
    t.add_argument("--no-pi-sigmoid", action="store_true")
    t.add_argument("--no-dropout", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a model on a manifest")
    e.add_argument("--model", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--mode", choices=["dist", "static"], default="dist")
    e.add_argument("--val-manifest")
    e.add_argument("--report")
    e.add_argument("--crop")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="predict one image or vector")
    r.add_argument("--model", required=True)
    r.add_argument("--input", required=True)
    r.add_argument("--crop")
    r.set_defaults(func=cmd_predict)

    i = sub.add_parser("inspect", help="parameter count and GFLOP estimate")
    i.add_argument("--config")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (model.ConfigError, model.ModelFileError, ValueError) as e:
        # DataError, DegenerateQuadError and bad configs are all ValueErrors
        code = EXIT_USAGE if isinstance(e, model.ConfigError) else EXIT_DATA
        print(f"error: {e}", file=sys.stderr)
        return code
    except train.NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
