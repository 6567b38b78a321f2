"""Command line interface.

Subcommands: synth, train, eval, augment, gradcheck, ablate. Training
options live in a flat `key = value` config file; every key is also a
CLI flag of the same name, and flags win over the file. Exit codes:
0 success, 1 usage or input error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import replace
from pathlib import Path

from geoseg.augment import AugmentationConfig, compound_augment
from geoseg.gradcheck import run_gradient_check
from geoseg.network import (
    CheckpointFormatError,
    NonFiniteGradientError,
    load_checkpoint,
    save_checkpoint,
)
from geoseg.scenes import (
    ClassTable,
    Scene,
    SceneFormatError,
    list_stems,
    read_scene,
    write_scene,
)
from geoseg.streams import substream
from geoseg.synthetic import (
    TEST_INDEX_BASE,
    SynthConfig,
    default_class_table,
    generate_scene,
    shift_scene,
)
from geoseg.training import (
    TrainConfig,
    ablation_base_config,
    evaluate,
    init_state,
    run_ablation,
    train,
)


class UsageError(Exception):
    """Bad arguments, bad config keys, or inconsistent inputs; exit code 1."""


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_widths(s: str) -> tuple[int, ...]:
    return tuple(int(part) for part in s.split(",") if part.strip())


_PARSERS = {
    "int": int,
    "float": float,
    "bool": _parse_bool,
    "str": str,
    "tuple[int, ...]": _parse_widths,
}

TRAIN_KEYS: dict[str, str] = {
    f.name: f.type for f in dataclasses.fields(TrainConfig)
}


def parse_config_text(text: str, source: str = "config") -> dict[str, str]:
    """Flat `key = value` lines; '#' starts a comment, blanks are skipped."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise UsageError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()
    return values


def build_train_config(
    config_path: str | None,
    overrides: dict[str, str],
    base: TrainConfig | None = None,
) -> TrainConfig:
    raw: dict[str, str] = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        raw.update(parse_config_text(path.read_text(), source=str(path)))
    raw.update(overrides)
    kwargs = {}
    for key, sval in raw.items():
        if key not in TRAIN_KEYS:
            raise UsageError(f"unknown config key {key!r}")
        try:
            kwargs[key] = _PARSERS[TRAIN_KEYS[key]](sval)
        except ValueError as exc:
            raise UsageError(f"bad value for {key!r}: {exc}") from exc
    try:
        return replace(base, **kwargs) if base is not None else TrainConfig(**kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def config_lines(cfg: TrainConfig) -> list[str]:
    out = []
    for f in dataclasses.fields(TrainConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            text = str(value).lower()
        elif isinstance(value, tuple):
            text = ",".join(str(v) for v in value)
        else:
            text = str(value)
        out.append(f"{f.name} = {text}")
    return out


def _add_train_key_flags(parser: argparse.ArgumentParser) -> None:
    for key in TRAIN_KEYS:
        parser.add_argument(f"--{key}", dest=f"key_{key}", metavar="VALUE")


def _collect_overrides(args: argparse.Namespace) -> dict[str, str]:
    out = {}
    for key in TRAIN_KEYS:
        value = getattr(args, f"key_{key}", None)
        if value is not None:
            out[key] = value
    return out


def _load_scenes(root: str, table: ClassTable) -> list[Scene]:
    root_path = Path(root)
    if not root_path.is_dir():
        raise UsageError(f"data directory not found: {root}")
    return [read_scene(root_path, stem, table) for stem in list_stems(root_path)]


def _write_lines(path: Path, lines: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def cmd_synth(args: argparse.Namespace) -> int:
    table = default_class_table()
    cfg = SynthConfig(
        classes=table,
        points_per_scene=args.points,
        scene_extent=args.extent,
        shift_severity=args.severity,
        seed=args.seed,
    )
    out = Path(args.out)
    aug = AugmentationConfig()
    for i in range(args.scenes):
        if args.severity > 0:
            scene = generate_scene(cfg, TEST_INDEX_BASE + i)
            scene = shift_scene(scene, cfg, aug, i)
        else:
            scene = generate_scene(cfg, i)
        scene = Scene(scene.cloud, scene.labels, f"{i:06d}")
        write_scene(out, scene)
    print(f"scenes = {args.scenes}")
    print(f"points_per_scene = {args.points}")
    print(f"out = {out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = build_train_config(args.config, _collect_overrides(args))
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    table = default_class_table()
    scenes = _load_scenes(args.data, table)
    out_dir = Path(cfg.out_dir)

    if cfg.epochs == 0:
        state = init_state(cfg, table)
        epoch_losses = []
    else:
        if not scenes:
            raise UsageError(f"no scenes under {args.data}")

        def progress(epoch, summary):
            print(f"epoch_{epoch}_total = {summary['total']:.6f}")

        result = train(cfg, scenes, table, progress=progress)
        state = result.state
        epoch_losses = result.epoch_losses

    save_checkpoint(out_dir / "checkpoint.gseg", state.model, state.relation, state.embedding)
    _write_lines(out_dir / "config.txt", config_lines(cfg))
    loss_lines = []
    for i, summary in enumerate(epoch_losses):
        for name in ("seg", "gpl", "gcl", "total"):
            loss_lines.append(f"epoch_{i}_{name} = {summary[name]:.6f}")
    _write_lines(out_dir / "losses.txt", loss_lines)
    print(f"checkpoint = {out_dir / 'checkpoint.gseg'}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    table = default_class_table()
    model, relation, embedding = load_checkpoint(args.checkpoint)
    if model.num_classes != table.num_classes:
        raise UsageError(
            f"checkpoint has {model.num_classes} classes but the class table has "
            f"{table.num_classes}"
        )
    scenes = _load_scenes(args.data, table)
    if not scenes:
        raise UsageError(f"no scenes under {args.data}")
    report = evaluate(model, scenes, table, tta=args.tta)
    lines = report.lines(table.names)
    for line in lines:
        print(line)
    if args.out is not None:
        _write_lines(Path(args.out), lines)
    if args.json is not None:
        path = Path(args.json)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report.to_json_dict(), indent=2) + "\n")
    return 0


def cmd_augment(args: argparse.Namespace) -> int:
    table = default_class_table()
    scene = read_scene(Path(args.data), args.stem, table)
    overrides = _collect_overrides(args)
    aug_fields = {f.name for f in dataclasses.fields(AugmentationConfig)}
    bad = set(overrides) - aug_fields
    if bad:
        raise UsageError(f"not augmentation keys: {sorted(bad)}")
    kwargs = {}
    for key, sval in overrides.items():
        kwargs[key] = _PARSERS[TRAIN_KEYS[key]](sval)
    try:
        cfg = AugmentationConfig(**kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    rng = substream(cfg.seed, "pags", scene.id)
    augmented, report = compound_augment(scene, table, cfg, rng)
    out = Path(args.out)
    write_scene(out, augmented)
    lines = report.lines()
    _write_lines(out / f"{scene.id}_report.txt", lines)
    for line in lines:
        print(line)
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    report = run_gradient_check(seed=args.seed, cases=args.cases)
    for line in report.lines():
        print(line)
    if not report.passed:
        for failure in report.failures[:10]:
            print(f"failure: {failure}", file=sys.stderr)
        return 2
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    # The ablation battery starts from its calibrated base, not the library defaults.
    base_cfg = build_train_config(
        args.config, _collect_overrides(args), base=ablation_base_config()
    )
    seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
    if not seeds:
        raise UsageError("need at least one seed")
    synth_cfg = SynthConfig(points_per_scene=args.points)

    def progress(run):
        print(f"miou_{run.variant}_seed{run.seed} = {run.miou:.6f}")

    result = run_ablation(
        base_cfg=base_cfg,
        synth_cfg=synth_cfg,
        seeds=seeds,
        n_train=args.train_scenes,
        n_test=args.test_scenes,
        severity=args.severity,
        progress=progress,
    )
    lines = result.table_lines()
    for line in lines:
        print(line)
    if args.out is not None:
        out = Path(args.out)
        _write_lines(out / "ablation.txt", lines)
        payload = [
            {
                "variant": r.variant,
                "seed": r.seed,
                "miou": r.miou,
                "tta_miou": r.tta_miou,
                "epoch_totals": r.epoch_totals,
            }
            for r in result.runs
        ]
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps(payload, indent=2) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geoseg",
        description="Domain-generalized point cloud segmentation, desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--points", type=int, default=600)
    p.add_argument("--extent", type=float, default=50.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--severity", type=float, default=0.0,
                   help="0 for clean scenes, >0 for shifted test scenes")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None, help="overrides out_dir")
    _add_train_key_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tta", action="store_true")
    p.add_argument("--out", default=None)
    p.add_argument("--json", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("augment", help="adversely augment one scene")
    p.add_argument("--data", required=True)
    p.add_argument("--stem", required=True)
    p.add_argument("--out", required=True)
    _add_train_key_flags(p)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train the component ladder and compare")
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--train_scenes", type=int, default=200)
    p.add_argument("--test_scenes", type=int, default=50)
    p.add_argument("--severity", type=float, default=1.5)
    p.add_argument("--points", type=int, default=600)
    _add_train_key_flags(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def run_cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (SceneFormatError, CheckpointFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NonFiniteGradientError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
