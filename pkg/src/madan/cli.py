"""``madan`` command line: gen-data, train, eval, translate, ablate.

Configuration is a flat ``key=value`` file (``--config``) overridden by
``--key value`` flags; every key is resolved before a command runs and
unknown keys are rejected.
"""
from __future__ import annotations

import argparse
import logging
import statistics
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .datagen import (
    CLASS_NAMES,
    IntegrityError,
    generate_dataset,
    load_arrays,
    read_kv,
    sample_domain_spec,
    to_uint8,
    write_ppm,
)
from .metrics import iou, report, report_header
from .trainer import (
    ABLATION_FLAGS,
    ABLATION_ROWS,
    TrainConfig,
    TrainingError,
    evaluate,
    load_state,
    load_train_data,
    run_madan,
    train_source_only,
)

log = logging.getLogger("madan")

DATA_DEFAULTS = {
    "n_source": "200",
    "n_target": "200",
    "n_eval": "100",
    "source_shifts": "auto",
    "target_shift": "0.6",
    "threads": "1",
}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
KNOWN_KEYS = _TRAIN_KEYS | set(DATA_DEFAULTS)


class ConfigError(Exception):
    pass


def default_config() -> dict[str, str]:
    cfg = TrainConfig().to_dict()
    cfg.update(DATA_DEFAULTS)
    return cfg


def parse_overrides(tokens: list[str]) -> dict[str, str]:
    """``--some-key value`` / ``--some-key=value`` pairs to {some_key: value}."""
    out = {}
    k = 0
    while k < len(tokens):
        tok = tokens[k]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            k += 1
        else:
            if k + 1 >= len(tokens):
                raise ConfigError(f"missing value for --{key}")
            value = tokens[k + 1]
            k += 2
        out[key.replace("-", "_")] = value
    return out


def resolve_config(config_path=None, overrides: dict[str, str] | None = None) -> dict[str, str]:
    """Merge defaults, the config file and CLI overrides; every key gets a value."""
    explicit: dict[str, str] = {}
    if config_path is not None:
        try:
            explicit.update(read_kv(config_path))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
    explicit.update(overrides or {})
    unknown = sorted(set(explicit) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    cfg = default_config()
    cfg.update(explicit)
    # freeze windows keep their 5/10 defaults but never exceed the epoch count
    epochs = int(cfg["epochs"])
    for key in ("sad_freeze_epochs", "ccd_freeze_epochs"):
        if key not in explicit and int(cfg[key]) > epochs:
            cfg[key] = str(epochs)
    if cfg["source_shifts"] == "auto":
        M = int(cfg["num_sources"])
        shifts = np.linspace(0.4, 0.8, M) if M > 1 else np.array([0.4])
        cfg["source_shifts"] = ",".join(f"{s:.6g}" for s in shifts)
    # ablation flags show up as zero weights in the resolved config
    for flag in filter(None, cfg["ablate"].split(",")):
        if flag not in ABLATION_FLAGS:
            raise ConfigError(f"unknown ablation flag {flag!r}; choose from {', '.join(ABLATION_FLAGS)}")
        cfg[ABLATION_FLAGS[flag]] = "0.0"
    if len(cfg["source_shifts"].split(",")) != int(cfg["num_sources"]):
        raise ConfigError("source_shifts must list one shift per source")
    try:
        train_config(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def train_config(cfg: dict[str, str]) -> TrainConfig:
    return TrainConfig.from_dict({k: v for k, v in cfg.items() if k in _TRAIN_KEYS})


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="flat key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--sources", type=int, help="number of source domains")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="madan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render source/target datasets")
    _common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    p = sub.add_parser("train", help="run the staged training procedure")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="gen-data output directory")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--ablate", help="comma-separated: " + ",".join(ABLATION_FLAGS))
    p.add_argument("--resume", type=Path, help="training checkpoint to continue from")
    p.add_argument("--max-epochs", type=int, help="stop after this many epochs (resume later)")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("eval", help="per-class IoU and mIoU of a checkpoint's segmenter")
    p.add_argument("--checkpoint", type=Path, required=True, action="append")
    p.add_argument("--data", type=Path, required=True, help="labeled dataset directory")
    p.add_argument("--out", type=Path, default=Path("eval.csv"))
    p.add_argument("--classes", help="comma-separated class names expected in the checkpoint")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("translate", help="write source | translated | round-trip image grids")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="gen-data output directory")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--offset", type=int, default=0, help="first sample index to translate")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("ablate", help="component ablation sweep")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--rows", default="all", help="comma-separated row names, or 'all'")
    p.add_argument("--source-only", action="store_true", help="also run the source-combined baseline")
    p.add_argument("--force", action="store_true")
    return parser


def _resolve(args, extra) -> dict[str, str]:
    overrides = parse_overrides(extra)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "sources", None) is not None:
        overrides["num_sources"] = str(args.sources)
    if getattr(args, "ablate", None):
        overrides["ablate"] = args.ablate
    return resolve_config(getattr(args, "config", None), overrides)


def _prepare_out(path: Path, force: bool):
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(f"{path} exists and is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)


def cmd_gen_data(args, extra) -> int:
    cfg = _resolve(args, extra)
    _prepare_out(args.out, args.force)
    seed = int(cfg["seed"])
    shifts = [float(s) for s in cfg["source_shifts"].split(",")]
    n_src, n_tgt, n_eval = int(cfg["n_source"]), int(cfg["n_target"]), int(cfg["n_eval"])
    manifests = []
    for i, shift in enumerate(shifts):
        spec = sample_domain_spec(f"source{i}", seed, shift)
        manifests.append((f"source{i}", generate_dataset(spec, n_src, args.out / f"source{i}")))
    tspec = sample_domain_spec("target", seed, float(cfg["target_shift"]))
    manifests.append(("target", generate_dataset(tspec, n_tgt, args.out / "target", labeled=False)))
    if n_eval > 0:
        # held-out labeled split of the target domain, used only for evaluation
        manifests.append(("target_eval", generate_dataset(tspec, n_eval, args.out / "target_eval",
                                                          labeled=True, seed_offset=n_tgt)))
    (args.out / "config.resolved.txt").write_text("".join(f"{k}={v}\n" for k, v in cfg.items()), encoding="utf-8")
    for name, m in manifests:
        print(f"{name}: domain_id={m.domain_id} n={m.n} labeled={int(m.labeled)} spec_hash={m.spec_hash[:16]}")
    return 0


def cmd_train(args, extra) -> int:
    cfg = _resolve(args, extra)
    torch.set_num_threads(int(cfg["threads"]))
    config = train_config(cfg)
    resume = None
    if args.resume is not None:
        resume = load_state(args.resume)
        if resume.config != config:
            # the checkpoint's configuration wins; only the stopping point may differ
            config = resume.config
    elif not args.force and args.out.exists() and (args.out / "metrics.csv").exists():
        raise ConfigError(f"{args.out} already holds a run (use --force or --resume)")
    data = load_train_data(args.data, config.num_sources)
    _, history, state = run_madan(config, data, out_dir=args.out, resume=resume, max_epochs=args.max_epochs)
    resolved = args.out / "config.resolved.txt"
    with resolved.open("a", encoding="utf-8") as fh:
        for key in DATA_DEFAULTS:
            fh.write(f"{key}={cfg[key]}\n")
    status = "finished" if state.finished else f"stopped at phase {state.phase} epoch {state.epoch}"
    print(f"train {status}: {len(history)} epochs logged, best target mIoU {state.best_miou:.4f}")
    return 0


def cmd_eval(args, extra) -> int:
    if extra:
        raise ConfigError(f"unexpected arguments {extra}")
    x, y = load_arrays(args.data, with_labels=True)
    rows = []
    for path in args.checkpoint:
        bundle, header, _ = ckpt.load_bundle(path)
        names = header.get("classes", ",".join(CLASS_NAMES[: bundle.config.num_classes])).split(",")
        if args.classes is not None and args.classes.split(",") != names:
            raise ConfigError(f"--classes {args.classes} does not match checkpoint classes {','.join(names)}")
        cm = evaluate(bundle.seg, torch.from_numpy(x), torch.from_numpy(y), bundle.config.num_classes)
        row = report(cm, names)
        rows.append((names, row))
        print(f"{path}: mIoU={iou(cm)[1]:.4f}")
        print(report_header(names))
        print(row)
    new = not args.out.exists() or args.out.stat().st_size == 0
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with args.out.open("a", encoding="utf-8") as fh:
        if new:
            fh.write(report_header(rows[0][0]) + "\n")
        for _, row in rows:
            fh.write(row + "\n")
    return 0


@torch.no_grad()
def cmd_translate(args, extra) -> int:
    if extra:
        raise ConfigError(f"unexpected arguments {extra}")
    bundle, _, _ = ckpt.load_bundle(args.checkpoint)
    bundle.eval()
    args.out.mkdir(parents=True, exist_ok=True)
    l1s = []
    for i in range(bundle.num_sources):
        x, _ = load_arrays(args.data / f"source{i}", with_labels=False)
        n = args.n
        available = len(x) - args.offset
        if n > available:
            log.warning("source%d: only %d images available, clamping n=%d", i, available, n)
            n = available
        xb = torch.from_numpy(x[args.offset:args.offset + n])
        adapted = bundle.g_st[i](xb)
        back = bundle.g_ts[i](adapted)
        for k in range(n):
            panels = [to_uint8(t[k].numpy()) for t in (xb, adapted, back)]
            write_ppm(args.out / f"source{i}_{args.offset + k:04d}.ppm", np.concatenate(panels, axis=1))
        if n:
            l1s.append(float((back - xb).abs().mean()))
            print(f"source{i}: {n} grids, round-trip L1 {l1s[-1]:.4f}")
    if l1s:
        (args.out / "roundtrip_l1.txt").write_text(f"{sum(l1s) / len(l1s)!r}\n", encoding="utf-8")
    return 0


def cmd_ablate(args, extra) -> int:
    cfg = _resolve(args, extra)
    torch.set_num_threads(int(cfg["threads"]))
    _prepare_out(args.out, args.force)
    base = train_config(cfg)
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = list(ABLATION_ROWS) if args.rows == "all" else args.rows.split(",")
    bad = [r for r in rows if r not in ABLATION_ROWS]
    if bad:
        raise ConfigError(f"unknown ablation rows {bad}; choose from {list(ABLATION_ROWS)}")
    data = load_train_data(args.data, base.num_sources)
    results: dict[str, list[float]] = {}
    if args.source_only:
        results["source-only"] = [
            train_source_only(replace(base, seed=s), data)[0] for s in seeds
        ]
    for row in rows:
        results[row] = []
        for s in seeds:
            config = replace(base, seed=s, ablate=tuple(ABLATION_ROWS[row]))
            run_dir = args.out / row.replace("+", "plus_").strip("_") / f"seed{s}"
            _, _, state = run_madan(config, data, out_dir=run_dir)
            results[row].append(state.best_miou)
            print(f"{row} seed {s}: target mIoU {state.best_miou:.4f}", flush=True)
    lines = ["config," + ",".join(f"seed{s}" for s in seeds) + ",median"]
    for row, vals in results.items():
        lines.append(",".join([row] + [f"{v:.4f}" for v in vals] + [f"{statistics.median(vals):.4f}"]))
    (args.out / "ablation.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "translate": cmd_translate,
    "ablate": cmd_ablate,
}

_COMPONENT = {
    ConfigError: "config",
    IntegrityError: "dataset",
    ckpt.CheckpointError: "checkpoint",
    TrainingError: "trainer",
}


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, extra)
    except tuple(_COMPONENT) as exc:
        component = next(v for k, v in _COMPONENT.items() if isinstance(exc, k))
        print(f"madan {args.command}: {component} error: {exc}", file=sys.stderr)
    except (ValueError, OSError) as exc:
        print(f"madan {args.command}: error: {exc}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
