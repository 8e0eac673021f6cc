"""Command-line entry point: ``feataug <command> [options] [key=value ...]``.

Every command works inside one run directory (``--out``, else
``output_dir`` from the config, else ``$FEATAUG_OUTPUT_ROOT/run``, else
``./runs/run``) and writes a ``config.resolved`` copy beside its outputs.

Layout of a run directory::

    data/                 gen-data
    phase1/model/         phase1
    cache/                cache-features
    phase2/<arm>/last/    phase2 (also best/)
    eval/metrics_*.json   eval
    report/               report
    ablate/               ablate
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from feataug import augmentation as aug
from feataug.cam import cache_all, load_cache, params_fingerprint, save_cache
from feataug.config import (OUTPUT_ROOT_ENV, ExperimentConfig, apply_pairs, load_config,
                            parse_override, parse_text, to_text)
from feataug.data import load_dataset, save_dataset
from feataug.errors import ConfigError, DataError, FeatAugError
from feataug.nn import extract_features, init_params
from feataug.pipeline import (RunRecord, Standardizer, arm_config, dataset_from_config, evaluate,
                              evaluate_pooled, finetune_phase2, load_model, rng_for, save_model,
                              train_phase1, STREAM_INIT)
from feataug.report import Metrics, canonical_json, emit_report, feature_scatter
from feataug.tensor_io import atomic_write_bytes

logger = logging.getLogger("feataug")

ARMS = ("augmented", "no_aug")

# short names accepted by ``ablate --grid``
GRID_ALIASES = {
    "h_r": ("phase2.h_r_target",),
    "tau_s": ("phase2.tau_s",),
    "tau_g": ("phase2.tau_g",),
    "tau": ("phase2.tau_s", "phase2.tau_g"),
}


class Run:
    """Paths of one run directory."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.root = Path(cfg.output_dir)
        self.data = self.root / "data"
        self.phase1 = self.root / "phase1"
        self.phase1_dir = self.phase1 / "model"
        self.cache = self.root / "cache"
        self.phase2 = self.root / "phase2"
        self.eval = self.root / "eval"
        self.report = self.root / "report"
        self.ablate = self.root / "ablate"

    def write_config(self, directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        atomic_write_bytes(directory / "config.resolved", to_text(self.cfg).encode())

    def dataset(self):
        return load_dataset(self.data)

    def phase1_model(self):
        if not (self.phase1_dir / "index.txt").exists():
            raise DataError(f"no Phase-I checkpoint at {self.phase1_dir}; run `feataug phase1` first")
        return load_model(self.phase1_dir)

    def phase2_model(self, arm: str, which: str = "last"):
        d = self.phase2 / arm / which
        if not (d / "index.txt").exists():
            raise DataError(f"no Phase-II checkpoint at {d}; run `feataug phase2` first")
        return load_model(d)

    def cache_for(self, params):
        return load_cache(self.cache, params_fingerprint(params))


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(path, text.encode("utf-8"))


def _pooled_test(params, std, ds):
    _, pooled, _ = extract_features(params, std(ds.test_images))
    return pooled, ds.test_labels


# --- commands --------------------------------------------------------------------


def cmd_gen_data(run: Run, args) -> int:
    ds = dataset_from_config(run.cfg)
    save_dataset(run.data, ds)
    run.write_config(run.data)
    print(f"wrote {run.data} (train counts {ds.manifest.counts})")
    return 0


def cmd_phase1(run: Run, args) -> int:
    cfg = run.cfg
    ds = run.dataset()
    if ds.manifest.n_classes != cfg.data.n_classes:
        raise ConfigError(f"dataset has {ds.manifest.n_classes} classes, data.n_classes={cfg.data.n_classes}")
    std = Standardizer.fit(ds.train_images)
    test_x = std(ds.test_images)
    record = RunRecord()
    params, _ = train_phase1(std(ds.train_images), ds.train_labels, cfg,
                             eval_set=(test_x, ds.test_labels), checkpoint_dir=run.phase1_dir,
                             standardizer=std, record=record)
    save_model(run.phase1_dir, params, std)
    m = evaluate(params, test_x, ds.test_labels, ds.manifest.counts, "phase1")
    _write_text(run.phase1 / "history.jsonl", record.to_jsonl())
    _write_text(run.phase1 / "metrics.json", canonical_json(m.to_dict()))
    run.write_config(run.phase1)
    print(f"phase1: overall {m.overall:.4f}")
    return 0


def cmd_cache_features(run: Run, args) -> int:
    ds = run.dataset()
    params, std = run.phase1_model()
    p2 = run.cfg.phase2
    cache = cache_all(params, std(ds.train_images), ds.train_labels, p2.tau_s, p2.tau_g)
    save_cache(run.cache, cache)
    run.write_config(run.cache)
    print(f"cached {len(cache)} samples to {run.cache}")
    return 0


def _phase2_arm(run: Run, ds, params, std, cache, arm: str) -> Metrics:
    cfg = arm_config(run.cfg, arm)
    out = run.phase2 / arm
    out.mkdir(parents=True, exist_ok=True)
    record = RunRecord()
    dump = out / "batches.jsonl" if cfg.phase2.dump_batches else None
    eval_set = _pooled_test(params, std, ds)
    last, best, _ = finetune_phase2(params, cache, cfg, eval_set=eval_set, record=record,
                                    tag=f"phase2_{arm}", batch_dump=dump)
    save_model(out / "last", last, std)
    save_model(out / "best", best, std)
    m = evaluate_pooled(last, *eval_set, ds.manifest.counts, f"phase2_{arm}")
    _write_text(out / "history.jsonl", record.to_jsonl())
    _write_text(out / "metrics.json", canonical_json(m.to_dict()))
    return m


def cmd_phase2(run: Run, args) -> int:
    ds = run.dataset()
    params, std = run.phase1_model()
    cache = run.cache_for(params)
    p2 = run.cfg.phase2
    if (cache.tau_s, cache.tau_g) != (p2.tau_s, p2.tau_g):
        cache = cache.with_thresholds(p2.tau_s, p2.tau_g)
    arms = ARMS if args.arm == "both" else (args.arm,)
    for arm in arms:
        m = _phase2_arm(run, ds, params, std, cache, arm)
        print(f"phase2 {arm}: overall {m.overall:.4f} tail {m.group_accuracy(['few', 'medium'])}")
    run.write_config(run.phase2)
    return 0


def _resolve_checkpoint(run: Run, name: str, ds):
    if name == "init":
        params = init_params(run.cfg.data.n_classes, ds.train_images.shape[1],
                             run.cfg.model.channel_list(), rng_for(run.cfg.seed, STREAM_INIT))
        return params, Standardizer.fit(ds.train_images)
    if name == "phase1":
        return run.phase1_model()
    if name.startswith("phase2_"):
        arm, _, which = name[len("phase2_"):].partition(":")
        return run.phase2_model(arm, which or "last")
    path = Path(name)
    if not (path / "index.txt").exists():
        raise DataError(f"no checkpoint at {path}; expected init, phase1, phase2_<arm>[:best] or a path")
    return load_model(path)


def cmd_eval(run: Run, args) -> int:
    ds = run.dataset()
    params, std = _resolve_checkpoint(run, args.checkpoint, ds)
    tag = args.checkpoint if not Path(args.checkpoint).exists() else Path(args.checkpoint).name
    m = evaluate(params, std(ds.test_images), ds.test_labels, ds.manifest.counts, tag)
    safe = tag.replace(":", "_")
    _write_text(run.eval / f"metrics_{safe}.json", canonical_json(m.to_dict()))
    run.write_config(run.eval)
    groups = {g: (None if v is None else round(v, 4)) for g, v in m.groups.items()}
    print(f"{tag}: overall {m.overall:.4f} groups {groups}")
    return 0


def _curves(run: Run) -> dict[str, list[tuple[float, float]]]:
    curves = {}
    files = [run.phase1 / "history.jsonl"] + sorted(run.phase2.glob("*/history.jsonl"))
    offset = 0
    for f in files:
        if not f.exists():
            continue
        rec = RunRecord([json.loads(line) for line in f.read_text().splitlines() if line])
        for phase in dict.fromkeys(e["phase"] for e in rec.events):
            pts = rec.series(phase, "val_acc")
            if not pts:
                continue
            # Phase-I in epochs; Phase-II in hundreds of iterations after it
            if phase == "phase1":
                curves[phase] = [(s + 1, v) for s, v in pts]
                offset = max(offset, pts[-1][0] + 1)
            else:
                curves[phase] = [(offset + s / 100, v) for s, v in pts]
    return curves


def cmd_report(run: Run, args) -> int:
    ds = run.dataset()
    params, std = run.phase1_model()
    metrics = {"phase1": evaluate(params, std(ds.test_images), ds.test_labels,
                                  ds.manifest.counts, "phase1")}
    pooled = _pooled_test(params, std, ds)
    for arm in ARMS:
        if (run.phase2 / arm / "last" / "index.txt").exists():
            p2, _ = run.phase2_model(arm)
            metrics[f"phase2_{arm}"] = evaluate_pooled(p2, *pooled, ds.manifest.counts, f"phase2_{arm}")
    scatter = None
    extra = {"train_counts": list(ds.manifest.counts), "seed": run.cfg.seed}
    if (run.cache / "index.json").exists():
        cache = run.cache_for(params)
        scatter = feature_scatter(cache, max_per_class=50)
        split = aug.split_head_tail(ds.manifest.counts, run.cfg.phase2.h_r_target)
        extra["head_classes"] = split.head_class_ids
        extra["tail_classes"] = split.tail_class_ids
    written = emit_report(run.report, metrics, _curves(run), extra, scatter)
    run.write_config(run.report)
    for p in written:
        print(p)
    return 0


# --- ablation --------------------------------------------------------------------


def parse_grid(items: list[str]) -> list[dict[str, str]]:
    """``["h_r=0.7,0.9", "tau=0.3,0.5"]`` -> cartesian product of settings."""
    axes = []
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--grid {item!r} must look like key=v1,v2,...")
        key, values = item.split("=", 1)
        key = key.strip()
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not vals:
            raise ConfigError(f"--grid {item!r} has no values")
        if key not in GRID_ALIASES and not key.startswith("phase2."):
            raise ConfigError(f"--grid key {key!r} must be one of {sorted(GRID_ALIASES)} or phase2.*")
        axes.append((key, vals))
    settings = [{}]
    for key, vals in axes:
        settings = [dict(s, **{key: v}) for s in settings for v in vals]
    return settings


def _overrides(setting: dict[str, str]) -> list[str]:
    out = []
    for key, value in setting.items():
        for full in GRID_ALIASES.get(key, (key,)):
            out.append(f"{full}={value}")
    return out


def _cell_name(setting: dict[str, str]) -> str:
    return "_".join(f"{k.replace('phase2.', '')}-{v}" for k, v in setting.items()) or "base"


def _ablate_cell(config_text: str, setting: dict[str, str], arm: str) -> dict:
    cfg = apply_pairs(ExperimentConfig(), parse_text(config_text))
    cfg = apply_pairs(cfg, [parse_override(o) for o in _overrides(setting)]).validate()
    run = Run(cfg)
    ds = run.dataset()
    params, std = run.phase1_model()
    cache = run.cache_for(params).with_thresholds(cfg.phase2.tau_s, cfg.phase2.tau_g)
    split = aug.split_head_tail(ds.manifest.counts, cfg.phase2.h_r_target)
    cell = run.ablate / _cell_name(setting)
    cell.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(cell / "config.resolved", to_text(cfg).encode())
    arm_cfg = arm_config(cfg, arm)
    eval_set = _pooled_test(params, std, ds)
    last, _, _ = finetune_phase2(params, cache, arm_cfg, eval_set=None)
    m = evaluate_pooled(last, *eval_set, ds.manifest.counts, f"phase2_{arm}")
    _write_text(cell / "metrics.json", canonical_json(m.to_dict()))
    row = {"setting": _cell_name(setting), "h_r": cfg.phase2.h_r_target,
           "tau_s": cfg.phase2.tau_s, "tau_g": cfg.phase2.tau_g,
           "n_head": split.h, "n_tail": len(split.tail_class_ids),
           "head_ratio": round(split.head_ratio, 6), "overall": round(m.overall, 6)}
    for g in ("many", "medium", "few"):
        v = m.groups.get(g)
        row[g] = "n/a" if v is None else round(v, 6)
    tail = m.group_accuracy(["few", "medium"])
    row["tail"] = "n/a" if tail is None else round(tail, 6)
    return row


ABLATE_FIELDS = ["setting", "h_r", "tau_s", "tau_g", "n_head", "n_tail", "head_ratio",
                 "overall", "many", "medium", "few", "tail"]


def cmd_ablate(run: Run, args) -> int:
    settings = parse_grid(args.grid or ["h_r=0.7,0.8,0.9,0.95,0.99"])
    # fail early on missing prerequisites, before spawning cells
    params, _ = run.phase1_model()
    run.cache_for(params)
    run.dataset()
    text = to_text(run.cfg)
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            rows = list(pool.map(_ablate_cell, [text] * len(settings), settings,
                                 [args.arm] * len(settings)))
    else:
        rows = [_ablate_cell(text, s, args.arm) for s in settings]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=ABLATE_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    _write_text(run.ablate / "summary.csv", buf.getvalue())
    run.write_config(run.ablate)
    sys.stdout.write(buf.getvalue())
    return 0


# --- entry point -----------------------------------------------------------------


COMMANDS = {
    "gen-data": cmd_gen_data,
    "phase1": cmd_phase1,
    "cache-features": cmd_cache_features,
    "phase2": cmd_phase2,
    "eval": cmd_eval,
    "report": cmd_report,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--out", help="run directory (overrides output_dir)")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("overrides", nargs="*", metavar="key=value",
                        help="dotted config overrides, e.g. phase2.n_a=0")
    parser = argparse.ArgumentParser(prog="feataug", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "phase2":
            p.add_argument("--arm", choices=ARMS + ("both",), default="both")
        elif name == "eval":
            p.add_argument("--checkpoint", default="phase1",
                           help="init, phase1, phase2_<arm>[:best] or a checkpoint directory")
        elif name == "ablate":
            p.add_argument("--grid", action="append",
                           help="key=v1,v2,... with key in h_r, tau_s, tau_g, tau or phase2.*")
            p.add_argument("--arm", choices=ARMS, default="augmented")
            p.add_argument("--jobs", type=int, default=1, help="parallel cells")
    return parser


def resolve_config(args) -> ExperimentConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"output_dir={args.out}")
    cfg = load_config(args.config, overrides)
    if not cfg.output_dir:
        root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
        cfg.output_dir = str(Path(root) / "run")
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](Run(cfg), args)
    except FeatAugError as exc:
        print(f"feataug {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"feataug {args.command}: error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
