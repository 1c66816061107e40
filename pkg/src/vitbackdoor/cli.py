"""``vitbackdoor`` command line.

Run directory layout (under ``--out``, the config's ``output.dir``, or
``$VITBACKDOOR_OUT``)::

    config.json                 echo of the resolved config
    data/                       clean splits, poisoned training set, trigger.json
    provenance/                 ground-truth poison records (evaluation only)
    models/                     checkpoints
    defense/                    calibrated profile, calibration counts, verdicts
    reports/                    metric CSV/JSON files
    stamps/                     per-command completion stamps

Each command checks its prerequisites, and skips work whose stamp matches the
current config and input checksums. Failures print one JSON line
``{"error": <category>, "message": ...}`` on stderr and exit with the
category's code.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .config import ExperimentConfig, load_config, parse_config
from .datasets import gen_synthetic, load_cifar_binary, load_dataset, load_idx, save_dataset, split
from .defense import (DetectionProfile, calibrate, detect_batch, filter_retrain, no_clean_data_profile,
                      score_batch, verdicts_from_counts, write_verdicts_csv)
from .errors import BackdoorToolkitError, ConfigurationError, DependencyError
from .evalkit import (ASR_CONVENTION, MetricsRecord, asr_inputs, attack_success_rate, clean_accuracy,
                      detection_records, emit_report, summarize_sweep, sweep_drop, sweep_shuffle)
from .models import TrainConfig, build_model, load_checkpoint, save_checkpoint, train
from .patchproc import DROP, SHUFFLE, TransformSpec
from .poison import load_trigger, poison_dataset, save_records, save_trigger, trigger_from_dict

logger = logging.getLogger("vitbackdoor")

COMMANDS = ("poison", "train", "calibrate", "detect", "evaluate", "sweep", "filter-retrain")


# ----------------------------------------------------------------------------
# run directory helpers
# ----------------------------------------------------------------------------

class Run:
    def __init__(self, cfg: ExperimentConfig, root: Path, threads: int = 1, force: bool = False):
        self.cfg = cfg
        self.root = root
        self.threads = threads
        self.force = force

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def manifest(self, name: str) -> Path:
        return self.path("data", f"{name}.manifest.json")

    def checkpoint(self, variant: str) -> Path:
        return self.path("models", f"{variant}.ckpt")

    def require(self, path: Path, hint: str) -> Path:
        if not path.exists():
            raise DependencyError(f"missing prerequisite {path}; run `{hint}` first")
        return path

    def echo_config(self):
        self.root.mkdir(parents=True, exist_ok=True)
        self.path("config.json").write_text(self.cfg.to_json())

    def _stamp_key(self, command: str, args: dict, inputs) -> str:
        h = hashlib.sha256()
        h.update(json.dumps({"command": command, "config": self.cfg.to_dict(), "args": args},
                            sort_keys=True).encode())
        for p in inputs:
            h.update(Path(p).read_bytes())
        return h.hexdigest()

    def fresh(self, command: str, args: dict, inputs, outputs) -> bool:
        """True if a previous run of ``command`` with the same key produced every output."""
        if self.force:
            return False
        stamp = self.path("stamps", f"{command}.json")
        if not stamp.exists() or not all(Path(o).exists() for o in outputs):
            return False
        return json.loads(stamp.read_text()).get("key") == self._stamp_key(command, args, inputs)

    def stamp(self, command: str, args: dict, inputs):
        stamp = self.path("stamps", f"{command}.json")
        stamp.parent.mkdir(parents=True, exist_ok=True)
        stamp.write_text(json.dumps({"command": command, "key": self._stamp_key(command, args, inputs),
                                     "version": __version__}, indent=2) + "\n")


def _trigger_for(cfg: ExperimentConfig, image_shape):
    a = cfg.attack
    params = dict(a.params)
    if a.family == "blend" and "pattern" not in params:
        params.setdefault("pattern_seed", cfg.section_seed("attack"))
    return trigger_from_dict({"family": a.family, "target_label": a.target_label,
                              "image_shape": list(image_shape), "params": params})


def _ingest(cfg: ExperimentConfig):
    d = cfg.dataset
    seed = cfg.section_seed("dataset")
    for key, value in d.paths.items():
        for item in value if isinstance(value, list) else [value]:
            if not Path(item).exists():
                raise ConfigurationError(f"dataset.paths.{key}: {item} does not exist")
    if d.source == "synthetic":
        ds = gen_synthetic(d.num_classes, d.per_class, d.image_size, seed=seed, noise=d.noise)
    elif d.source == "idx":
        ds = load_idx(d.paths["images"], d.paths["labels"], num_classes=d.num_classes)
    elif d.source == "cifar":
        files = d.paths["files"]
        ds = load_cifar_binary(files if isinstance(files, list) else [files])
    else:
        ds, _ = load_dataset(d.paths["manifest"])
    if ds.num_classes != d.num_classes:
        raise ConfigurationError(f"dataset.num_classes: config says {d.num_classes}, data has {ds.num_classes}")
    return split(ds, d.splits, seed=seed)


def _profile(cfg: ExperimentConfig) -> DetectionProfile:
    d = cfg.defense
    return DetectionProfile(trials=d.trials,
                            drop=TransformSpec(DROP, grid=d.drop.grid, drop_count=d.drop.drop_count, fill=d.drop.fill),
                            shuffle=TransformSpec(SHUFFLE, grid=d.shuffle.grid),
                            n_d=d.n_d, n_s=d.n_s, seed=cfg.section_seed("defense"), early_exit=d.early_exit)


def _model_config(cfg: ExperimentConfig, train_set) -> tuple[str, dict]:
    m = cfg.model
    mean, std = train_set.channel_stats()
    common = {"image_shape": list(train_set.image_shape), "num_classes": train_set.num_classes,
              "input_mean": mean, "input_std": std, "seed": cfg.section_seed("model")}
    if m.kind == "vit":
        return "vit", {**common, "patch_size": m.patch_size, "embed_dim": m.embed_dim, "depth": m.depth,
                       "heads": m.heads, "mlp_ratio": m.mlp_ratio}
    return "cnn", {**common, "channels": list(m.channels), "kernel_size": m.kernel_size}


def _train_config(cfg: ExperimentConfig, epochs: int | None = None) -> TrainConfig:
    t = cfg.training
    return TrainConfig(epochs=t.epochs if epochs is None else epochs, batch_size=t.batch_size, lr=t.lr,
                       beta1=t.beta1, beta2=t.beta2, eps=t.eps, weight_decay=t.weight_decay, schedule=t.schedule,
                       warmup_epochs=t.warmup_epochs, seed=cfg.section_seed("training"))


def _write_csv(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _emit(run: Run, records, name: str) -> Path:
    fmt = run.cfg.output.report_format
    path = emit_report(records, run.path("reports", f"{name}.{fmt}"), fmt, config=run.cfg.to_dict())
    meta = {"asr_convention": ASR_CONVENTION, "config_sha256": run.cfg.digest(), "version": __version__}
    run.path("reports", f"{name}.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def _variant(run: Run, requested: str | None) -> str:
    if requested:
        return requested
    return "poisoned" if run.cfg.attack is not None else "benign"


def _training_set(run: Run, variant: str):
    if variant == "poisoned":
        if run.cfg.attack is None:
            raise ConfigurationError("attack: a poisoned model needs an attack section")
        return run.require(run.manifest("train_poisoned"), "vitbackdoor poison")
    return run.require(run.manifest("train"), "vitbackdoor poison")


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def cmd_poison(run: Run, args) -> int:
    cfg = run.cfg
    outputs = [run.manifest(n) for n in ("train", "val", "test")]
    if cfg.attack is not None:
        outputs += [run.manifest("train_poisoned"), run.path("data", "trigger.json"),
                    run.path("provenance", "poison_records.json")]
    if run.fresh("poison", {}, [], outputs):
        logger.info("poison: up to date")
        return 0
    seed = cfg.section_seed("dataset")
    tr, va, te = _ingest(cfg)
    for part in (tr, va, te):
        save_dataset(part, run.path("data"), part.split, source=cfg.dataset.source, seed=seed)
    if cfg.attack is not None:
        trigger = _trigger_for(cfg, tr.image_shape)
        poisoned, records = poison_dataset(tr, trigger, cfg.attack.rate, seed=cfg.section_seed("attack"))
        mean, std = tr.channel_stats()
        save_dataset(poisoned.as_labeled(), run.path("data"), "train_poisoned", source=cfg.dataset.source,
                     seed=seed, normalization={"mean": mean, "std": std},
                     extra={"attack": cfg.attack.family, "rate": cfg.attack.rate})
        save_trigger(trigger, run.path("data", "trigger.json"))
        run.path("provenance").mkdir(parents=True, exist_ok=True)
        save_records(records, run.path("provenance", "poison_records.json"))
        logger.info("poison: %d of %d training samples poisoned", len(records), len(tr))
    run.stamp("poison", {}, [])
    return 0


def cmd_train(run: Run, args) -> int:
    variant = _variant(run, args.variant)
    manifest = _training_set(run, variant)
    val_manifest = run.require(run.manifest("val"), "vitbackdoor poison")
    ckpt = run.checkpoint(variant)
    if run.fresh(f"train-{variant}", {}, [manifest, val_manifest], [ckpt]):
        logger.info("train: %s model up to date", variant)
        return 0
    data, _ = load_dataset(manifest)
    clean_train, _ = load_dataset(run.manifest("train"))
    val, _ = load_dataset(val_manifest)
    asr_view = None
    if run.cfg.attack is not None and len(val):
        trigger = load_trigger(run.require(run.path("data", "trigger.json"), "vitbackdoor poison"))
        with contextlib.suppress(BackdoorToolkitError):
            images, _ = asr_inputs(val, trigger)
            asr_view = (images, trigger.target_label)
    kind, mcfg = _model_config(run.cfg, clean_train)
    model = build_model(kind, mcfg)
    result = train(model, data, _train_config(run.cfg), val=val if len(val) else None, asr_view=asr_view)
    history = [m.__dict__ for m in result.history]
    tcfg = _train_config(run.cfg)
    meta = {"variant": variant, "config_sha256": run.cfg.digest(), "epochs": tcfg.epochs, "seed": tcfg.seed,
            "dataset_sha256": hashlib.sha256(manifest.read_bytes()).hexdigest(), "history": history}
    save_checkpoint(model, ckpt, meta=meta)
    run.stamp(f"train-{variant}", {}, [manifest, val_manifest])
    return 0


def _load_model(run: Run, variant: str):
    model, _ = load_checkpoint(run.require(run.checkpoint(variant), f"vitbackdoor train --variant {variant}"))
    return model


def _calibration_images(run: Run, val):
    return val.images[:run.cfg.defense.calibration_size], val.ids[:run.cfg.defense.calibration_size]


def cmd_calibrate(run: Run, args) -> int:
    variant = _variant(run, args.variant)
    ckpt = run.require(run.checkpoint(variant), f"vitbackdoor train --variant {variant}")
    val_manifest = run.require(run.manifest("val"), "vitbackdoor poison")
    out = run.path("defense", f"profile.{variant}.json")
    counts_csv = run.path("defense", f"calibration.{variant}.csv")
    if run.fresh(f"calibrate-{variant}", {}, [ckpt, val_manifest], [out, counts_csv]):
        logger.info("calibrate: up to date")
        return 0
    model = _load_model(run, variant)
    val, _ = load_dataset(val_manifest)
    images, ids = _calibration_images(run, val)
    profile, counts = calibrate(model, images, _profile(run.cfg), ids=ids, threads=run.threads)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(profile.to_dict(), indent=2, sort_keys=True) + "\n")
    _write_csv(counts_csv, ("id", "F_d", "F_s"), [(c.sample_id, c.f_d, c.f_s) for c in counts])
    logger.info("calibrate: k_d=%d k_s=%d from %d clean samples", profile.k_d, profile.k_s, len(counts))
    run.stamp(f"calibrate-{variant}", {}, [ckpt, val_manifest])
    return 0


def _load_profile(run: Run, variant: str) -> DetectionProfile:
    path = run.require(run.path("defense", f"profile.{variant}.json"), f"vitbackdoor calibrate --variant {variant}")
    return DetectionProfile.from_dict(json.loads(path.read_text()))


def cmd_detect(run: Run, args) -> int:
    variant = _variant(run, args.variant)
    ckpt = run.require(run.checkpoint(variant), f"vitbackdoor train --variant {variant}")
    inputs = Path(args.inputs) if args.inputs else run.manifest("test")
    run.require(inputs, "vitbackdoor poison")
    profile_path = run.path("defense", f"profile.{variant}.json")
    if args.no_clean_data:
        profile = no_clean_data_profile(run.cfg.defense.trials, _profile(run.cfg))
        dep = []
    else:
        profile = _load_profile(run, variant)
        dep = [profile_path]
    out = Path(args.verdicts) if args.verdicts else run.path("defense", f"verdicts.{variant}.csv")
    key = {"inputs": str(inputs), "no_clean_data": bool(args.no_clean_data), "verdicts": str(out)}
    if run.fresh(f"detect-{variant}", key, [ckpt, inputs, *dep], [out]):
        logger.info("detect: up to date")
        return 0
    model = _load_model(run, variant)
    data, _ = load_dataset(inputs)
    verdicts, _ = detect_batch(model, data.images, data.ids, profile, threads=run.threads)
    write_verdicts_csv(verdicts, out)
    flagged = sum(v.flagged for v in verdicts)
    logger.info("detect: flagged %d of %d samples", flagged, len(verdicts))
    run.stamp(f"detect-{variant}", key, [ckpt, inputs, *dep])
    return 0


def _evaluate_variant(run: Run, variant: str, test, trigger) -> list[MetricsRecord]:
    model = _load_model(run, variant)
    attack = run.cfg.attack.family if run.cfg.attack is not None else "none"
    exp = f"seed{run.cfg.seed}"
    acc = clean_accuracy(model, test)
    asr = attack_success_rate(model, test, trigger) if trigger is not None else None
    records = [MetricsRecord(exp, variant, attack, "none", "", run.cfg.seed, acc, asr, n_clean=len(test),
                             n_backdoor=0 if trigger is None else int((test.labels != trigger.target_label).sum()))]
    profile_path = run.path("defense", f"profile.{variant}.json")
    if profile_path.exists():
        profile = _load_profile(run, variant)
        clean_counts = score_batch(model, test.images, test.ids, profile, threads=run.threads)
        bd_counts = []
        if trigger is not None:
            bd_images, idx = asr_inputs(test, trigger)
            bd_counts = score_batch(model, bd_images, test.ids[idx], profile, threads=run.threads)
        records += detection_records(exp, variant, attack, clean_counts, verdicts_from_counts(clean_counts, profile),
                                     bd_counts, verdicts_from_counts(bd_counts, profile), seed=run.cfg.seed,
                                     clean_acc=acc, asr=asr)
    return records


def cmd_evaluate(run: Run, args) -> int:
    test_manifest = run.require(run.manifest("test"), "vitbackdoor poison")
    variants = [v for v in ("benign", "poisoned") if run.checkpoint(v).exists()]
    if not variants:
        raise DependencyError(f"no checkpoints under {run.path('models')}; run `vitbackdoor train` first")
    trigger_path = run.path("data", "trigger.json")
    inputs = [test_manifest] + [run.checkpoint(v) for v in variants]
    inputs += [p for v in variants if (p := run.path("defense", f"profile.{v}.json")).exists()]
    if run.cfg.attack is not None:
        inputs.append(run.require(trigger_path, "vitbackdoor poison"))
    out = run.path("reports", f"report.{run.cfg.output.report_format}")
    if run.fresh("evaluate", {"variants": variants}, inputs, [out]):
        logger.info("evaluate: up to date")
        return 0
    test, _ = load_dataset(test_manifest)
    trigger = load_trigger(trigger_path) if run.cfg.attack is not None else None
    records = []
    for v in variants:
        records += _evaluate_variant(run, v, test, trigger)
    _emit(run, records, "report")
    run.stamp("evaluate", {"variants": variants}, inputs)
    return 0


def cmd_sweep(run: Run, args) -> int:
    variant = _variant(run, args.variant)
    ckpt = run.require(run.checkpoint(variant), f"vitbackdoor train --variant {variant}")
    test_manifest = run.require(run.manifest("test"), "vitbackdoor poison")
    inputs = [ckpt, test_manifest]
    if run.cfg.attack is not None:
        inputs.append(run.require(run.path("data", "trigger.json"), "vitbackdoor poison"))
    name = f"sweep.{variant}"
    out = run.path("reports", f"{name}.{run.cfg.output.report_format}")
    if run.fresh(f"sweep-{variant}", {}, inputs, [out]):
        logger.info("sweep: up to date")
        return 0
    model = _load_model(run, variant)
    test, _ = load_dataset(test_manifest)
    test = test.subset(np.arange(min(len(test), run.cfg.sweep.max_samples)))
    trigger = load_trigger(run.path("data", "trigger.json")) if run.cfg.attack is not None else None
    s = run.cfg.sweep
    attack = run.cfg.attack.family if run.cfg.attack is not None else "none"
    common = dict(seeds=s.seeds, trials=s.trials, model_tag=variant, attack_tag=attack, threads=run.threads)
    records = sweep_drop(model, test, trigger, s.drop_grid, s.m_values, experiment_id="drop", **common)
    records += sweep_shuffle(model, test, trigger, s.shuffle_grids, experiment_id="shuffle", **common)
    _emit(run, records, name)
    _write_csv(run.path("reports", f"{name}.summary.csv"),
               ("transform", "param", "n_seeds", "clean_mean", "clean_var", "asr_mean", "asr_var"),
               [[r.transform, r.param, r.n_seeds, repr(r.clean_mean), repr(r.clean_var),
                 "" if r.asr_mean is None else repr(r.asr_mean), "" if r.asr_var is None else repr(r.asr_var)]
                for r in summarize_sweep(records)])
    run.stamp(f"sweep-{variant}", {}, inputs)
    return 0


def cmd_filter_retrain(run: Run, args) -> int:
    cfg = run.cfg
    variant = "poisoned" if cfg.attack is not None else "benign"
    manifest = _training_set(run, variant)
    val_manifest = run.require(run.manifest("val"), "vitbackdoor poison")
    test_manifest = run.require(run.manifest("test"), "vitbackdoor poison")
    f = cfg.defense.filter
    inputs = [manifest, val_manifest, test_manifest]
    out_ckpt = run.checkpoint("retrained")
    out_report = run.path("reports", f"filter.{cfg.output.report_format}")
    if run.fresh("filter-retrain", {}, inputs, [out_ckpt, out_report]):
        logger.info("filter-retrain: up to date")
        return 0
    data, _ = load_dataset(manifest)
    clean_train, _ = load_dataset(run.manifest("train"))
    val, _ = load_dataset(val_manifest)
    test, _ = load_dataset(test_manifest)
    base = replace(_profile(cfg), trials=f.trials)
    if f.profile == "no-clean":
        profile, calib = no_clean_data_profile(f.trials, base), None
    else:
        profile, calib = base, _calibration_images(run, val)[0]
    ground_truth = None
    records_path = run.path("provenance", "poison_records.json")
    if cfg.attack is not None and records_path.exists():
        # evaluation only: feeds the removal report, never the filter
        poisoned_ids = {r["sample_id"] for r in json.loads(records_path.read_text())["records"]}
        ground_truth = np.isin(data.ids, list(poisoned_ids))
    kind, mcfg = _model_config(cfg, clean_train)
    retrain_epochs = cfg.training.epochs if f.retrain_epochs is None else f.retrain_epochs
    result = filter_retrain(data, lambda: build_model(kind, mcfg),
                            lambda m, ds, ep: train(m, ds, _train_config(cfg, ep)),
                            f.bootstrap_epochs, retrain_epochs, profile, threads=run.threads,
                            ground_truth=ground_truth, calibration_images=calib)
    save_checkpoint(result.model, out_ckpt, meta={"variant": "retrained", "config_sha256": cfg.digest()})
    save_dataset(result.filtered, run.path("data"), "train_filtered", source="filter-retrain")
    write_verdicts_csv(result.verdicts, run.path("defense", "verdicts.filter.csv"))
    run.path("reports").mkdir(parents=True, exist_ok=True)
    run.path("reports", "removal.json").write_text(json.dumps(result.report.to_dict(), indent=2) + "\n")
    trigger = load_trigger(run.path("data", "trigger.json")) if cfg.attack is not None else None
    attack = cfg.attack.family if cfg.attack is not None else "none"
    acc = clean_accuracy(result.model, test)
    asr = attack_success_rate(result.model, test, trigger) if trigger is not None else None
    n_bd = 0 if trigger is None else int((test.labels != trigger.target_label).sum())
    _emit(run, [MetricsRecord(f"seed{cfg.seed}", "retrained", attack, "filter", f.profile, cfg.seed, acc, asr,
                              n_clean=len(test), n_backdoor=n_bd)], "filter")
    logger.info("filter-retrain: removed %d of %d samples; retrained clean acc %.4f", result.report.flagged,
                result.report.total, acc)
    run.stamp("filter-retrain", {}, inputs)
    return 0


HANDLERS = {"poison": cmd_poison, "train": cmd_train, "calibrate": cmd_calibrate, "detect": cmd_detect,
            "evaluate": cmd_evaluate, "sweep": cmd_sweep, "filter-retrain": cmd_filter_retrain}


# ----------------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON); defaults apply when omitted")
    common.add_argument("--seed", type=int, help="master seed, overrides the config")
    common.add_argument("--threads", type=int, default=1, help="worker threads; 1 is bitwise deterministic")
    common.add_argument("--out", help="run directory (default: output.dir, then $VITBACKDOOR_OUT, then ./runs)")
    common.add_argument("--force", action="store_true", help="redo work even if its stamp is current")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="vitbackdoor", description="Backdoor poisoning and patch-based detection.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("train", "calibrate", "detect", "sweep"):
            p.add_argument("--variant", choices=("poisoned", "benign"),
                           help="which model to use (default: poisoned when an attack is configured)")
        if name == "detect":
            p.add_argument("--inputs", help="dataset manifest to screen (default: the test split)")
            p.add_argument("--verdicts", help="where to write the verdict CSV")
            p.add_argument("--no-clean-data", action="store_true", help="use k_d = 0, k_s = T instead of a profile")
    return parser


def _resolve(args) -> Run:
    cfg = load_config(args.config) if args.config else parse_config({})
    if args.seed is not None:
        cfg = parse_config({**cfg.to_dict(), "seed": args.seed})
    if args.threads < 1:
        raise ConfigurationError(f"--threads must be >= 1, got {args.threads}")
    return Run(cfg, cfg.output_dir(args.out), threads=args.threads, force=args.force)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = _resolve(args)
        run.echo_config()
        with threadpool_limits(limits=run.threads):
            return HANDLERS[args.command](run, args)
    except BackdoorToolkitError as exc:
        print(json.dumps({"error": exc.category, "message": str(exc)}), file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
