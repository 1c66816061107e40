"""Metrics, robustness sweeps and report files.

Conventions used by every report:

* ASR excludes test samples whose true label already equals the trigger target;
  they never enter the denominator.
* ``tpr`` is ``None`` when a row has no poisoned samples and ``tnr`` is ``None``
  when it has no clean ones. Absent is not zero.
* Flip-count columns (``fd_*``/``fs_*``) summarize the samples counted in the row:
  detection reports emit one row per group (``param`` = ``clean`` or
  ``backdoor``); sweep rows leave them empty.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .defense import FlipCounts, Verdict, predict_labels
from .errors import ConfigurationError, FormatError, InputError
from .patchproc import DROP, SHUFFLE, TransformSpec, apply_descriptors, draw_descriptors
from .poison import TriggerSpec, apply_trigger

REPORT_COLUMNS = ("experiment_id", "model", "attack", "transform", "param", "seed", "clean_acc", "asr",
                  "tpr", "tnr", "n_clean", "n_backdoor", "fd_mean", "fd_var", "fs_mean", "fs_var")
REPORT_VERSION = 1
ASR_CONVENTION = "target-class samples excluded from the ASR denominator"

_INT_COLUMNS = {"seed", "n_clean", "n_backdoor"}
_RATE_COLUMNS = {"clean_acc", "asr", "tpr", "tnr"}
_FLOAT_COLUMNS = _RATE_COLUMNS | {"fd_mean", "fd_var", "fs_mean", "fs_var"}


@dataclass
class MetricsRecord:
    experiment_id: str
    model: str
    attack: str
    transform: str = "none"
    param: str = ""
    seed: int = 0
    clean_acc: float | None = None
    asr: float | None = None
    tpr: float | None = None
    tnr: float | None = None
    n_clean: int = 0
    n_backdoor: int = 0
    fd_mean: float | None = None
    fd_var: float | None = None
    fs_mean: float | None = None
    fs_var: float | None = None

    def __post_init__(self):
        self.param = str(self.param)
        for name in _RATE_COLUMNS:
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise InputError(f"{name}={v} is not a rate in [0, 1]")
        if self.n_clean < 0 or self.n_backdoor < 0:
            raise InputError("sample counts must be non-negative")

    def key(self):
        return (self.experiment_id, self.model, self.attack, self.transform, _param_key(self.param), self.seed)

    def to_row(self) -> list[str]:
        return [_fmt(getattr(self, c)) for c in REPORT_COLUMNS]

    @classmethod
    def from_row(cls, row: dict) -> "MetricsRecord":
        kw = {}
        for c in REPORT_COLUMNS:
            raw = row[c]
            if c in _INT_COLUMNS:
                kw[c] = int(raw)
            elif c in _FLOAT_COLUMNS:
                kw[c] = None if raw == "" else float(raw)
            else:
                kw[c] = raw
        return cls(**kw)


def _param_key(p: str):
    try:
        return (0, float(p), p)
    except ValueError:
        return (1, 0.0, p)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ----------------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------------

def clean_accuracy(model, dataset) -> float:
    """Fraction of ``dataset`` predicted correctly."""
    if len(dataset.labels) == 0:
        raise InputError("clean accuracy needs a non-empty test set")
    pred = predict_labels(model, dataset.images)
    return float(np.mean(pred == dataset.labels))


def asr_inputs(dataset, trigger: TriggerSpec) -> tuple[np.ndarray, np.ndarray]:
    """Triggered copies of the non-target test images and their source indices."""
    keep = np.flatnonzero(dataset.labels != trigger.target_label)
    if keep.size == 0:
        raise InputError(f"every test sample already has the target label {trigger.target_label}")
    return apply_trigger(dataset.images[keep], trigger), keep


def attack_success_rate(model, dataset, trigger: TriggerSpec) -> float:
    """Share of triggered non-target images classified as the target label."""
    images, _ = asr_inputs(dataset, trigger)
    pred = predict_labels(model, images)
    return float(np.mean(pred == trigger.target_label))


def tpr_tnr(verdicts: Sequence, poisoned: Sequence[bool]) -> tuple[float | None, float | None]:
    """Detection rate over poisoned samples and pass rate over clean ones.

    ``verdicts`` holds :class:`Verdict` objects or plain booleans (True = flagged).
    """
    flagged = np.array([v.flagged if isinstance(v, Verdict) else bool(v) for v in verdicts], dtype=bool)
    truth = np.asarray(poisoned, dtype=bool)
    if flagged.shape != truth.shape:
        raise InputError(f"{flagged.size} verdicts but {truth.size} ground-truth flags")
    n_pos, n_neg = int(truth.sum()), int((~truth).sum())
    tpr = float((flagged & truth).sum() / n_pos) if n_pos else None
    tnr = float((~flagged & ~truth).sum() / n_neg) if n_neg else None
    return tpr, tnr


def _moments(values) -> tuple[float | None, float | None]:
    if len(values) == 0:
        return None, None
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.var())


def detection_records(experiment_id: str, model_tag: str, attack_tag: str,
                      clean: Sequence[FlipCounts], clean_verdicts: Sequence[Verdict],
                      backdoor: Sequence[FlipCounts] = (), backdoor_verdicts: Sequence[Verdict] = (),
                      seed: int = 0, clean_acc: float | None = None, asr: float | None = None) -> list[MetricsRecord]:
    """One row for the clean group and, when present, one for the backdoor group."""
    rows = []
    for group, counts, verdicts, poisoned in (("clean", clean, clean_verdicts, False),
                                              ("backdoor", backdoor, backdoor_verdicts, True)):
        if not counts:
            continue
        tpr, tnr = tpr_tnr(verdicts, [poisoned] * len(verdicts))
        fd_m, fd_v = _moments([c.f_d for c in counts])
        fs_m, fs_v = _moments([c.f_s for c in counts if c.f_s is not None])
        rows.append(MetricsRecord(experiment_id, model_tag, attack_tag, "detect", group, seed,
                                  clean_acc, asr, tpr, tnr,
                                  len(counts) if not poisoned else 0, len(counts) if poisoned else 0,
                                  fd_m, fd_v, fs_m, fs_v))
    return rows


# ----------------------------------------------------------------------------
# sweeps
# ----------------------------------------------------------------------------

def _transformed_rate(model, images, spec: TransformSpec, trials: int, seed: int, keys, wanted, chunk: int = 64):
    """Share of ``trials`` transformed copies per image predicted as ``wanted[i]``."""
    if len(images) == 0:
        return None
    hits = 0
    for s in range(0, len(images), chunk):
        copies = np.concatenate([apply_descriptors(img, spec, draw_descriptors(spec, trials, seed, int(key)))
                                 for img, key in zip(images[s:s + chunk], keys[s:s + chunk])])
        hits += int(np.sum(predict_labels(model, copies) == np.repeat(wanted[s:s + chunk], trials)))
    return hits / (len(images) * trials)


def _sweep(model, dataset, trigger, specs: list[tuple[str, TransformSpec, bool]], seeds, trials, experiment_id,
           model_tag, attack_tag, threads):
    labels = dataset.labels
    keys = dataset.ids
    if trigger is not None:
        bd_images, bd_idx = asr_inputs(dataset, trigger)
        bd_keys = keys[bd_idx]
    else:
        bd_images, bd_keys = dataset.images[:0], keys[:0]

    def cell(args):
        param, spec, identity, seed = args
        if identity:
            acc = clean_accuracy(model, dataset)
            asr = (float(np.mean(predict_labels(model, bd_images) == trigger.target_label))
                   if len(bd_images) else None)
        else:
            acc = _transformed_rate(model, dataset.images, spec, trials, seed, keys, labels)
            asr = (_transformed_rate(model, bd_images, spec, trials, seed, bd_keys,
                                     np.full(len(bd_images), trigger.target_label))
                   if len(bd_images) else None)
        return MetricsRecord(experiment_id, model_tag, attack_tag, spec.kind, param, int(seed), acc, asr,
                             n_clean=len(dataset), n_backdoor=len(bd_images))

    jobs = [(param, spec, identity, s) for param, spec, identity in specs for s in seeds]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(cell, jobs))
    else:
        records = [cell(j) for j in jobs]
    return sorted(records, key=MetricsRecord.key)


def sweep_drop(model, dataset, trigger: TriggerSpec | None, grid: int, m_values: Sequence[int],
               seeds: Sequence[int] = (0,), trials: int = 1, experiment_id: str = "sweep-drop",
               model_tag: str = "model", attack_tag: str = "none", threads: int = 1) -> list[MetricsRecord]:
    """Clean accuracy and ASR after dropping ``M`` of ``grid**2`` patches, per (M, seed).

    ``M = 0`` is evaluated directly on the untouched images.
    """
    specs = []
    for m in m_values:
        spec = TransformSpec(DROP, grid=grid, drop_count=int(m))
        specs.append((str(int(m)), spec, int(m) == 0))
    return _sweep(model, dataset, trigger, specs, seeds, trials, experiment_id, model_tag, attack_tag,
                  threads)


def sweep_shuffle(model, dataset, trigger: TriggerSpec | None, grids: Sequence[int],
                  seeds: Sequence[int] = (0,), trials: int = 1, experiment_id: str = "sweep-shuffle",
                  model_tag: str = "model", attack_tag: str = "none", threads: int = 1) -> list[MetricsRecord]:
    """Clean accuracy and ASR after shuffling an ``l x l`` patch grid, per (l, seed).

    ``param`` records the patch side in pixels (``H / l``); ``l = 1`` is the identity.
    """
    h = dataset.image_shape[1]
    specs = []
    for g in grids:
        spec = TransformSpec(SHUFFLE, grid=int(g))
        specs.append((str(math.ceil(h / int(g))), spec, int(g) == 1))
    return _sweep(model, dataset, trigger, specs, seeds, trials, experiment_id, model_tag, attack_tag,
                  threads)


@dataclass
class SweepSummary:
    transform: str
    param: str
    n_seeds: int
    clean_mean: float
    clean_var: float
    asr_mean: float | None
    asr_var: float | None


def summarize_sweep(records: Sequence[MetricsRecord]) -> list[SweepSummary]:
    """Mean and variance over seeds for each (transform, param) cell."""
    groups: dict[tuple, list[MetricsRecord]] = {}
    for r in records:
        groups.setdefault((r.transform, _param_key(r.param), r.param), []).append(r)
    out = []
    for (transform, _, param), rs in sorted(groups.items()):
        cm, cv = _moments([r.clean_acc for r in rs])
        asrs = [r.asr for r in rs if r.asr is not None]
        am, av = _moments(asrs)
        out.append(SweepSummary(transform, param, len(rs), cm, cv, am, av))
    return out


# ----------------------------------------------------------------------------
# report files
# ----------------------------------------------------------------------------

def emit_report(records: Sequence[MetricsRecord], path, fmt: str = "csv", config: dict | None = None) -> Path:
    """Write records as CSV (fixed column order) or JSON with a config echo."""
    path = Path(path)
    if fmt not in ("csv", "json"):
        raise ConfigurationError(f"unknown report format {fmt!r}; use 'csv' or 'json'")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "csv":
            with path.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(REPORT_COLUMNS)
                for r in records:
                    w.writerow(r.to_row())
        else:
            doc = {"version": REPORT_VERSION, "columns": list(REPORT_COLUMNS), "asr_convention": ASR_CONVENTION,
                   "config": config or {}, "records": [asdict(r) for r in records]}
            path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc.strerror or exc}") from exc
    return path


def read_report(path) -> list[MetricsRecord]:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        try:
            doc = json.loads(text)
            return [MetricsRecord(**r) for r in doc["records"]]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}: not a metrics report ({exc})") from exc
    reader = csv.DictReader(text.splitlines())
    if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
        raise FormatError(f"{path}: header {reader.fieldnames} does not match report columns")
    try:
        return [MetricsRecord.from_row(row) for row in reader]
    except ValueError as exc:
        raise FormatError(f"{path}: line {reader.line_num}: {exc}") from exc
