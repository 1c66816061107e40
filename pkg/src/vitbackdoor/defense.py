"""Flip-count backdoor detection with PatchDrop / PatchShuffle.

For an input ``x`` with prediction ``y = F(x)`` the detector counts, over ``T``
random trials of each transform, how often the prediction changes::

    F_d(x) = #{t : F(drop_t(x)) != y}        F_s(x) = #{t : F(shuffle_t(x)) != y}

``x`` is flagged as backdoor when ``F_d > k_d`` or ``F_s < k_s``. Thresholds come
from nearest-rank percentiles of clean-sample counts, or are fixed to
``k_d = 0, k_s = T`` when no clean data exists.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import mannwhitneyu

from .errors import CalibrationError, ConfigurationError, InputError, PipelineError
from .patchproc import DROP, SHUFFLE, TransformSpec, apply_descriptors, draw_descriptors, replay

logger = logging.getLogger(__name__)

CLEAN = "clean"
BACKDOOR = "backdoor"
VERDICT_COLUMNS = ("id", "F_d", "F_s", "k_d", "k_s", "decision", "rule")


@dataclass
class DetectionProfile:
    """Transform settings, trial count and (once calibrated) thresholds.

    Defaults suit the 16x16 synthetic data: drop 3 of 64 cells, shuffle quadrants.
    """

    trials: int = 32
    drop: TransformSpec = field(default_factory=lambda: TransformSpec(DROP, grid=8, drop_count=3))
    shuffle: TransformSpec = field(default_factory=lambda: TransformSpec(SHUFFLE, grid=2))
    k_d: int | None = None
    k_s: int | None = None
    n_d: float = 90.0
    n_s: float = 10.0
    seed: int = 0
    early_exit: bool = False

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigurationError(f"trial count must be >= 1, got {self.trials}")
        if self.drop.kind != DROP or self.shuffle.kind != SHUFFLE:
            raise ConfigurationError("profile needs one drop and one shuffle transform")
        for name in ("n_d", "n_s"):
            if not 0 <= getattr(self, name) <= 100:
                raise ConfigurationError(f"{name} must lie in [0, 100]")
        for name in ("k_d", "k_s"):
            v = getattr(self, name)
            if v is not None and not 0 <= v <= self.trials:
                raise ConfigurationError(f"{name}={v} outside [0, {self.trials}]")

    @property
    def calibrated(self) -> bool:
        return self.k_d is not None and self.k_s is not None

    def to_dict(self) -> dict:
        return {"trials": self.trials, "drop": self.drop.to_dict(), "shuffle": self.shuffle.to_dict(),
                "k_d": self.k_d, "k_s": self.k_s, "n_d": self.n_d, "n_s": self.n_s, "seed": self.seed,
                "early_exit": self.early_exit}

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionProfile":
        d = dict(d)
        unknown = set(d) - {"trials", "drop", "shuffle", "k_d", "k_s", "n_d", "n_s", "seed", "early_exit"}
        if unknown:
            raise ConfigurationError(f"unknown detection profile keys: {sorted(unknown)}")
        if "drop" in d:
            d["drop"] = TransformSpec.from_dict({**d["drop"], "kind": DROP})
        if "shuffle" in d:
            d["shuffle"] = TransformSpec.from_dict({**d["shuffle"], "kind": SHUFFLE})
        return cls(**d)


@dataclass
class FlipCounts:
    sample_id: int
    f_d: int
    f_s: int | None
    trials: int
    prediction: int = -1
    drop_descriptors: np.ndarray | None = field(default=None, repr=False)
    shuffle_descriptors: np.ndarray | None = field(default=None, repr=False)


@dataclass
class Verdict:
    sample_id: int
    decision: str
    rule: str
    f_d: int
    f_s: int | None
    k_d: int
    k_s: int

    @property
    def flagged(self) -> bool:
        return self.decision == BACKDOOR


def predict_labels(model, x) -> np.ndarray:
    """Argmax labels from a ClassifierModel, a logits callable, or a label callable."""
    if hasattr(model, "logits"):
        return model.logits(x).argmax(axis=1)
    out = np.asarray(model(x))
    return out.argmax(axis=1) if out.ndim == 2 else out.astype(np.int64)


def decide(f_d: int, f_s: int | None, k_d: int, k_s: int) -> tuple[str, str]:
    """Return ``(decision, rule)``; strict inequalities, so equality with a threshold is clean."""
    drop_hit = f_d > k_d
    shuffle_hit = f_s is not None and f_s < k_s
    if drop_hit and shuffle_hit:
        return BACKDOOR, "both"
    if drop_hit:
        return BACKDOOR, "drop"
    if shuffle_hit:
        return BACKDOOR, "shuffle"
    return CLEAN, "none"


def nearest_rank_percentile(values: Sequence[int], n: float) -> int:
    """Value at 1-based index ``ceil(n/100 * K)`` of the ascending sort (index clamped to ``[1, K]``)."""
    values = sorted(int(v) for v in values)
    k = len(values)
    if k == 0:
        raise CalibrationError("no clean samples to calibrate on; use no_clean_data_profile(T) instead")
    rank = math.ceil(Fraction(str(n)) * k / 100)
    rank = min(max(rank, 1), k)
    return values[rank - 1]


def _count_chunk(model, images, keys, profile: DetectionProfile, keep: bool, skip_shuffle_if_dropped: bool):
    """Flip counts for a handful of images, batching all transformed copies into one model call."""
    t = profile.trials
    base = predict_labels(model, images)
    drop_desc = [draw_descriptors(profile.drop, t, profile.seed, k) for k in keys]
    batch = np.concatenate([apply_descriptors(x, profile.drop, d) for x, d in zip(images, drop_desc)])
    drop_pred = predict_labels(model, batch).reshape(len(images), t)
    f_d = (drop_pred != base[:, None]).sum(axis=1)

    f_s = [None] * len(images)
    shuf_desc = [None] * len(images)
    todo = [i for i in range(len(images)) if not (skip_shuffle_if_dropped and profile.k_d is not None
                                                   and f_d[i] > profile.k_d)]
    if todo:
        descs = [draw_descriptors(profile.shuffle, t, profile.seed, keys[i]) for i in todo]
        batch = np.concatenate([apply_descriptors(images[i], profile.shuffle, d) for i, d in zip(todo, descs)])
        preds = predict_labels(model, batch).reshape(len(todo), t)
        for j, i in enumerate(todo):
            f_s[i] = int((preds[j] != base[i]).sum())
            shuf_desc[i] = descs[j]
    return [FlipCounts(int(k), int(f_d[i]), f_s[i], t, int(base[i]),
                       drop_desc[i] if keep else None, shuf_desc[i] if keep else None)
            for i, k in enumerate(keys)]


def score_batch(model, images, ids=None, profile: DetectionProfile | None = None, *, chunk: int = 8,
                threads: int = 1, keep_descriptors: bool = False) -> list[FlipCounts]:
    """Flip counts for every image. Randomness is keyed by (profile seed, sample id), so
    results do not depend on chunking or thread scheduling."""
    profile = profile or DetectionProfile()
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    ids = np.arange(len(images)) if ids is None else np.asarray(ids)
    early = profile.early_exit
    starts = range(0, len(images), chunk)
    work = lambda s: _count_chunk(model, images[s:s + chunk], ids[s:s + chunk], profile, keep_descriptors, early)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(s) for s in starts]
    return [fc for part in parts for fc in part]


def flip_counts(model, x, profile: DetectionProfile | None = None, sample_id: int = 0,
                keep_descriptors: bool = True) -> FlipCounts:
    """Flip counts for a single ``(C, H, W)`` image."""
    return score_batch(model, np.asarray(x)[None], [sample_id], profile, keep_descriptors=keep_descriptors)[0]


def recount(model, x, counts: FlipCounts, profile: DetectionProfile) -> tuple[int, int]:
    """Recompute ``(F_d, F_s)`` one trial at a time from stored descriptors."""
    y = predict_labels(model, x[None])[0]
    f_d = sum(int(predict_labels(model, replay(x, profile.drop, d)[None])[0] != y) for d in counts.drop_descriptors)
    f_s = sum(int(predict_labels(model, replay(x, profile.shuffle, d)[None])[0] != y)
              for d in counts.shuffle_descriptors)
    return f_d, f_s


def flip_gap_test(clean: Sequence[int], backdoor: Sequence[int]) -> float:
    """One-sided Mann-Whitney U p-value for "backdoor F_d tends to exceed clean F_d"."""
    if len(clean) == 0 or len(backdoor) == 0:
        raise InputError("both groups need at least one flip count")
    return float(mannwhitneyu(np.asarray(backdoor), np.asarray(clean), alternative="greater").pvalue)


def calibrate_from_counts(counts: Sequence[FlipCounts], profile: DetectionProfile) -> DetectionProfile:
    f_d = [c.f_d for c in counts]
    f_s = [c.f_s for c in counts if c.f_s is not None]
    if not f_d:
        raise CalibrationError("no clean samples to calibrate on; use no_clean_data_profile(T) instead")
    return replace(profile, k_d=nearest_rank_percentile(f_d, profile.n_d),
                   k_s=nearest_rank_percentile(f_s, profile.n_s))


def calibrate(model, clean_images, profile: DetectionProfile | None = None, ids=None, threads: int = 1):
    """Score ``K`` clean samples and set ``k_d``/``k_s`` at the profile's percentiles.

    Returns ``(calibrated_profile, counts)``.
    """
    profile = profile or DetectionProfile()
    if len(clean_images) == 0:
        raise CalibrationError("no clean samples to calibrate on; use no_clean_data_profile(T) instead")
    counts = score_batch(model, clean_images, ids, replace(profile, early_exit=False), threads=threads)
    return calibrate_from_counts(counts, profile), counts


def no_clean_data_profile(trials: int = 32, base: DetectionProfile | None = None) -> DetectionProfile:
    """Thresholds for when no clean data exists: ``k_d = 0`` and ``k_s = T``."""
    base = base or DetectionProfile(trials=trials)
    return replace(base, trials=trials, k_d=0, k_s=trials)


def verdicts_from_counts(counts: Sequence[FlipCounts], profile: DetectionProfile) -> list[Verdict]:
    if not profile.calibrated:
        raise ConfigurationError("detection profile has no thresholds; run calibrate first")
    out = []
    for c in counts:
        decision, rule = decide(c.f_d, c.f_s, profile.k_d, profile.k_s)
        out.append(Verdict(c.sample_id, decision, rule, c.f_d, c.f_s, profile.k_d, profile.k_s))
    return out


def detect_batch(model, images, ids=None, profile: DetectionProfile | None = None, threads: int = 1):
    """Return ``(verdicts, counts)`` for every image."""
    profile = profile or DetectionProfile()
    if not profile.calibrated:
        raise ConfigurationError("detection profile has no thresholds; run calibrate first")
    counts = score_batch(model, images, ids, profile, threads=threads)
    return verdicts_from_counts(counts, profile), counts


def detect(model, x, profile: DetectionProfile, sample_id: int = 0) -> Verdict:
    return detect_batch(model, np.asarray(x)[None], [sample_id], profile)[0][0]


def write_verdicts_csv(verdicts: Sequence[Verdict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(VERDICT_COLUMNS)
        for v in verdicts:
            w.writerow([v.sample_id, v.f_d, "" if v.f_s is None else v.f_s, v.k_d, v.k_s, v.decision, v.rule])
    return path


def read_verdicts_csv(path) -> list[Verdict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [Verdict(int(r["id"]), r["decision"], r["rule"], int(r["F_d"]),
                    None if r["F_s"] == "" else int(r["F_s"]), int(r["k_d"]), int(r["k_s"])) for r in rows]


# ----------------------------------------------------------------------------
# training-set cleansing
# ----------------------------------------------------------------------------

@dataclass
class RemovalReport:
    total: int
    flagged: int
    kept: int
    removed_poisoned: int | None = None
    removed_clean: int | None = None
    kept_poisoned: int | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class FilterRetrainResult:
    filtered: object
    model: object
    report: RemovalReport
    bootstrap_model: object
    verdicts: list[Verdict]
    profile: DetectionProfile | None = None


def filter_retrain(dataset, build_model: Callable[[], object], train_fn: Callable, bootstrap_epochs: int,
                   retrain_epochs: int, profile: DetectionProfile | None = None, threads: int = 1,
                   ground_truth: np.ndarray | None = None,
                   calibration_images: np.ndarray | None = None) -> FilterRetrainResult:
    """Bootstrap-train, flag training samples, drop them, retrain from scratch.

    ``train_fn(model, dataset, epochs)`` trains in place. ``profile`` defaults to
    :func:`no_clean_data_profile`. An uncalibrated profile is calibrated on the
    bootstrap model with ``calibration_images``. ``ground_truth`` (poison flags
    aligned with ``dataset``) only feeds the report; it never influences which
    samples are removed.
    """
    if len(dataset) == 0:
        raise PipelineError("cannot filter an empty training set")
    profile = profile or no_clean_data_profile()
    if not profile.calibrated and calibration_images is None:
        raise ConfigurationError("filter_retrain needs a profile with thresholds or clean calibration images")
    boot = build_model()
    train_fn(boot, dataset, bootstrap_epochs)
    if not profile.calibrated:
        profile, _ = calibrate(boot, calibration_images, profile, threads=threads)
    verdicts, _ = detect_batch(boot, dataset.images, dataset.ids, profile, threads=threads)
    flagged = np.array([v.flagged for v in verdicts], dtype=bool)
    if flagged.all():
        raise PipelineError(f"every one of the {len(dataset)} training samples was flagged; nothing left to retrain on")
    keep = np.flatnonzero(~flagged)
    filtered = dataset.subset(keep)
    report = RemovalReport(len(dataset), int(flagged.sum()), len(keep))
    if ground_truth is not None:
        gt = np.asarray(ground_truth, dtype=bool)
        report.removed_poisoned = int((flagged & gt).sum())
        report.removed_clean = int((flagged & ~gt).sum())
        report.kept_poisoned = int((~flagged & gt).sum())
    logger.info("filter: flagged %d of %d samples", report.flagged, report.total)
    model = build_model()
    train_fn(model, filtered, retrain_epochs)
    return FilterRetrainResult(filtered, model, report, boot, verdicts, profile)
