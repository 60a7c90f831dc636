"""Metrics and experiment harness.

Turns manifest entries into model-ready batches (aligned spectra plus the
seeded reference lookup), evaluates trained classifiers (accuracy,
confusion matrix, false/missed alarm rates, per-source breakdown), sweeps
the retained-energy fraction over candidate spectrum lengths, runs channel
ablations, and dumps encoder features for external projection tools.

Samples whose working condition has no stored reference are excluded from
evaluation with an explicit count and a logged warning, never silently.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fcn
from .errors import ConfigError, MissingReferenceError
from .fcn import FcnConfig, FcnModel, TrainingLog, pretrain
from .reference_store import ReferenceStore
from .signal_core import (
    DcnConfig,
    FrequencyRep,
    SignalSegment,
    dcn,
    dct,
    read_vseg,
    unify,
)
from .synth_data import ManifestEntry, holdout_subset

logger = logging.getLogger(__name__)

VARIANTS = ("full", "no_ref_no_res", "no_res", "no_ref", "time_domain")

_VARIANT_CHANNELS = {
    "full": (0, 1, 2),
    "no_ref_no_res": (0,),
    "no_res": (0, 1),
    "no_ref": (0, 2),
}


def variant_channel_count(variant: str) -> int:
    if variant == "time_domain":
        return 1
    if variant not in _VARIANT_CHANNELS:
        raise ConfigError(f"unknown ablation variant {variant!r}; expected one of {VARIANTS}")
    return len(_VARIANT_CHANNELS[variant])


def _sample_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1, np.uint64)[0])


def materialize(
    entries: list[ManifestEntry],
    root,
    store: ReferenceStore | None,
    dcn_cfg: DcnConfig,
    *,
    seed: int = 0,
    variant: str = "full",
    on_missing_reference: str = "raise",
) -> tuple[np.ndarray, np.ndarray, list[ManifestEntry], int]:
    """Load segments and build network inputs for one split.

    Returns (inputs, labels, kept entries, skipped count).  The reference
    for each sample is drawn with a seed derived from (seed, entry index),
    so the result is a pure function of its arguments.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant!r}; expected one of {VARIANTS}")
    if on_missing_reference not in ("raise", "skip"):
        raise ConfigError("on_missing_reference must be 'raise' or 'skip'")
    root = Path(root)
    needs_reference = variant in ("full", "no_res", "no_ref")
    if needs_reference and store is None:
        raise ConfigError(f"variant {variant!r} needs a reference store")

    rows, labels, kept = [], [], []
    skipped = 0
    for index, entry in enumerate(entries):
        samples, rate = read_vseg(root / entry.path)
        if variant == "time_domain":
            # fixed-length raw input: cut or zero-pad, no spectrum, no scaling
            vec = samples[: dcn_cfg.n_f]
            if vec.size < dcn_cfg.n_f:
                vec = np.concatenate([vec, np.zeros(dcn_cfg.n_f - vec.size)])
            rows.append(vec[None, :])
            labels.append(entry.label)
            kept.append(entry)
            continue
        seg = SignalSegment(samples[:rate], rate, condition_id=entry.condition_id)
        query = dcn(seg, dcn_cfg)
        if needs_reference:
            try:
                ref_coeffs = store.lookup(entry.condition_id, _sample_seed(seed, index))
            except MissingReferenceError:
                if on_missing_reference == "raise":
                    raise
                skipped += 1
                continue
            unified = unify(query, FrequencyRep(ref_coeffs, dcn_cfg.n_f))
            rows.append(unified.channels[list(_VARIANT_CHANNELS[variant])])
        else:
            rows.append(query.coefficients[None, :])
        labels.append(entry.label)
        kept.append(entry)

    if skipped:
        logger.warning("excluded %d samples with no stored reference", skipped)
    n_channels = variant_channel_count(variant)
    if not rows:
        x = np.zeros((0, n_channels, dcn_cfg.n_f))
    else:
        x = np.stack(rows)
    return x, np.asarray(labels, dtype=np.int64), kept, skipped


@dataclass
class AlarmRates:
    """Fraction of healthy samples flagged faulty, and the converse."""

    false_alarm: float
    missed_alarm: float


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray
    alarm_rates: AlarmRates
    n_evaluated: int
    n_skipped: int
    per_source: dict[str, float] = field(default_factory=dict)


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Counts with rows = true label, columns = predicted label."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(np.asarray(y_true), np.asarray(y_pred)):
        cm[int(t), int(p)] += 1
    return cm


def alarm_rates_from_confusion(cm: np.ndarray) -> AlarmRates:
    healthy_total = int(cm[0].sum())
    faulty_total = int(cm[1:].sum())
    false_alarm = (healthy_total - int(cm[0, 0])) / healthy_total if healthy_total else 0.0
    missed_alarm = int(cm[1:, 0].sum()) / faulty_total if faulty_total else 0.0
    return AlarmRates(false_alarm=false_alarm, missed_alarm=missed_alarm)


def evaluate(
    model: FcnModel,
    entries: list[ManifestEntry],
    root,
    store: ReferenceStore | None,
    dcn_cfg: DcnConfig,
    *,
    split: str | None = "test",
    variant: str = "full",
    seed: int = 0,
    batch_size: int = 256,
) -> EvalResult:
    """Classify one manifest split and compute all metrics."""
    subset = [e for e in entries if split is None or e.split == split]
    x, y, kept, skipped = materialize(
        subset, root, store, dcn_cfg, seed=seed, variant=variant,
        on_missing_reference="skip",
    )
    if len(x) == 0:
        raise ConfigError(f"no evaluable samples in split {split!r}")
    preds = fcn.predict_logits(model, x, batch_size).argmax(axis=1)
    cm = confusion_matrix(y, preds, model.config.n_classes)
    per_source: dict[str, float] = {}
    for tag in sorted({e.source_tag for e in kept}):
        mask = np.array([e.source_tag == tag for e in kept])
        per_source[tag] = float((preds[mask] == y[mask]).mean())
    return EvalResult(
        accuracy=float((preds == y).mean()),
        confusion=cm,
        alarm_rates=alarm_rates_from_confusion(cm),
        n_evaluated=len(kept),
        n_skipped=skipped,
        per_source=per_source,
    )


def energy_fraction_curve(
    segments: list[SignalSegment], n_f_values: list[int]
) -> list[tuple[int, float]]:
    """Mean retained spectral energy when keeping the first n_f components.

    Cumulative sums of squared coefficients make each per-segment curve
    monotone, and the fraction is exactly 1.0 once n_f covers the whole
    spectrum (zero padding adds no energy).
    """
    fractions = np.zeros(len(n_f_values))
    for seg in segments:
        cumulative = np.cumsum(np.square(dct(seg.samples)))
        total = cumulative[-1]
        for j, n_f in enumerate(n_f_values):
            fractions[j] += cumulative[min(n_f, cumulative.size) - 1] / total
    fractions /= max(len(segments), 1)
    return [(int(n_f), float(f)) for n_f, f in zip(n_f_values, fractions)]


def dump_features(
    model: FcnModel,
    entries: list[ManifestEntry],
    root,
    store: ReferenceStore | None,
    dcn_cfg: DcnConfig,
    out_path,
    *,
    split: str | None = "test",
    variant: str = "full",
    seed: int = 0,
    batch_size: int = 256,
) -> int:
    """Write one TSV row per sample: id, label, condition, source, features."""
    subset = [e for e in entries if split is None or e.split == split]
    x, y, kept, _ = materialize(
        subset, root, store, dcn_cfg, seed=seed, variant=variant,
        on_missing_reference="skip",
    )
    with open(out_path, "w", encoding="utf-8") as fh:
        for start in range(0, len(x), batch_size):
            feats = model.encode(x[start : start + batch_size], train=False)
            for row, entry, label in zip(
                feats, kept[start : start + batch_size], y[start : start + batch_size]
            ):
                values = "\t".join(f"{v:.10g}" for v in row)
                fh.write(
                    f"{entry.path}\t{label}\t{entry.condition_id}"
                    f"\t{entry.source_tag}\t{values}\n"
                )
    return len(kept)


@dataclass
class AblationResult:
    variant: str
    training: TrainingLog
    evaluation: EvalResult


def ablation_run(
    entries: list[ManifestEntry],
    root,
    store: ReferenceStore | None,
    dcn_cfg: DcnConfig,
    *,
    variant: str,
    model_config: FcnConfig | None = None,
    holdout_tags: list[str] | None = None,
    seed: int = 0,
    epochs: int = 20,
    batch_size: int = 128,
    lr: float = 1e-4,
    weight_decay: float = 0.01,
    stop_at_val_accuracy: float | None = None,
) -> AblationResult:
    """Train and evaluate one representation variant end to end.

    With holdout_tags the excluded sources are removed from training and
    form the zero-shot test set; their references (healthy recordings from
    the target machine) remain available at test time.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant!r}; expected one of {VARIANTS}")
    worklist = holdout_subset(entries, holdout_tags or [])
    if model_config is None:
        model_config = FcnConfig(n_f=dcn_cfg.n_f)
    config = FcnConfig(**{
        **{f: getattr(model_config, f) for f in model_config.__dataclass_fields__},
        "n_f": dcn_cfg.n_f,
        "in_channels": variant_channel_count(variant),
    })
    model = FcnModel(config, seed=seed)

    train_entries = [e for e in worklist if e.split == "train"]
    val_entries = [e for e in worklist if e.split == "val"]
    x_train, y_train, _, _ = materialize(
        train_entries, root, store, dcn_cfg, seed=seed, variant=variant
    )
    x_val, y_val, _, _ = materialize(
        val_entries, root, store, dcn_cfg, seed=seed + 1, variant=variant
    )
    log = pretrain(
        model, (x_train, y_train), (x_val, y_val),
        epochs=epochs, batch_size=batch_size, lr=lr, weight_decay=weight_decay,
        seed=seed, stop_at_val_accuracy=stop_at_val_accuracy,
    )
    result = evaluate(
        model, worklist, root, store, dcn_cfg,
        split="test", variant=variant, seed=seed + 2, batch_size=batch_size,
    )
    return AblationResult(variant=variant, training=log, evaluation=result)
