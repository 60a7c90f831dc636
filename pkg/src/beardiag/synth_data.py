"""Synthetic bearing-signal oracle and dataset builder.

Signals are a shaft-harmonic baseline plus, for faulty classes, a periodic
train of decaying resonance bursts whose repetition rate is a
geometry-style multiple of the shaft rate (different multiple per defect
location, inner-race bursts amplitude-modulated at shaft rate) and whose
amplitude encodes severity, all under additive Gaussian noise.  The
construction guarantees class structure that a frequency-domain classifier
can separate, so end-to-end training failures point at the implementation,
not the data.

The builder cuts signals into one-second segments, writes them as VSEG
files, assigns stratified train/val/test splits per (condition, label)
cell at 7:2:1, and fills the reference store with aligned spectra of
healthy training segments.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.signal

from .errors import ConfigError, DataError, EmptySignalError, LabelError
from .fcn import N_CLASSES, fault_location
from .reference_store import (
    TRAIN,
    ConditionInfo,
    ConditionRegistry,
    ReferenceStore,
)
from .reference_store import save as save_store
from .signal_core import DcnConfig, RawSignal, dcn, segment_all, write_vseg

MANIFEST_FILE = "manifest.tsv"
DATASET_CFG_FILE = "dataset.cfg"
SEGMENTS_DIR = "segments"
STORE_DIR = "refstore"

SPLIT_FRACTIONS = {"train": 0.7, "val": 0.2, "test": 0.1}


@dataclass(frozen=True)
class RigSpec:
    """One synthetic test rig: a working condition plus resonance behavior."""

    source_tag: str
    sample_rate_hz: int
    shaft_rate_hz: float
    resonance_hz: float
    resonance_decay: float
    load_scale: float = 1.0
    sensor_gain: float = 1.0
    noise_sigma: float = 0.05

    def __post_init__(self) -> None:
        if self.sample_rate_hz <= 2 * self.resonance_hz:
            raise ConfigError(
                f"{self.source_tag}: sampling rate {self.sample_rate_hz} cannot "
                f"represent the {self.resonance_hz} Hz resonance"
            )
        if self.shaft_rate_hz <= 0 or self.resonance_decay <= 0:
            raise ConfigError(f"{self.source_tag}: rates and decay must be positive")
        if self.sensor_gain <= 0 or self.load_scale < 0 or self.noise_sigma < 0:
            raise ConfigError(f"{self.source_tag}: gain/load/noise out of range")

    def condition_info(self) -> ConditionInfo:
        return ConditionInfo(
            rpm=self.shaft_rate_hz * 60.0,
            load=f"load{self.load_scale:g}",
            sensor=f"acc-g{self.sensor_gain:g}",
            source=self.source_tag,
        )


@dataclass(frozen=True)
class FaultSpec:
    """Class label plus the impulse-train parameters that realize it."""

    label: int
    characteristic_multiplier: float = 0.0
    severity_amp: float = 0.0

    def __post_init__(self) -> None:
        if not 0 <= self.label < N_CLASSES:
            raise LabelError(f"fault label must lie in [0, {N_CLASSES}), got {self.label}")
        if self.label != 0 and (self.characteristic_multiplier <= 0 or self.severity_amp <= 0):
            raise ConfigError(
                f"label {self.label}: faulty classes need positive multiplier and amplitude"
            )


# characteristic impulse rates per shaft revolution, in class-layout order
LOCATION_MULTIPLIERS = {"inner ring": 5.42, "ball": 4.71, "outer ring": 3.58}
SEVERITY_AMPS = (0.5, 1.0, 2.0)


def default_faults() -> list[FaultSpec]:
    """The full ten-class grid: healthy plus location x severity."""
    faults = [FaultSpec(0)]
    for label in range(1, N_CLASSES):
        faults.append(
            FaultSpec(
                label,
                characteristic_multiplier=LOCATION_MULTIPLIERS[fault_location(label)],
                severity_amp=SEVERITY_AMPS[(label - 1) % 3],
            )
        )
    return faults


def default_rigs() -> list[RigSpec]:
    """Four rigs spanning pad and cut branches of the spectrum alignment."""
    return [
        RigSpec("rigA", 8000, 29.0, resonance_hz=2000.0, resonance_decay=0.004,
                load_scale=1.0, sensor_gain=1.0, noise_sigma=0.05),
        RigSpec("rigB", 12000, 25.0, resonance_hz=2500.0, resonance_decay=0.003,
                load_scale=0.8, sensor_gain=2.0, noise_sigma=0.08),
        RigSpec("rigC", 48000, 33.0, resonance_hz=2800.0, resonance_decay=0.0025,
                load_scale=1.2, sensor_gain=0.5, noise_sigma=0.03),
        RigSpec("rigD", 4000, 20.0, resonance_hz=1500.0, resonance_decay=0.005,
                load_scale=0.6, sensor_gain=1.5, noise_sigma=0.06),
    ]


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0])


def synthesize(
    rig: RigSpec,
    fault: FaultSpec,
    duration_s: float,
    seed: int,
    condition_id: int = 0,
) -> RawSignal:
    """Deterministic synthetic recording for one (rig, fault) cell."""
    if duration_s < 1:
        raise ConfigError(f"duration must be >= 1 s, got {duration_s}")
    s = rig.sample_rate_hz
    n = int(round(duration_s * s))
    t = np.arange(n) / s

    baseline = rig.load_scale * (
        np.sin(2 * np.pi * rig.shaft_rate_hz * t)
        + 0.5 * np.sin(4 * np.pi * rig.shaft_rate_hz * t)
    )

    signal = baseline
    if fault.label != 0:
        f_char = fault.characteristic_multiplier * rig.shaft_rate_hz
        impact_times = np.arange(0.0, duration_s, 1.0 / f_char)
        amps = np.ones_like(impact_times)
        if fault_location(fault.label) == "inner ring":
            # load-zone passage modulates inner-race impacts at shaft rate
            amps += 0.5 * np.sin(2 * np.pi * rig.shaft_rate_hz * impact_times)
        comb = np.zeros(n)
        idx = np.minimum(np.round(impact_times * s).astype(np.int64), n - 1)
        np.add.at(comb, idx, amps)
        support = min(n, int(np.ceil(20.0 * rig.resonance_decay * s)))
        tau = np.arange(support) / s
        kernel = np.exp(-tau / rig.resonance_decay) * np.sin(2 * np.pi * rig.resonance_hz * tau)
        bursts = scipy.signal.fftconvolve(comb, kernel)[:n]
        signal = baseline + fault.severity_amp * bursts

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x51]))
    noisy = rig.sensor_gain * signal + rng.normal(0.0, rig.noise_sigma, n)
    return RawSignal(noisy, s, condition_id=condition_id)


def split_quota(n: int) -> dict[str, int]:
    """7:2:1 split counts by largest remainder; sums to n, each off by at most 1."""
    exact = {name: frac * n for name, frac in SPLIT_FRACTIONS.items()}
    counts = {name: int(value) for name, value in exact.items()}
    leftovers = sorted(
        SPLIT_FRACTIONS, key=lambda name: exact[name] - counts[name], reverse=True
    )
    for name in leftovers[: n - sum(counts.values())]:
        counts[name] += 1
    return counts


def _assign_splits(n: int, rng: np.random.Generator) -> list[str]:
    quota = split_quota(n)
    pool = ["train"] * quota["train"] + ["val"] * quota["val"] + ["test"] * quota["test"]
    order = rng.permutation(n)
    assigned = [""] * n
    for slot, seg_idx in enumerate(order):
        assigned[seg_idx] = pool[slot]
    return assigned


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int
    condition_id: int
    source_tag: str
    split: str


def save_manifest(entries: list[ManifestEntry], path) -> None:
    lines = [
        f"{e.path}\t{e.label}\t{e.condition_id}\t{e.source_tag}\t{e.split}\n"
        for e in entries
    ]
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found")
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines()):
        parts = line.split("\t")
        if len(parts) != 5:
            raise DataError(f"{path}:{lineno + 1}: expected 5 tab-separated fields")
        entries.append(
            ManifestEntry(parts[0], int(parts[1]), int(parts[2]), parts[3], parts[4])
        )
    return entries


def write_dataset_cfg(path, dcn_cfg: DcnConfig, seed: int) -> None:
    Path(path).write_text(
        f"n_f={dcn_cfg.n_f}\nbeta={dcn_cfg.beta!r}\nseed={seed}\n", encoding="utf-8"
    )


def read_dataset_cfg(path) -> tuple[DcnConfig, int]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found")
    values: dict[str, str] = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    try:
        return DcnConfig(n_f=int(values["n_f"]), beta=float(values["beta"])), int(values["seed"])
    except KeyError as exc:
        raise DataError(f"{path}: missing key {exc}") from exc


def build_dataset(
    rigs: list[RigSpec],
    faults: list[FaultSpec],
    segments_per_cell: int,
    seed: int,
    out_dir,
    dcn_cfg: DcnConfig = DcnConfig(),
) -> tuple[list[ManifestEntry], ConditionRegistry, ReferenceStore]:
    """Synthesize, segment, split, and persist a complete dataset.

    Writes manifest.tsv, dataset.cfg, segments/, and refstore/ under
    out_dir; identical inputs reproduce identical bytes.
    """
    if not rigs or not faults:
        raise ConfigError("need at least one rig and one fault class")
    if segments_per_cell < 1:
        raise ConfigError("segments_per_cell must be >= 1")

    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    registry = ConditionRegistry()
    store = ReferenceStore(dcn_cfg.n_f)
    entries: list[ManifestEntry] = []

    condition_ids = [registry.register(rig.condition_info()) for rig in rigs]
    for rig_idx, rig in enumerate(rigs):
        cid = condition_ids[rig_idx]
        for fault in faults:
            raw = synthesize(
                rig, fault, float(segments_per_cell),
                seed=_derived_seed(seed, rig_idx, fault.label), condition_id=cid,
            )
            segments = segment_all(raw)
            split_rng = np.random.default_rng(
                np.random.SeedSequence([seed, rig_idx, fault.label, 0x5B])
            )
            splits = _assign_splits(len(segments), split_rng)
            cell_dir = root / SEGMENTS_DIR / rig.source_tag / str(fault.label)
            cell_dir.mkdir(parents=True, exist_ok=True)
            for seg, split in zip(segments, splits):
                rel = (
                    f"{SEGMENTS_DIR}/{rig.source_tag}/{fault.label}/"
                    f"{seg.segment_index}.vseg"
                )
                write_vseg(root / rel, seg.samples, seg.sample_rate_hz)
                entries.append(ManifestEntry(rel, fault.label, cid, rig.source_tag, split))
                if fault.label == 0 and split == TRAIN:
                    store.insert(cid, dcn(seg, dcn_cfg), fault_label=0, split=TRAIN)

    save_manifest(entries, root / MANIFEST_FILE)
    write_dataset_cfg(root / DATASET_CFG_FILE, dcn_cfg, seed)
    save_store(store, registry, root / STORE_DIR)
    return entries, registry, store


def import_recording(
    recording_path,
    info: ConditionInfo,
    label: int,
    *,
    out_dir,
    registry: ConditionRegistry,
    store: ReferenceStore,
    dcn_cfg: DcnConfig,
    seed: int = 0,
) -> list[ManifestEntry]:
    """Ingest a VSEG recording into an existing dataset directory.

    Segments it, assigns stratified splits, writes segment files, and (for
    healthy recordings) adds training-split references to the store.  The
    caller extends and re-saves the manifest.
    """
    from .signal_core import read_vseg

    if not 0 <= label < N_CLASSES:
        raise LabelError(f"label must lie in [0, {N_CLASSES}), got {label}")
    samples, rate = read_vseg(recording_path)
    cid = registry.register(info)
    raw = RawSignal(samples, rate, condition_id=cid)
    segments = segment_all(raw)  # EmptySignalError if shorter than 1 s

    split_rng = np.random.default_rng(np.random.SeedSequence([seed, cid, label, 0x1E]))
    splits = _assign_splits(len(segments), split_rng)
    stem = Path(recording_path).stem
    root = Path(out_dir)
    cell_dir = root / SEGMENTS_DIR / info.source / str(label)
    cell_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for seg, split in zip(segments, splits):
        rel = f"{SEGMENTS_DIR}/{info.source}/{label}/{stem}_{seg.segment_index}.vseg"
        write_vseg(root / rel, seg.samples, seg.sample_rate_hz)
        entries.append(ManifestEntry(rel, label, cid, info.source, split))
        if label == 0 and split == TRAIN:
            store.insert(cid, dcn(seg, dcn_cfg), fault_label=0, split=TRAIN)
    return entries


def holdout_subset(
    entries: list[ManifestEntry], excluded_source_tags: list[str]
) -> list[ManifestEntry]:
    """Leave-source-out protocol: excluded sources become the zero-shot test set.

    With no excluded tags the manifest is returned unchanged.  Otherwise
    excluded entries are all re-labelled test, and the remaining sources
    keep only their train and val entries.
    """
    excluded = set(excluded_source_tags)
    if not excluded:
        return list(entries)
    known = {e.source_tag for e in entries}
    unknown = excluded - known
    if unknown:
        raise ConfigError(f"unknown source tags: {sorted(unknown)}")
    result = []
    for e in entries:
        if e.source_tag in excluded:
            result.append(ManifestEntry(e.path, e.label, e.condition_id, e.source_tag, "test"))
        elif e.split in ("train", "val"):
            result.append(e)
    return result
