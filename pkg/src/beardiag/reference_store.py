"""Working-condition registry and fault-free reference store.

A working condition is the tuple (speed, load, sensor, source rig); equal
tuples share one integer index, assigned in first-seen order.  For each
condition the store keeps aligned frequency representations of healthy
segments, inserted exclusively from the training split, and serves one of
them uniformly at random (seeded) as the reference channel for a query
under the same condition.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    MissingReferenceError,
    PersistenceError,
    RejectedReferenceError,
    ShapeError,
)
from .signal_core import FrequencyRep

VFRQ_MAGIC = b"VFRQ"
CONDITIONS_FILE = "conditions.tsv"
REFS_DIR = "refs"

TRAIN, VAL, TEST = "train", "val", "test"
SPLITS = (TRAIN, VAL, TEST)


@dataclass(frozen=True)
class ConditionInfo:
    """One working condition: rotational speed, load, sensor, and source rig."""

    rpm: float | None
    load: str
    sensor: str
    source: str

    def __post_init__(self) -> None:
        for name in ("load", "sensor", "source"):
            value = getattr(self, name)
            if not value or any(c in value for c in "\t\n|"):
                raise ConfigError(f"condition {name} tag {value!r} is empty or unserializable")

    def canonical(self) -> str:
        rpm = "unknown" if self.rpm is None else f"{self.rpm:.3f}"
        return "|".join((rpm, self.load, self.sensor, self.source)).lower()


class ConditionRegistry:
    """First-seen-order index of working conditions."""

    def __init__(self) -> None:
        self._infos: list[ConditionInfo] = []
        self._index: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self._infos)

    def register(self, info: ConditionInfo) -> int:
        key = info.canonical()
        existing = self._index.get(key)
        if existing is not None:
            return existing
        cid = len(self._infos)
        self._infos.append(info)
        self._index[key] = cid
        return cid

    def info(self, condition_id: int) -> ConditionInfo:
        if not 0 <= condition_id < len(self._infos):
            raise ConfigError(f"unknown condition id {condition_id}")
        return self._infos[condition_id]

    def items(self):
        return enumerate(self._infos)


class ReferenceStore:
    """Fault-free frequency representations keyed by condition id."""

    def __init__(self, n_f: int) -> None:
        if n_f < 1:
            raise ConfigError("n_f must be >= 1")
        self.n_f = int(n_f)
        self._refs: dict[int, list[np.ndarray]] = {}

    def count(self, condition_id: int) -> int:
        return len(self._refs.get(condition_id, ()))

    def condition_ids(self) -> list[int]:
        return sorted(self._refs)

    def insert(
        self,
        condition_id: int,
        rep: FrequencyRep | np.ndarray,
        fault_label: int,
        split: str,
    ) -> None:
        if fault_label != 0:
            raise RejectedReferenceError(
                f"reference must be fault-free (label 0), got label {fault_label}"
            )
        if split != TRAIN:
            raise RejectedReferenceError(
                f"references may only come from the training split, got {split!r}"
            )
        coeffs = rep.coefficients if isinstance(rep, FrequencyRep) else np.asarray(rep, float)
        if coeffs.ndim != 1 or coeffs.size != self.n_f:
            raise ShapeError(f"reference length {coeffs.shape} != n_f {self.n_f}")
        frozen = np.array(coeffs, dtype=np.float64)
        frozen.flags.writeable = False
        self._refs.setdefault(int(condition_id), []).append(frozen)

    def lookup(self, condition_id: int, seed: int) -> np.ndarray:
        pool = self._refs.get(int(condition_id))
        if not pool:
            raise MissingReferenceError(
                f"no fault-free reference stored for condition {condition_id}; "
                "a healthy recording under this working condition must be "
                "captured before diagnosis is possible"
            )
        idx = int(np.random.default_rng(seed).integers(len(pool)))
        return pool[idx]

    def lookup_by_index(self, condition_id: int, k: int) -> np.ndarray:
        pool = self._refs.get(int(condition_id))
        if pool is None or not 0 <= k < len(pool):
            raise MissingReferenceError(f"condition {condition_id} has no reference {k}")
        return pool[k]


def save(store: ReferenceStore, registry: ConditionRegistry, directory) -> None:
    """Persist registry and references; layout is conditions.tsv + refs/<cid>/<k>.vfreq."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for cid, info in registry.items():
        rpm = "unknown" if info.rpm is None else repr(float(info.rpm))
        lines.append(f"{cid}\t{rpm}\t{info.load}\t{info.sensor}\t{info.source}\n")
    (root / CONDITIONS_FILE).write_text("".join(lines), encoding="utf-8")

    refs_root = root / REFS_DIR
    for cid in store.condition_ids():
        cdir = refs_root / str(cid)
        cdir.mkdir(parents=True, exist_ok=True)
        for k in range(store.count(cid)):
            coeffs = store.lookup_by_index(cid, k)
            header = VFRQ_MAGIC + np.uint32(store.n_f).tobytes()
            (cdir / f"{k}.vfreq").write_bytes(header + coeffs.astype("<f8").tobytes())


def load(directory) -> tuple[ReferenceStore, ConditionRegistry]:
    """Load a persisted store; inverse of :func:`save`, bit-exact for coefficients."""
    root = Path(directory)
    cond_path = root / CONDITIONS_FILE
    if not cond_path.is_file():
        raise PersistenceError(f"{cond_path} not found")

    registry = ConditionRegistry()
    for lineno, line in enumerate(cond_path.read_text(encoding="utf-8").splitlines()):
        parts = line.split("\t")
        if len(parts) != 5:
            raise PersistenceError(f"{cond_path}:{lineno + 1}: expected 5 fields")
        cid_text, rpm_text, load_tag, sensor, source = parts
        rpm = None if rpm_text == "unknown" else float(rpm_text)
        cid = registry.register(ConditionInfo(rpm, load_tag, sensor, source))
        if cid != int(cid_text):
            raise PersistenceError(
                f"{cond_path}: condition ids out of order ({cid_text} read as {cid})"
            )

    refs_root = root / REFS_DIR
    n_f = None
    loaded: dict[int, list[np.ndarray]] = {}
    if refs_root.is_dir():
        for cdir in sorted(refs_root.iterdir(), key=lambda p: int(p.name)):
            cid = int(cdir.name)
            if cid >= len(registry):
                raise PersistenceError(f"{cdir}: reference for unregistered condition")
            files = sorted(cdir.glob("*.vfreq"), key=lambda p: int(p.stem))
            if [int(p.stem) for p in files] != list(range(len(files))):
                raise PersistenceError(f"{cdir}: reference files are not contiguous")
            for path in files:
                coeffs, file_n_f = _read_vfreq(path)
                if n_f is None:
                    n_f = file_n_f
                elif n_f != file_n_f:
                    raise PersistenceError(f"{path}: n_f {file_n_f} != {n_f}")
                loaded.setdefault(cid, []).append(coeffs)

    store = ReferenceStore(n_f if n_f is not None else 1)
    for cid, pool in loaded.items():
        for coeffs in pool:
            store.insert(cid, coeffs, fault_label=0, split=TRAIN)
    return store, registry


def _read_vfreq(path: Path) -> tuple[np.ndarray, int]:
    blob = path.read_bytes()
    if len(blob) < 8 or blob[:4] != VFRQ_MAGIC:
        raise PersistenceError(f"{path}: not a VFRQ file")
    n_f = int(np.frombuffer(blob, dtype="<u4", offset=4, count=1)[0])
    expected = 8 + 8 * n_f
    if len(blob) != expected:
        raise PersistenceError(
            f"{path}: truncated payload ({len(blob)} bytes, expected {expected})"
        )
    return np.frombuffer(blob, dtype="<f8", offset=8).astype(np.float64), n_f
