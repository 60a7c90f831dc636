"""Synthetic-signal oracle and dataset-builder tests."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beardiag import signal_core as sc
from beardiag import synth_data as sd
from beardiag.errors import ConfigError, EmptySignalError, FormatError, LabelError
from beardiag.fcn import fault_location
from beardiag.reference_store import load as load_store


def rig_a():
    return sd.default_rigs()[0]


def outer_fault(sev=2.0):
    return sd.FaultSpec(9, characteristic_multiplier=3.58, severity_amp=sev)


# -- test-local spectral oracle: mean energy on the characteristic comb near
#    the rig resonance, compared to the local noise floor ---------------------

def comb_score(seg, rig, multiplier, band=400.0, halfwidth=2):
    energy = np.square(sc.dct(seg.samples))
    f_char = multiplier * rig.shaft_rate_hz
    lo, hi = rig.resonance_hz - band, rig.resonance_hz + band
    total, count = 0.0, 0
    for m in range(int(np.ceil(lo / f_char)), int(np.floor(hi / f_char)) + 1):
        k = round(2 * m * f_char)
        if k + halfwidth >= energy.size:
            continue
        total += energy[k - halfwidth : k + halfwidth + 1].sum()
        count += 2 * halfwidth + 1
    floor = float(np.median(energy[round(2 * lo) : round(2 * hi)]))
    return total / max(count, 1), floor


def predict_location(seg, rig, ratio=5.0):
    scores = {
        loc: comb_score(seg, rig, mult)[0] / max(comb_score(seg, rig, mult)[1], 1e-300)
        for loc, mult in sd.LOCATION_MULTIPLIERS.items()
    }
    best = max(scores, key=scores.get)
    return best if scores[best] >= ratio else None


class TestSynthesize:
    def test_deterministic(self):
        a = sd.synthesize(rig_a(), outer_fault(), 2.0, seed=5)
        b = sd.synthesize(rig_a(), outer_fault(), 2.0, seed=5)
        assert np.array_equal(a.samples, b.samples)

    def test_seed_changes_signal(self):
        a = sd.synthesize(rig_a(), outer_fault(), 1.0, seed=5)
        b = sd.synthesize(rig_a(), outer_fault(), 1.0, seed=6)
        assert not np.array_equal(a.samples, b.samples)

    def test_healthy_has_no_impulse_band_energy(self):
        rig = rig_a()
        raw = sd.synthesize(rig, sd.FaultSpec(0), 2.0, seed=1)
        for seg in sc.segment_all(raw):
            assert predict_location(seg, rig) is None
            # shaft harmonics present: fundamental dominates its neighborhood
            y = np.abs(sc.dct(seg.samples))
            k1 = sc.frequency_bin_of_hz(rig.shaft_rate_hz, seg.samples.size)
            assert y[k1 - 1 : k1 + 2].max() > 20 * np.median(y)

    def test_severity_orders_band_energy(self):
        rig = rig_a()
        seg_minor = sc.segment_all(sd.synthesize(rig, outer_fault(0.5), 1.0, seed=4))[0]
        seg_severe = sc.segment_all(sd.synthesize(rig, outer_fault(2.0), 1.0, seed=4))[0]
        score_minor, _ = comb_score(seg_minor, rig, 3.58)
        score_severe, _ = comb_score(seg_severe, rig, 3.58)
        assert score_severe > score_minor

    def test_duration_below_one_second_rejected(self):
        with pytest.raises(ConfigError):
            sd.synthesize(rig_a(), sd.FaultSpec(0), 0.5, seed=0)

    def test_unphysical_rig_rejected(self):
        with pytest.raises(ConfigError):
            sd.RigSpec("bad", 1000, 20.0, resonance_hz=800.0, resonance_decay=0.01)

    def test_faulty_spec_needs_impulse_parameters(self):
        with pytest.raises(ConfigError):
            sd.FaultSpec(3)

    def test_location_separable_on_default_grid(self):
        """One spectral statistic alone separates locations; the learning
        task is therefore solvable by construction."""
        correct = total = 0
        for ri, rig in enumerate(sd.default_rigs()):
            for fault in sd.default_faults():
                raw = sd.synthesize(rig, fault, 2.0, seed=sd._derived_seed(7, ri, fault.label))
                for seg in sc.segment_all(raw):
                    correct += predict_location(seg, rig) == fault_location(fault.label)
                    total += 1
        assert correct / total >= 0.95, f"{correct}/{total}"


class TestSplitQuota:
    def test_exact_tenths(self):
        assert sd.split_quota(10) == {"train": 7, "val": 2, "test": 1}
        assert sd.split_quota(60) == {"train": 42, "val": 12, "test": 6}

    @given(st.integers(1, 500))
    def test_sums_and_tolerance(self, n):
        quota = sd.split_quota(n)
        assert sum(quota.values()) == n
        for name, frac in sd.SPLIT_FRACTIONS.items():
            assert abs(quota[name] - frac * n) < 1

    def test_single_segment_goes_to_train(self):
        assert sd.split_quota(1) == {"train": 1, "val": 0, "test": 0}


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    rigs = sd.default_rigs()[:2]
    entries, registry, store = sd.build_dataset(
        rigs, sd.default_faults(), segments_per_cell=10, seed=11,
        out_dir=out, dcn_cfg=sc.DcnConfig(n_f=2000),
    )
    return out, rigs, entries, registry, store


class TestBuildDataset:

    def test_entry_and_split_counts(self, built):
        _, _, entries, _, _ = built
        assert len(entries) == 2 * 10 * 10
        by_split = {s: sum(e.split == s for e in entries) for s in ("train", "val", "test")}
        assert by_split == {"train": 140, "val": 40, "test": 20}

    def test_every_condition_has_training_reference(self, built):
        _, _, entries, registry, store = built
        for cid in range(len(registry)):
            assert store.count(cid) == 7  # 10 healthy segments -> 7 train
            assert store.lookup(cid, seed=0).size == 2000

    def test_manifest_round_trip(self, built):
        out, _, entries, _, _ = built
        assert sd.load_manifest(out / sd.MANIFEST_FILE) == entries

    def test_segment_files_readable(self, built):
        out, rigs, entries, _, _ = built
        samples, rate = sc.read_vseg(out / entries[0].path)
        assert rate in {r.sample_rate_hz for r in rigs}
        assert samples.size == rate

    def test_dataset_cfg_round_trip(self, built):
        out, _, _, _, _ = built
        cfg, seed = sd.read_dataset_cfg(out / sd.DATASET_CFG_FILE)
        assert cfg == sc.DcnConfig(n_f=2000)
        assert seed == 11

    def test_store_reloads(self, built):
        out, _, _, registry, store = built
        store2, registry2 = load_store(out / sd.STORE_DIR)
        assert len(registry2) == len(registry)
        for cid in store.condition_ids():
            assert store2.count(cid) == store.count(cid)

    def test_rebuild_is_byte_identical(self, built, tmp_path):
        out, rigs, _, _, _ = built
        sd.build_dataset(rigs, sd.default_faults(), 10, 11, tmp_path,
                         dcn_cfg=sc.DcnConfig(n_f=2000))
        first = (out / sd.MANIFEST_FILE).read_bytes()
        second = (tmp_path / sd.MANIFEST_FILE).read_bytes()
        assert first == second
        entries = sd.load_manifest(tmp_path / sd.MANIFEST_FILE)
        for e in entries[:40]:
            assert (out / e.path).read_bytes() == (tmp_path / e.path).read_bytes()

    def test_condition_ids_follow_rig_order(self, built):
        _, rigs, entries, registry, _ = built
        for i, rig in enumerate(rigs):
            assert registry.info(i).source == rig.source_tag


class TestImportRecording:
    def _dataset(self, tmp_path):
        rigs = [sd.default_rigs()[0]]
        return sd.build_dataset(rigs, [sd.FaultSpec(0)], 5, 3, tmp_path,
                                dcn_cfg=sc.DcnConfig(n_f=1000))

    def test_three_second_recording_yields_three_entries(self, tmp_path):
        entries, registry, store = self._dataset(tmp_path)
        rec = tmp_path / "capture.vseg"
        sc.write_vseg(rec, np.random.default_rng(0).normal(size=3 * 4000), 4000)
        info = sd.RigSpec("rigX", 4000, 20.0, 1500.0, 0.005).condition_info()
        new = sd.import_recording(
            rec, info, 4, out_dir=tmp_path, registry=registry, store=store,
            dcn_cfg=sc.DcnConfig(n_f=1000), seed=1,
        )
        assert len(new) == 3
        assert all(e.source_tag == "rigX" for e in new)
        assert {e.condition_id for e in new} == {1}

    def test_corrupt_magic_rejected(self, tmp_path):
        entries, registry, store = self._dataset(tmp_path)
        rec = tmp_path / "junk.vseg"
        rec.write_bytes(b"XYZW" + b"\x00" * 64)
        info = sd.default_rigs()[1].condition_info()
        with pytest.raises(FormatError):
            sd.import_recording(rec, info, 0, out_dir=tmp_path, registry=registry,
                                store=store, dcn_cfg=sc.DcnConfig(n_f=1000))

    def test_out_of_range_label_rejected(self, tmp_path):
        entries, registry, store = self._dataset(tmp_path)
        rec = tmp_path / "ok.vseg"
        sc.write_vseg(rec, np.ones(4000), 4000)
        info = sd.default_rigs()[1].condition_info()
        with pytest.raises(LabelError):
            sd.import_recording(rec, info, 10, out_dir=tmp_path, registry=registry,
                                store=store, dcn_cfg=sc.DcnConfig(n_f=1000))

    def test_sub_second_recording_rejected(self, tmp_path):
        entries, registry, store = self._dataset(tmp_path)
        rec = tmp_path / "short.vseg"
        sc.write_vseg(rec, np.ones(2000), 4000)
        info = sd.default_rigs()[1].condition_info()
        with pytest.raises(EmptySignalError):
            sd.import_recording(rec, info, 0, out_dir=tmp_path, registry=registry,
                                store=store, dcn_cfg=sc.DcnConfig(n_f=1000))

    def test_healthy_import_grows_reference_pool(self, tmp_path):
        entries, registry, store = self._dataset(tmp_path)
        rec = tmp_path / "healthy.vseg"
        sig = sd.synthesize(sd.default_rigs()[0], sd.FaultSpec(0), 10.0, seed=9)
        sc.write_vseg(rec, sig.samples, sig.sample_rate_hz)
        before = store.count(0)
        new = sd.import_recording(
            rec, sd.default_rigs()[0].condition_info(), 0, out_dir=tmp_path,
            registry=registry, store=store, dcn_cfg=sc.DcnConfig(n_f=1000), seed=2,
        )
        # same condition -> same id, train-split segments become references
        assert {e.condition_id for e in new} == {0}
        assert store.count(0) == before + sum(e.split == "train" for e in new)


def _toy_manifest():
    entries = []
    for source in ("rigA", "rigB", "rigC"):
        for label in (0, 3):
            for split in ("train", "train", "val", "test"):
                entries.append(
                    sd.ManifestEntry(f"{source}/{label}/x.vseg", label, 0, source, split)
                )
    return entries


class TestHoldout:
    def test_excluded_source_leaves_training(self):
        held = sd.holdout_subset(_toy_manifest(), ["rigB"])
        assert not any(e.source_tag == "rigB" and e.split in ("train", "val") for e in held)

    def test_excluded_entries_become_test_set(self):
        entries = _toy_manifest()
        held = sd.holdout_subset(entries, ["rigB"])
        zero_shot = [e for e in held if e.split == "test"]
        assert all(e.source_tag == "rigB" for e in zero_shot)
        assert len(zero_shot) == sum(e.source_tag == "rigB" for e in entries)

    def test_empty_exclusion_is_identity(self):
        entries = _toy_manifest()
        assert sd.holdout_subset(entries, []) == entries

    def test_unknown_tag_rejected(self):
        with pytest.raises(ConfigError):
            sd.holdout_subset(_toy_manifest(), ["rigZ"])
