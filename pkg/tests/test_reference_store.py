"""Condition registry and reference store tests."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beardiag import reference_store as rs
from beardiag.errors import (
    MissingReferenceError,
    PersistenceError,
    RejectedReferenceError,
)
from beardiag.signal_core import FrequencyRep


def info(rpm=1750.0, load="l1", sensor="acc", source="riga"):
    return rs.ConditionInfo(rpm, load, sensor, source)


def rep(seed, n_f=32):
    return FrequencyRep(np.random.default_rng(seed).normal(size=n_f), n_f)


class TestRegistry:
    def test_first_insertion_gets_zero(self):
        reg = rs.ConditionRegistry()
        assert reg.register(info()) == 0

    def test_reregistration_is_idempotent(self):
        reg = rs.ConditionRegistry()
        a = reg.register(info())
        assert reg.register(info()) == a
        assert len(reg) == 1

    def test_distinct_infos_append(self):
        reg = rs.ConditionRegistry()
        assert reg.register(info()) == 0
        assert reg.register(info(rpm=1800.0)) == 1

    def test_canonical_form(self):
        assert info(1750.0, "L1", "Acc", "RigA").canonical() == "1750.000|l1|acc|riga"
        assert info(None).canonical() == "unknown|l1|acc|riga"

    @given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 3)), max_size=40))
    def test_injective_and_stable(self, pairs):
        reg = rs.ConditionRegistry()
        seen: dict[str, int] = {}
        for rpm_idx, load_idx in pairs:
            i = info(rpm=1000.0 + rpm_idx, load=f"l{load_idx}")
            cid = reg.register(i)
            key = i.canonical()
            if key in seen:
                assert cid == seen[key]
            else:
                assert cid == len(seen)
                seen[key] = cid


class TestStoreDiscipline:
    def test_healthy_train_reference_accepted(self):
        store = rs.ReferenceStore(32)
        store.insert(3, rep(0), fault_label=0, split="train")
        assert store.count(3) == 1

    def test_faulty_reference_rejected(self):
        store = rs.ReferenceStore(32)
        with pytest.raises(RejectedReferenceError):
            store.insert(3, rep(0), fault_label=2, split="train")

    def test_non_training_split_rejected(self):
        store = rs.ReferenceStore(32)
        for split in ("val", "test"):
            with pytest.raises(RejectedReferenceError):
                store.insert(3, rep(0), fault_label=0, split=split)

    def test_single_reference_always_returned(self):
        store = rs.ReferenceStore(32)
        r = rep(1)
        store.insert(0, r, 0, "train")
        for seed in (0, 1, 99):
            np.testing.assert_array_equal(store.lookup(0, seed), r.coefficients)

    def test_lookup_is_deterministic_per_seed(self):
        store = rs.ReferenceStore(32)
        for k in range(3):
            store.insert(5, rep(k), 0, "train")
        first = store.lookup(5, seed=42)
        for _ in range(5):
            np.testing.assert_array_equal(store.lookup(5, seed=42), first)

    def test_unknown_condition_raises(self):
        store = rs.ReferenceStore(32)
        with pytest.raises(MissingReferenceError):
            store.lookup(7, seed=0)

    @given(st.integers(1, 6), st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_lookup_pure_in_contents_and_seed(self, pool_size, seed):
        a = rs.ReferenceStore(8)
        b = rs.ReferenceStore(8)
        for k in range(pool_size):
            a.insert(1, rep(k, 8), 0, "train")
            b.insert(1, rep(k, 8), 0, "train")
        np.testing.assert_array_equal(a.lookup(1, seed), b.lookup(1, seed))


class TestPersistence:
    def _populated(self, n_conditions=5, refs_per=3, n_f=16):
        reg = rs.ConditionRegistry()
        store = rs.ReferenceStore(n_f)
        for c in range(n_conditions):
            cid = reg.register(info(rpm=1000.0 + 7.25 * c, load=f"l{c % 2}"))
            for k in range(refs_per):
                store.insert(cid, rep(100 * c + k, n_f), 0, "train")
        return store, reg

    def test_round_trip_is_bit_exact(self, tmp_path):
        store, reg = self._populated()
        rs.save(store, reg, tmp_path / "store")
        store2, reg2 = rs.load(tmp_path / "store")
        assert len(reg2) == len(reg)
        for cid, i in reg.items():
            assert reg2.info(cid) == i
        for cid in store.condition_ids():
            assert store2.count(cid) == store.count(cid)
            for k in range(store.count(cid)):
                assert np.array_equal(
                    store2.lookup_by_index(cid, k), store.lookup_by_index(cid, k)
                )

    def test_round_trip_preserves_unknown_rpm(self, tmp_path):
        reg = rs.ConditionRegistry()
        reg.register(rs.ConditionInfo(None, "l0", "acc", "x"))
        store = rs.ReferenceStore(4)
        rs.save(store, reg, tmp_path / "s")
        _, reg2 = rs.load(tmp_path / "s")
        assert reg2.info(0).rpm is None

    def test_empty_directory_rejected(self, tmp_path):
        with pytest.raises(PersistenceError):
            rs.load(tmp_path / "nothing_here")

    def test_corrupt_reference_file_rejected(self, tmp_path):
        store, reg = self._populated(n_conditions=1, refs_per=1)
        rs.save(store, reg, tmp_path / "s")
        victim = tmp_path / "s" / "refs" / "0" / "0.vfreq"
        victim.write_bytes(victim.read_bytes()[:-4])
        with pytest.raises(PersistenceError):
            rs.load(tmp_path / "s")

    def test_wrong_magic_rejected(self, tmp_path):
        store, reg = self._populated(n_conditions=1, refs_per=1)
        rs.save(store, reg, tmp_path / "s")
        victim = tmp_path / "s" / "refs" / "0" / "0.vfreq"
        victim.write_bytes(b"XXXX" + victim.read_bytes()[4:])
        with pytest.raises(PersistenceError):
            rs.load(tmp_path / "s")

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 1000))
    @settings(max_examples=15, deadline=None)
    def test_random_store_round_trip(self, n_cond, refs_per, seed):
        import tempfile

        reg = rs.ConditionRegistry()
        store = rs.ReferenceStore(8)
        g = np.random.default_rng(seed)
        for c in range(n_cond):
            cid = reg.register(info(rpm=float(g.integers(500, 4000))))
            for _ in range(refs_per):
                store.insert(cid, g.normal(size=8), 0, "train")
        with tempfile.TemporaryDirectory() as root:
            rs.save(store, reg, root)
            store2, _ = rs.load(root)
        for cid in store.condition_ids():
            for k in range(store.count(cid)):
                assert np.array_equal(
                    store2.lookup_by_index(cid, k), store.lookup_by_index(cid, k)
                )
