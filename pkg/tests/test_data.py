import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vibe.data.container import (PathLock, decode, encode, format_manifest, parse_manifest,
                                 read_container, write_container)
from vibe.data.dataset import Dataset, write_arrays, write_synthetic
from vibe.data.presets import PRESETS, get_preset
from vibe.data.regions import (EEG_CHANNELS, MEG_CHANNELS, REGIONS, VISUAL_PATHWAY,
                               ablation_channels, apply_ablation, canonical_order, channel_names,
                               region_config, region_mask, region_of)
from vibe.data.splits import CROSS, WITHIN, make_splits, preset_unit_count
from vibe.data.synth import SynthDataset, SynthSpec
from vibe.errors import ConfigError, FormatError, TruncatedError


def random_tensor(rng):
    rank = int(rng.integers(1, 6))
    shape = tuple(int(s) for s in rng.integers(1, 5, size=rank))
    dtype = np.float32 if rng.random() < 0.5 else np.float64
    bits = rng.integers(0, 2 ** 63, size=int(np.prod(shape)), dtype=np.uint64)
    raw = bits.astype(np.uint32) if dtype == np.float32 else bits
    return raw.view(dtype).reshape(shape)       # arbitrary bit patterns, NaN payloads included


class TestContainer:
    def test_round_trip_latent_tensor(self, tmp_path):
        z = np.random.default_rng(0).standard_normal((4, 16, 63)).astype(np.float32)
        write_container(tmp_path / "z.vibe", {"z": z}, {"kind": "latent"})
        back = read_container(tmp_path / "z.vibe")
        assert back["z"].tobytes() == z.tobytes()
        assert back["z"].shape == z.shape and back["z"].dtype == np.float32
        assert back.manifest == {"kind": "latent"}

    def test_fuzz_round_trip_bit_exact(self):
        rng = np.random.default_rng(1)
        for trial in range(1000):
            tensors = {f"t{i}": random_tensor(rng) for i in range(int(rng.integers(1, 4)))}
            back = decode(encode(tensors, {"trial": trial}))
            assert list(back.tensors) == list(tensors)
            for name, arr in tensors.items():
                assert back[name].dtype == arr.dtype and back[name].shape == arr.shape
                assert back[name].tobytes() == arr.tobytes()
            assert back.manifest == {"trial": str(trial)}

    def test_layout_is_little_endian(self):
        buf = encode({"a": np.array([1.0], dtype=np.float32)}, {})
        assert buf[:4] == b"VIBE"
        assert struct.unpack("<II", buf[4:12]) == (1, 1)
        assert struct.unpack("<I", buf[12:16]) == (1,)
        assert buf[16:17] == b"a"
        assert struct.unpack("<BBQ", buf[17:27]) == (0, 1, 1)
        assert buf[27:31] == np.array([1.0], dtype="<f4").tobytes()
        assert struct.unpack("<Q", buf[31:39]) == (0,)
        assert len(buf) == 39

    def test_bad_magic_rejected_without_partial_read(self, tmp_path):
        buf = bytearray(encode({"a": np.ones(3)}))
        buf[0:4] = b"NOPE"
        with pytest.raises(FormatError, match="magic"):
            decode(bytes(buf))

    def test_bad_version_rejected(self):
        buf = bytearray(encode({"a": np.ones(3)}))
        buf[4:8] = struct.pack("<I", 7)
        with pytest.raises(FormatError, match="version"):
            decode(bytes(buf))

    def test_bad_dtype_code_rejected(self):
        buf = bytearray(encode({"a": np.ones(3)}))
        buf[17] = 9
        with pytest.raises(FormatError, match="dtype"):
            decode(bytes(buf))

    def test_every_truncation_is_rejected(self):
        buf = encode({"a": np.arange(6.0).reshape(2, 3), "b": np.ones(2, np.float32)}, {"k": "v"})
        for cut in range(len(buf)):
            with pytest.raises((TruncatedError, FormatError)):
                decode(buf[:cut])
        assert issubclass(TruncatedError, OSError)

    def test_truncated_payload_is_io_error(self):
        buf = encode({"a": np.ones(100)})
        with pytest.raises(TruncatedError):
            decode(buf[:200])

    def test_trailing_bytes_rejected(self):
        with pytest.raises(FormatError):
            decode(encode({"a": np.ones(2)}) + b"\0")

    def test_inflated_extent_is_truncation(self):
        buf = bytearray(encode({"a": np.ones(2)}))
        buf[19:27] = struct.pack("<Q", 2 ** 40)
        with pytest.raises(TruncatedError):
            decode(bytes(buf))

    def test_encode_preconditions(self):
        with pytest.raises(FormatError):
            encode({"a": np.ones(3, dtype=np.int32)})
        with pytest.raises(FormatError):
            encode({"a": np.ones((0, 3))})
        with pytest.raises(FormatError):
            encode({"": np.ones(3)})

    def test_big_endian_input_is_normalised(self):
        a = np.arange(4.0).astype(">f8")
        back = decode(encode({"a": a}))["a"]
        np.testing.assert_array_equal(back, a)
        assert back.dtype.byteorder in ("=", "<")

    def test_manifest_lines(self):
        text = format_manifest({"b": 2, "a": "x=y"})
        assert text == "a=x=y\nb=2\n"
        assert parse_manifest(text) == {"a": "x=y", "b": "2"}
        with pytest.raises(FormatError):
            format_manifest({"a=b": 1})
        with pytest.raises(FormatError):
            parse_manifest("novalue\n")

    def test_atomic_write_leaves_no_temporaries(self, tmp_path):
        path = tmp_path / "sub" / "x.vibe"
        write_container(path, {"a": np.ones(2)})
        write_container(path, {"a": np.zeros(2)})
        assert sorted(p.name for p in path.parent.iterdir()) == ["x.vibe"]
        np.testing.assert_array_equal(read_container(path)["a"], 0.0)

    def test_lock_is_exclusive(self, tmp_path):
        path = str(tmp_path / "x.vibe")
        with PathLock(path):
            with pytest.raises(TimeoutError):
                with PathLock(path, timeout=0.05):
                    pass
        with PathLock(path, timeout=0.05):
            pass

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(allow_nan=False, width=64), min_size=1, max_size=20),
           st.dictionaries(st.text("abcxyz_", min_size=1, max_size=5), st.text("01 ,.-", max_size=8)))
    def test_round_trip_property(self, values, manifest):
        arr = np.array(values)
        back = decode(encode({"v": arr}, manifest))
        assert back["v"].tobytes() == arr.tobytes()
        assert back.manifest == {k: str(v) for k, v in manifest.items()}


EEG_SIZES = {"frontal": 22, "central": 14, "temporal": 10, "parietal": 14, "occipital": 3}
MEG_SIZES = {"frontal": 67, "central": 52, "parietal": 45, "occipital": 39, "temporal": 68}


class TestRegions:
    @pytest.mark.parametrize("preset,sizes,total", [("eeg", EEG_SIZES, 63), ("meg", MEG_SIZES, 271)])
    def test_partition_with_published_sizes(self, preset, sizes, total):
        regions = region_config(preset)
        assert {r: len(regions[r]) for r in REGIONS} == sizes
        union = [i for r in REGIONS for i in regions[r]]
        assert len(union) == len(set(union)) == total
        assert sorted(union) == list(range(total))

    def test_visual_pathway_is_temporal_plus_occipital(self):
        for preset, size in (("eeg", 13), ("meg", 107)):
            vp = region_mask(preset, VISUAL_PATHWAY)
            assert len(vp) == size
            assert set(vp) == set(region_mask(preset, "temporal")) | set(region_mask(preset, "occipital"))

    def test_eeg_occipital_names(self):
        names = channel_names("eeg")
        assert [names[i] for i in region_mask("eeg", "occipital")] == ["O1", "Oz", "O2"]

    def test_meg_prefix_groups(self):
        assert region_of("MLF01") == region_of("MRF32") == region_of("MZF03") == "frontal"
        assert region_of("MLT34") == "temporal"
        assert sum(1 for n in MEG_CHANNELS if n.startswith("MZ")) == 11
        assert len(set(MEG_CHANNELS)) == 271 and len(set(EEG_CHANNELS)) == 63

    def test_unknown_region_and_channel(self):
        with pytest.raises(ConfigError):
            region_mask("eeg", "limbic")
        with pytest.raises(ConfigError):
            region_of("XYZ")

    def test_toy_montage_covers_regions(self):
        regions = region_config("toy")
        assert all(regions[r] for r in REGIONS)
        assert sum(len(regions[r]) for r in REGIONS) == 12

    def test_canonical_order(self):
        names = channel_names("eeg")
        shuffled = list(np.random.default_rng(0).permutation(names))
        perm = canonical_order(shuffled, "eeg")
        assert [shuffled[i] for i in perm] == names
        with pytest.raises(ConfigError):
            canonical_order(shuffled[:-1], "eeg")


class TestAblation:
    @pytest.mark.parametrize("region,mode,expected", [
        ("frontal", "remove", 41), ("central", "remove", 49), ("temporal", "remove", 53),
        ("parietal", "remove", 49), ("occipital", "remove", 60), (VISUAL_PATHWAY, "keep", 13)])
    def test_eeg_condition_channel_counts(self, region, mode, expected):
        x = np.zeros((2, 63, 5), dtype=np.float32)
        out, kept = apply_ablation(x, region_mask("eeg", region), mode)
        assert out.shape == (2, expected, 5) and len(kept) == expected

    def test_meg_keep_visual_pathway(self):
        out, _ = apply_ablation(np.zeros((271, 3)), region_mask("meg", VISUAL_PATHWAY), "keep")
        assert out.shape == (107, 3)

    def test_remove_and_keep_partition(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(2, 40))
            mask = sorted(set(rng.integers(0, n, size=int(rng.integers(1, n))).tolist()))
            if len(mask) == n:
                continue
            kept = ablation_channels(n, mask, "keep")
            removed = ablation_channels(n, mask, "remove")
            assert sorted(kept + removed) == list(range(n)) and not set(kept) & set(removed)

    def test_selects_correct_rows(self):
        x = np.arange(63 * 2, dtype=np.float64).reshape(63, 2)
        out, kept = apply_ablation(x, region_mask("eeg", "occipital"), "keep")
        np.testing.assert_array_equal(out, x[60:63])

    def test_errors(self):
        with pytest.raises(ConfigError):
            ablation_channels(3, [0, 1, 2], "remove")
        with pytest.raises(ConfigError):
            ablation_channels(3, [5], "keep")
        with pytest.raises(ConfigError):
            ablation_channels(3, [0], "invert")


class TestPresets:
    def test_published_counts(self):
        eeg, meg = get_preset("eeg"), get_preset("meg")
        assert eeg.signal_shape == (63, 250) and meg.signal_shape == (271, 200)
        assert (eeg.train.concepts, eeg.train.images, eeg.train.repetitions) == (1654, 10, 4)
        assert (eeg.test.concepts, eeg.test.images, eeg.test.repetitions) == (200, 1, 80)
        assert (meg.train.concepts, meg.train.images, meg.train.repetitions) == (1854, 12, 1)
        assert (meg.test.concepts, meg.test.images, meg.test.repetitions) == (200, 1, 12)

    def test_channel_names_match_shape(self):
        for p in PRESETS.values():
            assert len(p.channel_names()) == p.channels

    def test_scaled(self):
        small = get_preset("eeg").scaled(train_concepts=3, test_concepts=2, n_subjects=2)
        assert small.train.n_trials == 3 * 10 * 4 and small.test.n_images == 2
        with pytest.raises(ConfigError):
            get_preset("eeg").scaled(train_concepts=0)
        with pytest.raises(ConfigError):
            get_preset("fmri")


class TestSplits:
    def test_loso_published_counts(self):
        for name, per_fold in (("eeg", 148_860), ("meg", 66_744)):
            preset = get_preset(name)
            plan = make_splits(preset.n_subjects, "loso")
            assert len(plan.folds) == preset.n_subjects
            count = preset_unit_count(preset)
            assert all(plan.train_units(f, count) == per_fold for f in plan.folds)

    def test_trial_unit_counts(self):
        preset = get_preset("eeg")
        plan = make_splits(10, "loso")
        assert plan.train_units(plan.folds[0], preset_unit_count(preset, "trial")) == 9 * 66_160

    @pytest.mark.parametrize("protocol", ["subject", "cross", "loso", "leave-one-subject-out"])
    def test_train_and_test_disjoint(self, protocol):
        for fold in make_splits(5, protocol).folds:
            assert not set(fold.train) & fold.test_blocks()

    def test_loso_structure(self):
        fold = make_splits(4, "loso").folds[2]
        assert fold.train == ((0, "train"), (1, "train"), (3, "train"))
        assert fold.tests[CROSS] == ((2, "test"),)
        assert fold.tests[WITHIN] == ((0, "test"), (1, "test"), (3, "test"))

    def test_cross_subject_tests_others(self):
        plan = make_splits(3, "cross")
        assert plan.folds[1].tests[CROSS] == ((0, "test"), (2, "test"))

    def test_subject_count_mismatch(self):
        with pytest.raises(ConfigError):
            make_splits(1, "loso")
        with pytest.raises(ConfigError):
            make_splits(1, "cross")
        assert len(make_splits(1, "subject").folds) == 1
        with pytest.raises(ConfigError):
            make_splits(3, "kfold")


class TestSynth:
    def test_embedding_std_calibrated(self):
        for seed in range(3):
            ds = SynthDataset(SynthSpec("toy", seed=seed))
            pooled = np.concatenate([ds.embedding_arrays(s)["tokens"].ravel() for s in ("train", "test")])
            assert 0.0235 <= pooled.std() <= 0.0259

    def test_eeg_shapes_and_counts(self):
        ds = SynthDataset(SynthSpec("eeg", n_subjects=2))
        assert len(ds.trial_keys("train")) == 1654 * 10 * 4
        assert ds.signal(1, "train", 1653, 9, 3).shape == (63, 250)
        assert ds.embedding("test", 199, 0).shape == (257, 768)

    def test_deterministic(self):
        a = SynthDataset(SynthSpec("toy", seed=4))
        b = SynthDataset(SynthSpec("toy", seed=4))
        assert a.split_arrays(1, "train")["signals"].tobytes() == b.split_arrays(1, "train")["signals"].tobytes()
        assert a.embedding_arrays("test")["tokens"].tobytes() == b.embedding_arrays("test")["tokens"].tobytes()
        c = SynthDataset(SynthSpec("toy", seed=5))
        assert not np.array_equal(a.signal(0, "train", 0, 0, 0), c.signal(0, "train", 0, 0, 0))

    def test_repetitions_share_driver_but_not_noise(self):
        ds = SynthDataset(SynthSpec("toy"))
        r0, r1 = ds.signal(0, "train", 3, 1, 0), ds.signal(0, "train", 3, 1, 1)
        clean = ds.clean_signal(0, "train", 3, 1)
        assert not np.array_equal(r0, r1)
        resid = np.concatenate([(r0 - clean).ravel(), (r1 - clean).ravel()])
        assert abs(resid.std() - ds.spec.noise_std) < 0.05

    def test_signal_carries_image_identity(self):
        # averaged repetitions of the same image correlate better than different images
        ds = SynthDataset(SynthSpec("toy"))
        same = np.corrcoef(ds.clean_signal(0, "train", 2, 0).ravel(), ds.signal(0, "train", 2, 0, 1).ravel())[0, 1]
        other = np.corrcoef(ds.clean_signal(0, "train", 2, 0).ravel(), ds.signal(0, "train", 9, 3, 1).ravel())[0, 1]
        assert same > other + 0.2

    def test_visual_channels_dominate(self):
        ds = SynthDataset(SynthSpec("eeg", n_subjects=1))
        _, topo = ds._subject(0)
        vp = region_mask("eeg", VISUAL_PATHWAY)
        rest = [i for i in range(63) if i not in vp]
        assert np.abs(topo[vp]).mean() > 2 * np.abs(topo[rest]).mean()

    def test_out_of_range_indices(self):
        ds = SynthDataset(SynthSpec("toy"))
        with pytest.raises(ConfigError):
            ds.signal(0, "train", 16, 0, 0)
        with pytest.raises(ConfigError):
            ds.signal(2, "train", 0, 0, 0)
        with pytest.raises(ConfigError):
            ds.signal(0, "val", 0, 0, 0)
        with pytest.raises(ConfigError):
            SynthSpec("toy", image_jitter=2.0)


@pytest.fixture(scope="module")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    write_synthetic(root, SynthDataset(SynthSpec("toy", seed=3)))
    return root


class TestDatasetDirectory:
    def test_layout(self, toy_root):
        assert sorted(p.name for p in toy_root.iterdir()) == ["embeddings", "manifest.txt", "test", "train"]
        assert sorted(p.name for p in (toy_root / "train").iterdir()) == ["sub-01.vibe", "sub-02.vibe"]
        m = Dataset(toy_root).manifest
        assert m["embedding_source"] == "synthetic" and m["embedding_shape"] == "17,32"

    def test_units_average_and_trial(self, toy_root):
        ds = Dataset(toy_root)
        trials, tkeys = ds.units(0, "train", "trial")
        avg, akeys = ds.units(0, "train", "average")
        assert trials.shape == (16 * 4 * 2, 12, 32) and avg.shape == (16 * 4, 12, 32)
        ref = SynthDataset(SynthSpec("toy", seed=3))
        expected = (ref.signal(0, "train", 5, 2, 0).astype(np.float64) + ref.signal(0, "train", 5, 2, 1)) / 2
        row = int(np.flatnonzero((akeys[:, 0] == 5) & (akeys[:, 1] == 2))[0])
        np.testing.assert_allclose(avg[row], expected, rtol=1e-6, atol=1e-6)
        with pytest.raises(ConfigError):
            ds.units(0, "train", "epoch")

    def test_pairs_align_embeddings(self, toy_root):
        ds = Dataset(toy_root)
        ref = SynthDataset(SynthSpec("toy", seed=3))
        e, x, keys = ds.pairs(1, "test")
        assert len(e) == len(x) == 8
        for n, (c, i) in enumerate(keys):
            assert e[n].tobytes() == ref.embedding("test", int(c), int(i)).tobytes()

    def test_channel_selection(self, toy_root):
        keep = region_mask("toy", VISUAL_PATHWAY)
        ds = Dataset(toy_root).with_channels(keep)
        assert ds.signal_shape == (len(keep), 32)
        full, _ = Dataset(toy_root).units(0, "test")
        part, _ = ds.units(0, "test")
        np.testing.assert_array_equal(part, full[:, keep])

    def test_external_channel_order_is_canonicalised(self, tmp_path):
        preset = get_preset("toy").scaled(train_concepts=2, test_concepts=1, n_subjects=1)
        names = channel_names("toy")
        perm = np.random.default_rng(0).permutation(len(names))
        stored = [names[i] for i in perm]
        rng = np.random.default_rng(1)
        canonical = rng.standard_normal((1, 12, 32)).astype(np.float32)
        arrays = {"signals": canonical[:, perm], "concept": np.zeros(1), "image": np.zeros(1),
                  "repetition": np.zeros(1)}
        emb = {"tokens": np.ones((1, 3, 4), np.float32), "concept": np.zeros(1), "image": np.zeros(1)}
        write_arrays(tmp_path, preset, {(0, "train"): arrays, (0, "test"): arrays},
                     {"train": emb, "test": emb}, stored)
        ds = Dataset(tmp_path)
        assert ds.source == "external" and ds.embedding_shape == (3, 4)
        np.testing.assert_array_equal(ds.units(0, "train", "trial")[0], canonical)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ConfigError):
            Dataset(tmp_path)

    def test_missing_embedding_is_format_error(self, toy_root):
        with pytest.raises(FormatError):
            Dataset(toy_root).embeddings("test", np.array([[99, 0]]))
