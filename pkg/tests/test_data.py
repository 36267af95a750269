import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dcccl.data import (
    LabeledDataset,
    LabelRangeError,
    MalformedHeaderError,
    PartitionError,
    TruncatedPayloadError,
    class_template,
    generate_synthetic,
    load_dataset,
    make_splits,
    partition_by_class,
    save_dataset,
)


@pytest.fixture
def small():
    return generate_synthetic(num_classes=4, samples_per_class=6, image_size=6, channels=2,
                              noise_std=0.5, seed=3)


def _decode(path):
    """Byte-level reader written against the documented layout only."""
    raw = open(path, "rb").read()
    assert raw[:4] == b"DCDS"
    version, k, n = struct.unpack("<IIQ", raw[4:20])
    c, h, w = struct.unpack("<III", raw[20:32])
    off, labels, images = 32, [], []
    for _ in range(n):
        (lab,) = struct.unpack("<I", raw[off:off + 4])
        off += 4
        vals = struct.unpack(f"<{c * h * w}d", raw[off:off + 8 * c * h * w])
        off += 8 * c * h * w
        labels.append(lab)
        images.append(np.array(vals).reshape(c, h, w))
    assert off == len(raw)
    return version, k, np.array(labels), np.array(images)


class TestGenerator:
    def test_shapes_and_balance(self, small):
        assert small.images.shape == (24, 2, 6, 6)
        assert small.images.dtype == np.float64
        np.testing.assert_array_equal(np.bincount(small.labels), [6, 6, 6, 6])

    def test_seeded_determinism(self):
        a = generate_synthetic(num_classes=3, samples_per_class=5, image_size=5, seed=11)
        b = generate_synthetic(num_classes=3, samples_per_class=5, image_size=5, seed=11)
        c = generate_synthetic(num_classes=3, samples_per_class=5, image_size=5, seed=12)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)
        assert not np.array_equal(a.images, c.images)

    def test_noise_free_unshifted_samples_equal_their_template(self):
        ds = generate_synthetic(num_classes=4, samples_per_class=3, image_size=8, noise_std=0.0,
                                max_shift=0, seed=0)
        for img, lab in zip(ds.images, ds.labels):
            np.testing.assert_array_equal(img, class_template(lab, 4, 8, 1))

    def test_templates_are_unit_rms_and_distinct(self):
        ts = [class_template(c, 10, 12, 1) for c in range(10)]
        for t in ts:
            assert np.sqrt((t ** 2).mean()) == pytest.approx(1.0, abs=1e-12)
        for i in range(10):
            for j in range(i + 1, 10):
                assert not np.allclose(ts[i], ts[j])

    def test_train_and_test_draws_differ(self):
        train, test = make_splits(num_classes=3, samples_per_class=4, test_per_class=2, image_size=6, seed=0)
        assert len(train) == 12 and len(test) == 6
        assert not np.array_equal(train.images[:6], test.images)

    @pytest.mark.parametrize("kw", [dict(num_classes=0), dict(samples_per_class=0),
                                    dict(image_size=0), dict(noise_std=-1.0)])
    def test_invalid_arguments(self, kw):
        with pytest.raises(ValueError):
            generate_synthetic(**kw)


class TestFileFormat:
    def test_round_trip_is_exact(self, small, tmp_path):
        p = tmp_path / "d.bin"
        save_dataset(small, p)
        back = load_dataset(p)
        np.testing.assert_array_equal(back.images, small.images)
        np.testing.assert_array_equal(back.labels, small.labels)
        assert back.num_classes == 4

    def test_layout_matches_independent_decoder(self, small, tmp_path):
        p = tmp_path / "d.bin"
        save_dataset(small, p)
        version, k, labels, images = _decode(p)
        assert (version, k) == (1, 4)
        np.testing.assert_array_equal(labels, small.labels)
        np.testing.assert_array_equal(images, small.images)

    def test_truncated_payload(self, small, tmp_path):
        p = tmp_path / "d.bin"
        save_dataset(small, p)
        p.write_bytes(p.read_bytes()[:-5])
        with pytest.raises(TruncatedPayloadError):
            load_dataset(p)

    def test_bad_magic(self, small, tmp_path):
        p = tmp_path / "d.bin"
        save_dataset(small, p)
        p.write_bytes(b"XXXX" + p.read_bytes()[4:])
        with pytest.raises(MalformedHeaderError):
            load_dataset(p)

    def test_short_header(self, tmp_path):
        p = tmp_path / "d.bin"
        p.write_bytes(b"DCDS\x01")
        with pytest.raises(MalformedHeaderError):
            load_dataset(p)

    def test_trailing_bytes(self, small, tmp_path):
        p = tmp_path / "d.bin"
        save_dataset(small, p)
        p.write_bytes(p.read_bytes() + b"\x00")
        with pytest.raises(MalformedHeaderError):
            load_dataset(p)

    def test_label_out_of_range(self, tmp_path):
        p = tmp_path / "d.bin"
        body = struct.pack("<4sIIQIII", b"DCDS", 1, 3, 1, 1, 1, 1) + struct.pack("<Id", 7, 0.5)
        p.write_bytes(body)
        with pytest.raises(LabelRangeError):
            load_dataset(p)

    def test_constructor_rejects_bad_labels(self):
        with pytest.raises(LabelRangeError):
            LabeledDataset(np.zeros((2, 1, 2, 2)), [0, 5], 3)


class TestPartition:
    def test_class_disjoint_without_augmentation(self, small):
        part = partition_by_class(small, [3], augment_fraction=0.0)
        assert set(part.device_train.labels) == {3}
        assert 3 not in set(part.cloud_train.labels)
        assert len(part.cloud_train) + len(part.device_train) == len(small)

    def test_augmentation_count_and_membership(self):
        ds = generate_synthetic(num_classes=5, samples_per_class=20, image_size=4, seed=0)
        part = partition_by_class(ds, [3, 4], augment_fraction=0.1, seed=5)
        assert part.device_original_size == 40
        assert len(part.device_train) == 40 + 4
        assert set(part.augment_ids) <= set(part.cloud_train.ids)
        extra = part.device_train.labels[40:]
        assert not set(extra) & {3, 4}

    def test_full_train_excludes_augmented_copies(self):
        ds = generate_synthetic(num_classes=5, samples_per_class=20, image_size=4, seed=0)
        part = partition_by_class(ds, [4], augment_fraction=0.1, seed=1)
        assert sorted(part.full_train.ids) == list(range(len(ds)))

    @pytest.mark.parametrize("classes,frac", [([], 0.0), ([0, 1, 2, 3], 0.0), ([9], 0.0), ([1], 0.2)])
    def test_invalid(self, small, classes, frac):
        with pytest.raises(PartitionError):
            partition_by_class(small, classes, augment_fraction=frac)


class TestProperties:
    @settings(max_examples=30, deadline=None)
    @given(k=st.integers(2, 6), per=st.integers(1, 8), frac=st.sampled_from([0.0, 0.05, 0.1]),
           data=st.data())
    def test_partition_conserves_samples(self, k, per, frac, data):
        ds = generate_synthetic(num_classes=k, samples_per_class=per, image_size=3, seed=0)
        dev = data.draw(st.sets(st.integers(0, k - 1), min_size=1, max_size=k - 1))
        part = partition_by_class(ds, dev, augment_fraction=frac, seed=2)
        n_dev = int(np.isin(ds.labels, sorted(dev)).sum())
        assert part.device_original_size == n_dev
        assert len(part.device_train) - n_dev == min(int(np.floor(frac * n_dev + 1e-9)), len(ds) - n_dev)
        assert sorted(part.full_train.ids) == list(range(len(ds)))
        assert set(part.device_train.labels[:n_dev]) <= set(dev)
