import struct

import numpy as np
import pytest

from faultps import data


@pytest.fixture
def idx_files(tmp_path):
    rng = np.random.default_rng(4)
    raw = rng.integers(0, 256, size=(50, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, size=50, dtype=np.uint8)
    images_path = tmp_path / "images-idx3-ubyte"
    labels_path = tmp_path / "labels-idx1-ubyte"
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", data.IDX_IMAGES_MAGIC, 50, 28, 28))
        f.write(raw.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", data.IDX_LABELS_MAGIC, 50))
        f.write(labels.tobytes())
    return images_path, labels_path, raw, labels


def test_load_idx_parses_and_normalizes(idx_files):
    images_path, labels_path, raw, labels = idx_files
    ds = data.load_idx(images_path, labels_path)
    assert len(ds) == 50
    assert ds.images.shape == (50, 1, 28, 28)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert np.array_equal(ds.labels, labels.astype(np.int64))
    assert np.array_equal(ds.images[:, 0] * 255.0, raw.astype(np.float64))


def test_idx_round_trip(idx_files, tmp_path):
    images_path, labels_path, _, _ = idx_files
    ds = data.load_idx(images_path, labels_path)
    out_i, out_l = tmp_path / "i2", tmp_path / "l2"
    data.save_idx(ds, out_i, out_l)
    back = data.load_idx(out_i, out_l)
    assert np.array_equal(back.images, ds.images)
    assert np.array_equal(back.labels, ds.labels)


def test_labels_file_as_images_is_bad_magic(idx_files):
    images_path, labels_path, _, _ = idx_files
    with pytest.raises(data.DataError, match="bad magic"):
        data.load_idx(labels_path, labels_path)


def test_count_mismatch_rejected(idx_files, tmp_path):
    images_path, _, _, labels = idx_files
    short = tmp_path / "short-labels"
    with open(short, "wb") as f:
        f.write(struct.pack(">II", data.IDX_LABELS_MAGIC, 49))
        f.write(labels[:49].tobytes())
    with pytest.raises(data.DataError, match="count"):
        data.load_idx(images_path, short)


def test_truncated_image_data_rejected(idx_files, tmp_path):
    images_path, labels_path, raw, _ = idx_files
    cut = tmp_path / "cut-images"
    cut.write_bytes(images_path.read_bytes()[:-100])
    with pytest.raises(data.DataError, match="truncated"):
        data.load_idx(cut, labels_path)


def test_synthetic_is_deterministic_and_covers_all_classes():
    a = data.synthetic(1000, 10, seed=1)
    b = data.synthetic(1000, 10, seed=1)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)
    assert set(a.labels.tolist()) == set(range(10))
    assert a.images.min() >= 0.0 and a.images.max() <= 1.0
    c = data.synthetic(1000, 10, seed=2)
    assert not np.array_equal(a.images, c.images)


def test_synthetic_needs_one_sample_per_class():
    with pytest.raises(data.DataError):
        data.synthetic(5, 10, seed=0)


def test_shards_partition_the_dataset():
    ds = data.synthetic(10, 10, seed=0)
    s0 = data.shard(ds, 2, 0, seed=3)
    s1 = data.shard(ds, 2, 1, seed=3)
    assert len(s0.indices) == len(s1.indices) == 5
    union = set(s0.indices.tolist()) | set(s1.indices.tolist())
    assert union == set(range(10))
    assert not set(s0.indices.tolist()) & set(s1.indices.tolist())


def test_same_seed_same_shards():
    ds = data.synthetic(100, 10, seed=0)
    a = data.shard(ds, 4, 2, seed=9)
    b = data.shard(ds, 4, 2, seed=9)
    assert np.array_equal(a.indices, b.indices)


def test_batch_ids_unique_and_disjoint_across_workers():
    ds = data.synthetic(6000, 10, seed=0)
    streams = [data.shard(ds, 4, w, seed=1, batch_size=32) for w in range(4)]
    seen = set()
    for stream in streams:
        for _ in range(10):
            b = stream.next_batch()
            assert len(b) == 32
            assert b.batch_id not in seen
            seen.add(b.batch_id)
    assert len(seen) == 40


def test_stream_cycles_with_epoch_counter():
    ds = data.synthetic(10, 10, seed=0)
    stream = data.shard(ds, 1, 0, seed=0, batch_size=4)
    ids = [stream.next_batch().batch_id for _ in range(6)]
    epochs = [e for e, _, _ in ids]
    assert epochs == [0, 0, 0, 1, 1, 1]
    assert len(set(ids)) == 6


def test_empty_shard_rejected():
    ds = data.synthetic(10, 10, seed=0)
    with pytest.raises(data.DataError, match="empty shard"):
        data.shard(ds, 20, 15, seed=0)
    with pytest.raises(data.DataError, match="out of range"):
        data.shard(ds, 2, 2, seed=0)


def test_shuffled_subset_is_seeded():
    ds = data.synthetic(100, 10, seed=0)
    a = data.shuffled_subset(ds, 20, seed=5)
    b = data.shuffled_subset(ds, 20, seed=5)
    assert len(a) == 20
    assert np.array_equal(a.images, b.images)
