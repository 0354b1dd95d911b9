import struct

import numpy as np
import pytest
from PIL import Image

from interpfool.data import (IDX_IMAGES_MAGIC, Dataset, DatasetError, IdxBadMagic, IdxCountMismatch, IdxTruncated,
                             batch_iterator, infinite_batches, load_idx, load_image_dir, make_digits_corpus,
                             read_idx_images, write_idx)
from interpfool.pnm import write_pnm


def _write3(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(3, 5, 4), dtype=np.uint8)
    labels = np.array([2, 0, 1], dtype=np.uint8)
    ip, lp = tmp_path / "i.idx", tmp_path / "l.idx"
    write_idx(ip, lp, imgs, labels)
    return ip, lp, imgs, labels


def test_idx_roundtrip(tmp_path):
    ip, lp, imgs, labels = _write3(tmp_path)
    ds = load_idx(ip, lp)
    assert ds.images.shape == (3, 1, 5, 4) and ds.num_classes == 3
    assert np.array_equal(np.round(ds.images[:, 0] * 255).astype(np.uint8), imgs)
    assert ds.labels.tolist() == labels.tolist()


def test_idx_header_fields(tmp_path):
    # only the header is inspected for the shape, so a 60000x28x28 header parses as such
    p = tmp_path / "big.idx"
    p.write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, 60000, 28, 28) + bytes(60000 * 28 * 28))
    assert read_idx_images(p).shape == (60000, 28, 28)


def test_idx_count_mismatch(tmp_path):
    ip, lp, imgs, _ = _write3(tmp_path)
    write_idx(tmp_path / "x", lp, imgs, np.array([0, 1]))
    with pytest.raises(IdxCountMismatch):
        load_idx(ip, lp)


def test_idx_bad_magic(tmp_path):
    ip, lp, _, _ = _write3(tmp_path)
    with pytest.raises(IdxBadMagic):
        load_idx(lp, lp)


def test_idx_truncated(tmp_path):
    ip, lp, _, _ = _write3(tmp_path)
    ip.write_bytes(ip.read_bytes()[:-1])
    with pytest.raises(IdxTruncated):
        load_idx(ip, lp)
    ip.write_bytes(b"\x00\x00")
    with pytest.raises(IdxTruncated):
        load_idx(ip, lp)


def test_error_codes_distinct():
    assert len({IdxBadMagic.code, IdxCountMismatch.code, IdxTruncated.code}) == 3


def _img_dir(tmp_path):
    root = tmp_path / "imgs"
    for cls in ("dog", "cat"):
        (root / cls).mkdir(parents=True)
    write_pnm(root / "cat" / "a.pgm", np.full((4, 4), 10, np.uint8))
    write_pnm(root / "cat" / "b.ppm", np.full((8, 8, 3), 200, np.uint8))
    Image.fromarray(np.full((6, 6), 30, np.uint8)).save(root / "cat" / "c.png")
    for i in range(3):
        write_pnm(root / "dog" / f"{i}.pgm", np.full((4, 4), 100 + i, np.uint8))
    return root


def test_image_dir_layout(tmp_path):
    ds = load_image_dir(_img_dir(tmp_path), size=(4, 4))
    assert len(ds) == 6 and ds.num_classes == 2
    assert ds.class_names == ["cat", "dog"]
    assert ds.labels.tolist() == [0, 0, 0, 1, 1, 1]
    assert ds.images.shape == (6, 1, 4, 4)


def test_image_dir_channel_coercion(tmp_path):
    ds = load_image_dir(_img_dir(tmp_path), size=(4, 4), channels=3)
    assert ds.images.shape == (6, 3, 4, 4)
    gray = load_image_dir(_img_dir(tmp_path / "g"), size=(4, 4), channels=1)
    assert gray.images[1, 0, 0, 0] == pytest.approx(200 / 255)


def test_image_dir_empty_class(tmp_path):
    root = _img_dir(tmp_path)
    (root / "emu").mkdir()
    with pytest.raises(DatasetError, match="emu"):
        load_image_dir(root)


def test_image_dir_skips_undecodable(tmp_path):
    root = _img_dir(tmp_path)
    (root / "dog" / "bad.pgm").write_bytes(b"P5 garbage")
    ds = load_image_dir(root, size=(4, 4))
    assert len(ds) == 6 and ds.skipped == 1


def test_batch_sizes():
    ds = Dataset(np.zeros((5, 1, 2, 2)), None, 2)
    assert [len(b) for b in batch_iterator(ds, 2)] == [2, 2, 1]


def test_batch_seeded_and_unshuffled():
    ds = Dataset(np.zeros((9, 1, 2, 2)), None, 2)
    a = np.concatenate(list(batch_iterator(ds, 4, seed=3)))
    b = np.concatenate(list(batch_iterator(ds, 4, seed=3)))
    assert a.tolist() == b.tolist() and sorted(a.tolist()) == list(range(9))
    assert np.concatenate(list(batch_iterator(ds, 4, shuffle=False))).tolist() == list(range(9))


def test_batch_rejects_zero():
    with pytest.raises(ValueError):
        list(batch_iterator(Dataset(np.zeros((2, 1, 2, 2)), None, 2), 0))


def test_infinite_batches_cover_each_epoch():
    ds = Dataset(np.zeros((7, 1, 2, 2)), None, 2)
    it = infinite_batches(ds, 3, seed=1)
    first = np.concatenate([next(it) for _ in range(3)])
    second = np.concatenate([next(it) for _ in range(3)])
    assert sorted(first.tolist()) == sorted(second.tolist()) == list(range(7))
    assert first.tolist() != second.tolist()


def test_normalization_frozen_stats():
    rng = np.random.default_rng(0)
    tr = Dataset(rng.uniform(size=(50, 2, 4, 4)), None, 2)
    stats = tr.fit_norm()
    n = tr.normalized(stats)
    assert np.all(np.abs(n.images.mean(axis=(0, 2, 3))) < 0.1)
    te = Dataset(rng.uniform(size=(5, 2, 4, 4)), None, 2).normalized(stats)
    assert te.norm == stats
    with pytest.raises(DatasetError):
        n.normalized(stats)


def test_value_range_normalized():
    ds = Dataset(np.zeros((1, 1, 2, 2)), None, 2)
    assert ds.value_range() == (0.0, 1.0)
    from interpfool.data import NormStats

    lo, hi = ds.normalized(NormStats((0.5,), (0.25,))).value_range()
    assert (lo, hi) == (-2.0, 2.0)


@pytest.mark.parametrize("kw", [dict(labels=np.array([0, 5])), dict(labels=np.array([0])),
                                dict(images=np.full((2, 1, 2, 2), np.nan))])
def test_dataset_invariants(kw):
    args = dict(images=np.zeros((2, 1, 2, 2)), labels=np.array([0, 1]), num_classes=2)
    args.update(kw)
    with pytest.raises(DatasetError):
        Dataset(**args)


def test_digits_corpus_deterministic():
    a = make_digits_corpus(30, 10, seed=2)
    b = make_digits_corpus(30, 10, seed=2)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert a[0].shape == (30, 28, 28) and a[2].shape == (10, 28, 28)
    assert set(a[1].tolist()) <= set(range(10))
