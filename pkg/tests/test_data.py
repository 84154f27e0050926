import struct

import numpy as np
import pytest

from nestedvit.data import class_templates, load_idx, make_synthetic, read_idx, write_idx
from nestedvit.errors import ConfigError, FormatError, InputError

PIXELS = bytes(range(4 * 2 * 3))
LABELS = bytes([3, 0, 9, 1])


def image_bytes(pixels=PIXELS, count=4):
    return b"\x00\x00\x08\x03" + struct.pack(">III", count, 2, 3) + pixels


def label_bytes(labels=LABELS):
    return b"\x00\x00\x08\x01" + struct.pack(">I", len(labels)) + labels


@pytest.fixture
def idx_dir(tmp_path):
    (tmp_path / "train-images-idx3-ubyte").write_bytes(image_bytes())
    (tmp_path / "train-labels-idx1-ubyte").write_bytes(label_bytes())
    (tmp_path / "t10k-images-idx3-ubyte").write_bytes(image_bytes())
    (tmp_path / "t10k-labels-idx1-ubyte").write_bytes(label_bytes())
    return tmp_path


def test_handcrafted_fixture_round_trips(idx_dir, tmp_path):
    images = read_idx(idx_dir / "train-images-idx3-ubyte")
    labels = read_idx(idx_dir / "train-labels-idx1-ubyte")
    assert images.shape == (4, 2, 3)
    assert images.tobytes() == PIXELS
    assert labels.tolist() == [3, 0, 9, 1]
    out = tmp_path / "copy-images"
    write_idx(out, images)
    assert out.read_bytes() == image_bytes()


def test_load_idx_normalises_and_keeps_labels(idx_dir):
    ds = load_idx(idx_dir, num_classes=10)
    assert ds.train_images.shape == (4, 1, 2, 3)
    assert ds.train_labels.tolist() == [3, 0, 9, 1]
    np.testing.assert_array_equal(ds.train_images.reshape(-1) * 255, np.arange(24, dtype=np.float32))
    assert ds.train_images.min() >= 0 and ds.train_images.max() <= 1


def test_load_idx_resizes_and_replicates_channels(idx_dir):
    ds = load_idx(idx_dir, num_classes=10, image_size=4, in_channels=3)
    assert ds.train_images.shape == (4, 3, 4, 4)
    np.testing.assert_array_equal(ds.train_images[:, 0], ds.train_images[:, 2])


def test_single_pair_is_split_deterministically(tmp_path):
    (tmp_path / "data-images-idx3-ubyte").write_bytes(image_bytes())
    (tmp_path / "data-labels-idx1-ubyte").write_bytes(label_bytes())
    a = load_idx(tmp_path, val_fraction=0.25, seed=3)
    b = load_idx(tmp_path, val_fraction=0.25, seed=3)
    assert len(a.val_labels) == 1 and len(a.train_labels) == 3
    assert a.train_images.tobytes() == b.train_images.tobytes()
    assert sorted(a.train_labels.tolist() + a.val_labels.tolist()) == [0, 1, 3, 9]


def test_empty_file_is_format_error(tmp_path):
    path = tmp_path / "empty"
    path.write_bytes(b"")
    with pytest.raises(FormatError) as err:
        read_idx(path)
    assert err.value.offset == 0


def test_empty_file_in_directory_is_format_error(idx_dir):
    (idx_dir / "zzz").write_bytes(b"")
    with pytest.raises(FormatError):
        load_idx(idx_dir)


@pytest.mark.parametrize("blob,offset", [
    (b"\x01\x00\x08\x03" + b"\x00" * 8, 0),
    (b"\x00\x00\x0d\x01" + struct.pack(">I", 1) + b"\x00" * 4, 2),
    (b"\x00\x00\x08\x03" + struct.pack(">I", 4), 8),
    (image_bytes()[:-5], len(image_bytes()) - 5),
    (image_bytes() + b"\x00", len(image_bytes())),
], ids=["magic", "dtype", "dims", "payload", "trailing"])
def test_bad_files_report_offsets(tmp_path, blob, offset):
    path = tmp_path / "bad"
    path.write_bytes(blob)
    with pytest.raises(FormatError) as err:
        read_idx(path)
    assert err.value.offset == offset
    assert "offset" in str(err.value)


def test_label_out_of_range_is_input_error(idx_dir):
    (idx_dir / "train-labels-idx1-ubyte").write_bytes(label_bytes(bytes([3, 255, 0, 1])))
    with pytest.raises(InputError, match="255"):
        load_idx(idx_dir, num_classes=10)


def test_synthetic_is_deterministic():
    a = make_synthetic(4, 8, 3, 64, 32, 0.5, seed=9)
    b = make_synthetic(4, 8, 3, 64, 32, 0.5, seed=9)
    for field in ("train_images", "train_labels", "val_images", "val_labels", "train_hard"):
        assert getattr(a, field).tobytes() == getattr(b, field).tobytes()
    c = make_synthetic(4, 8, 3, 64, 32, 0.5, seed=10)
    assert a.train_images.tobytes() != c.train_images.tobytes()


def test_synthetic_mix_is_exact_fraction():
    ds = make_synthetic(4, 8, 3, 100, 40, 0.3, seed=0)
    assert ds.train_hard.sum() == 30 and ds.val_hard.sum() == 12
    assert make_synthetic(4, 8, 3, 10, 10, 0.0).train_hard.sum() == 0
    assert make_synthetic(4, 8, 3, 10, 10, 1.0).train_hard.all()
    assert ds.train_labels.min() >= 0 and ds.train_labels.max() < 4


def test_hard_samples_are_closer_to_noise():
    ds = make_synthetic(3, 8, 3, 600, 10, 0.5, seed=1, template_seed=1)
    t = class_templates(3, 8, 3, 1)
    own = np.einsum("nchw,nchw->n", ds.train_images, t[ds.train_labels]) / t[0].size
    assert own[~ds.train_hard].mean() > own[ds.train_hard].mean() + 0.2


def test_shared_template_seed_keeps_the_task():
    a = make_synthetic(3, 8, 3, 300, 10, 0.0, seed=1, template_seed=5)
    b = make_synthetic(3, 8, 3, 300, 10, 1.0, seed=2, template_seed=5)
    c = make_synthetic(3, 8, 3, 300, 10, 1.0, seed=2, template_seed=6)
    for k in range(3):
        ma = a.train_images[a.train_labels == k].mean(0).ravel()
        mb = b.train_images[b.train_labels == k].mean(0).ravel()
        mc = c.train_images[c.train_labels == k].mean(0).ravel()
        assert np.corrcoef(ma, mb)[0, 1] > 0.8
        assert np.corrcoef(ma, mc)[0, 1] < np.corrcoef(ma, mb)[0, 1]


@pytest.mark.parametrize("mix", [-0.1, 1.5])
def test_mix_outside_unit_interval(mix):
    with pytest.raises(ConfigError):
        make_synthetic(3, 8, 3, 10, 10, mix)


def test_batches_cover_epoch_once():
    ds = make_synthetic(3, 8, 3, 50, 10, 0.5, seed=0)
    seen = np.concatenate([y for _, y in ds.batches(16, seed=1, epoch=0)])
    assert len(seen) == 50 and ds.steps_per_epoch(16) == 4
    first = [y.tolist() for _, y in ds.batches(16, 1, 0)]
    again = [y.tolist() for _, y in ds.batches(16, 1, 0)]
    other = [y.tolist() for _, y in ds.batches(16, 1, 1)]
    assert first == again and first != other
