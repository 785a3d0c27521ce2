import numpy as np
import pytest

from spnkit.dataset import (
    MAX_CLASSES,
    gen_toy_dataset,
    load_sample,
    load_split,
    make_coarse,
    map_to_labels,
    labels_to_map,
    one_hot,
    read_manifest,
    render_sample,
    verify_dataset,
)
from spnkit.errors import ConfigError, FormatError


def test_render_sample_basics():
    rng = np.random.default_rng(0)
    image, labels = render_sample(rng, 48, 3)
    assert image.shape == (48, 48, 3) and image.dtype == np.float32
    assert labels.shape == (48, 48) and labels.dtype == np.int32
    assert image.min() >= 0.0 and image.max() <= 1.0
    assert labels.min() >= 0 and labels.max() <= 2
    assert len(np.unique(labels)) >= 2


def test_render_sample_deterministic():
    a_img, a_lab = render_sample(np.random.default_rng(7), 32, 2)
    b_img, b_lab = render_sample(np.random.default_rng(7), 32, 2)
    assert a_img.tobytes() == b_img.tobytes()
    assert a_lab.tobytes() == b_lab.tobytes()


def test_render_sample_rejects_bad_args():
    rng = np.random.default_rng(1)
    with pytest.raises(ConfigError):
        render_sample(rng, 32, 1)
    with pytest.raises(ConfigError):
        render_sample(rng, 32, MAX_CLASSES + 1)
    with pytest.raises(ConfigError):
        render_sample(rng, 4, 2)


def test_one_hot():
    labels = np.array([[0, 1], [2, 0]])
    oh = one_hot(labels, 3)
    assert oh.shape == (2, 2, 3)
    np.testing.assert_array_equal(oh.argmax(axis=2), labels)
    np.testing.assert_array_equal(oh.sum(axis=2), 1.0)


def test_make_coarse_probabilities():
    rng = np.random.default_rng(2)
    _, labels = render_sample(rng, 64, 3)
    coarse = make_coarse(labels, 3, factor=8, blur=1)
    assert coarse.shape == (64, 64, 3)
    assert coarse.min() >= 0.0
    np.testing.assert_allclose(coarse.sum(axis=2), 1.0, atol=1e-5)
    agree = (coarse.argmax(axis=2) == labels).mean()
    # coarse map tracks the labels but degrades the boundaries
    assert 0.55 < agree < 1.0


def test_labels_map_roundtrip():
    labels = np.arange(6, dtype=np.int32).reshape(2, 3)
    np.testing.assert_array_equal(map_to_labels(labels_to_map(labels)), labels)


def make_ds(tmp_path, **kw):
    args = dict(n_train=3, n_val=2, size=24, classes=2, seed=11,
                coarse_factor=4, coarse_blur=1)
    args.update(kw)
    return gen_toy_dataset(tmp_path / "ds", **args), tmp_path / "ds"


def test_gen_dataset_layout_and_manifest(tmp_path):
    meta, root = make_ds(tmp_path)
    assert meta["classes"] == 2
    assert sorted(p.name for p in (root / "images").iterdir()) == [
        "0000.ppm", "0001.ppm", "0002.ppm", "0003.ppm", "0004.ppm"]
    m, items = read_manifest(root)
    assert m["size"] == "24" and len(items) == 5
    train, val, _ = load_split(root)
    assert train == [0, 1, 2] and val == [3, 4]
    assert verify_dataset(root) == 5


def test_gen_dataset_deterministic(tmp_path):
    _, root1 = make_ds(tmp_path)
    meta2 = gen_toy_dataset(tmp_path / "ds2", n_train=3, n_val=2, size=24,
                            classes=2, seed=11, coarse_factor=4, coarse_blur=1)
    for sub in ("images", "masks", "coarse"):
        for p1 in sorted((root1 / sub).iterdir()):
            p2 = tmp_path / "ds2" / sub / p1.name
            assert p1.read_bytes() == p2.read_bytes(), p1.name


def test_load_sample_consistent(tmp_path):
    _, root = make_ds(tmp_path)
    image, labels, coarse = load_sample(root, 0)
    assert image.shape == (24, 24, 3)
    assert labels.shape == (24, 24)
    assert coarse.shape == (24, 24, 2)
    assert labels.max() <= 1
    np.testing.assert_allclose(coarse.sum(axis=2), 1.0, atol=1e-5)


def test_verify_dataset_detects_tampering(tmp_path):
    _, root = make_ds(tmp_path)
    victim = root / "masks" / "0001.pgm"
    blob = bytearray(victim.read_bytes())
    blob[-1] ^= 0xFF
    victim.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="sha256 mismatch"):
        verify_dataset(root)


def test_verify_dataset_detects_missing_file(tmp_path):
    _, root = make_ds(tmp_path)
    (root / "coarse" / "0002.spnt").unlink()
    with pytest.raises(FormatError, match="missing file"):
        verify_dataset(root)


def test_read_manifest_rejects_garbage(tmp_path):
    root = tmp_path / "bad"
    root.mkdir()
    (root / "manifest.txt").write_text("format=spn-dataset-v1\nnonsense line\n")
    with pytest.raises(FormatError, match="line 2"):
        read_manifest(root)
