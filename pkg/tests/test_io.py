import struct

import numpy as np
import pytest

from sqnet.errors import BadMagicError, FormatError, ShapeError, TruncatedFileError
from sqnet.io import (KB, load_idx, load_model, model_from_bytes, model_info, model_to_bytes,
                      save_model, write_idx_images, write_idx_labels)
from sqnet.nn import Layer, NetworkModel, build_model

from conftest import as_stored


def lenet_1720kb():
    """LeNet-shaped model whose float32 weights total exactly 1720 KB."""
    return build_model([("conv2d", 17, 5), ("relu",), ("maxpool2x2",),
                        ("conv2d", 55, 5), ("relu",), ("maxpool2x2",), ("flatten",),
                        ("dense", 468), ("relu",), ("dense", 10)], (1, 28, 28), seed=0)


class TestModelFile:
    def test_round_trip(self, tmp_path):
        m = as_stored(build_model([("dense", 5), ("relu",), ("dense", 3)], (4,), seed=1))
        save_model(m, tmp_path / "m.sqnm")
        back = load_model(tmp_path / "m.sqnm")
        assert back.input_shape == m.input_shape
        assert [l.kind for l in back.layers] == [l.kind for l in m.layers]
        for a, b in zip(m.weighted_layers(), back.weighted_layers()):
            assert np.array_equal(a.weights, b.weights) and np.array_equal(a.bias, b.bias)
        assert model_to_bytes(back) == model_to_bytes(m)

    def test_conv_round_trip(self, trained_conv):
        back = model_from_bytes(model_to_bytes(trained_conv))
        for a, b in zip(trained_conv.weighted_layers(), back.weighted_layers()):
            assert a.weights.tobytes() == b.weights.tobytes()

    def test_bad_magic(self, trained_mlp):
        data = bytearray(model_to_bytes(trained_mlp))
        data[:4] = b"XXXX"
        with pytest.raises(BadMagicError, match="not a model file"):
            model_from_bytes(bytes(data))

    def test_truncated(self, trained_mlp):
        data = model_to_bytes(trained_mlp)
        with pytest.raises(TruncatedFileError):
            model_from_bytes(data[:-3])

    def test_shape_inconsistency(self):
        m = NetworkModel([Layer("dense", np.ones((3, 2)), np.zeros(3))], (2,))
        data = bytearray(model_to_bytes(m))
        # input shape says 2 features; rewrite it to 5
        struct.pack_into("<I", data, 9, 5)
        with pytest.raises(ShapeError):
            model_from_bytes(bytes(data))

    def test_error_classes_distinct(self):
        assert len({BadMagicError, TruncatedFileError, ShapeError}) == 3
        for cls in (BadMagicError, TruncatedFileError, ShapeError):
            assert issubclass(cls, FormatError)

    def test_1720kb_payload(self):
        info = model_info(lenet_1720kb())
        assert info["payload_bytes"] == 1720 * KB
        assert info["payload_kb"] == 1720.0
        assert info["L"] == 4


def _fixture_images():
    imgs = np.zeros((4, 28, 28), dtype=np.uint8)
    imgs[1, 3, 4] = 255
    imgs[2] = 128
    imgs[3, :, 0] = 51
    return imgs


class TestIdx:
    def test_handcrafted_fixture(self, tmp_path):
        # header bytes written by hand, independent of write_idx_*
        imgs = _fixture_images()
        (tmp_path / "i.idx").write_bytes(
            bytes([0, 0, 8, 3, 0, 0, 0, 4, 0, 0, 0, 28, 0, 0, 0, 28]) + imgs.tobytes())
        (tmp_path / "l.idx").write_bytes(bytes([0, 0, 8, 1, 0, 0, 0, 4, 3, 1, 4, 1]))
        ds = load_idx(tmp_path / "i.idx", tmp_path / "l.idx")
        assert ds.inputs.shape == (4, 1, 28, 28)
        assert len(ds) == 4
        assert list(ds.labels) == [3, 1, 4, 1]
        assert not ds.inputs[0].any()
        assert ds.inputs[1, 0, 3, 4] == 1.0
        assert ds.inputs[3, 0, 5, 0] == pytest.approx(0.2)
        assert ds.inputs.min() >= 0 and ds.inputs.max() <= 1

    def test_writer_matches_hand_layout(self, tmp_path):
        imgs = _fixture_images()
        write_idx_images(tmp_path / "i.idx", imgs)
        write_idx_labels(tmp_path / "l.idx", [3, 1, 4, 1])
        assert (tmp_path / "l.idx").read_bytes() == bytes([0, 0, 8, 1, 0, 0, 0, 4, 3, 1, 4, 1])
        assert (tmp_path / "i.idx").read_bytes()[:16] == bytes(
            [0, 0, 8, 3, 0, 0, 0, 4, 0, 0, 0, 28, 0, 0, 0, 28])

    def test_count_mismatch(self, tmp_path):
        write_idx_images(tmp_path / "i.idx", _fixture_images())
        write_idx_labels(tmp_path / "l.idx", [0, 1, 2])
        with pytest.raises(FormatError, match="count mismatch"):
            load_idx(tmp_path / "i.idx", tmp_path / "l.idx")

    def test_magic_mismatch(self, tmp_path):
        write_idx_images(tmp_path / "i.idx", _fixture_images())
        write_idx_labels(tmp_path / "l.idx", [0, 1, 2, 3])
        with pytest.raises(BadMagicError):
            load_idx(tmp_path / "l.idx", tmp_path / "i.idx")

    def test_gzip(self, tmp_path):
        import gzip
        write_idx_images(tmp_path / "i.idx", _fixture_images())
        write_idx_labels(tmp_path / "l.idx", [0, 1, 2, 3])
        for name in ("i.idx", "l.idx"):
            (tmp_path / (name + ".gz")).write_bytes(gzip.compress((tmp_path / name).read_bytes()))
        ds = load_idx(tmp_path / "i.idx.gz", tmp_path / "l.idx.gz", num_classes=10)
        assert ds.num_classes == 10 and len(ds) == 4
