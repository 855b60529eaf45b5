import struct

import numpy as np
import pytest

from aspcnet.checkpoint import (MAGIC, CheckpointError, load_checkpoint, read_checkpoint, restore_optimizer,
                                save_checkpoint, write_checkpoint)
from aspcnet.dataio import fit_pca, make_synthetic_scene
from aspcnet.model import Adam, AspcNet, AspcNetConfig
from aspcnet.tensor import Tape, Tensor, precision


def small_config(**kw):
    base = dict(bands=3, patch=7, classes=3, width_scale=0.25, routing_iters=2)
    base.update(kw)
    return AspcNetConfig(**base)


@pytest.fixture
def trained(rng):
    """Network after one optimizer step, so every array is non-trivial."""
    net = AspcNet(small_config())
    opt = Adam(net.named_parameters(), lr=1e-2)
    x = Tensor(rng.normal(size=(4, 7, 7, 3)).astype(np.float32))
    with Tape() as tape:
        from aspcnet.model import margin_loss
        loss = margin_loss(net.forward(x, training=True), [0, 1, 2, 0])
    tape.backward(loss)
    opt.step()
    return net, opt, x


class TestRoundTrip:
    def test_parameters_and_forward_bit_exact(self, tmp_path, trained):
        net, _, x = trained
        save_checkpoint(net, tmp_path / "a.ckpt")
        loaded = load_checkpoint(tmp_path / "a.ckpt")
        for name, p in net.named_parameters().items():
            np.testing.assert_array_equal(loaded.named_parameters()[name].data, p.data)
        for name, b in net.buffers().items():
            np.testing.assert_array_equal(loaded.buffers()[name], b)
        np.testing.assert_array_equal(loaded.forward(x).data, net.forward(x).data)
        assert loaded.cfg == net.cfg

    def test_f64_network(self, tmp_path, rng):
        with precision("f64"):
            net = AspcNet(small_config())
        save_checkpoint(net, tmp_path / "d.ckpt")
        loaded = load_checkpoint(tmp_path / "d.ckpt")
        assert loaded.asp1.weight.dtype == np.float64
        assert loaded.checkpoint.meta["precision"] == "f64"

    def test_same_network_same_bytes(self, tmp_path):
        save_checkpoint(AspcNet(small_config()), tmp_path / "a.ckpt")
        save_checkpoint(AspcNet(small_config()), tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_optimizer_state(self, tmp_path, trained):
        net, opt, _ = trained
        save_checkpoint(net, tmp_path / "o.ckpt", optimizer=opt, meta={"epoch": 7})
        loaded = load_checkpoint(tmp_path / "o.ckpt")
        restored = restore_optimizer(loaded, loaded.checkpoint)
        assert restored.t == opt.t == 1
        assert loaded.checkpoint.meta["epoch"] == "7"
        for name in opt.m:
            np.testing.assert_array_equal(restored.m[name], opt.m[name])
            np.testing.assert_array_equal(restored.v[name], opt.v[name])

    def test_pca_model(self, tmp_path):
        cube, _ = make_synthetic_scene(height=12, width=12, bands=6, block=6)
        pca = fit_pca(cube, 3)
        save_checkpoint(AspcNet(small_config()), tmp_path / "p.ckpt", pca=pca)
        got = read_checkpoint(tmp_path / "p.ckpt").pca()
        np.testing.assert_array_equal(got.components, pca.components)
        np.testing.assert_array_equal(got.out_std, pca.out_std)

    def test_no_pca_returns_none(self, tmp_path):
        save_checkpoint(AspcNet(small_config()), tmp_path / "n.ckpt")
        assert read_checkpoint(tmp_path / "n.ckpt").pca() is None


class TestFormat:
    def test_header_layout(self, tmp_path):
        write_checkpoint(tmp_path / "h.ckpt", {"a": 1}, {"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
        raw = (tmp_path / "h.ckpt").read_bytes()
        assert raw.startswith(MAGIC)
        pos = len(MAGIC)
        (n,) = struct.unpack_from("<I", raw, pos)
        assert raw[pos + 4:pos + 4 + n] == b"a=1\n"
        pos += 4 + n
        assert struct.unpack_from("<I", raw, pos) == (1,)
        pos += 4
        assert struct.unpack_from("<I", raw, pos) == (1,) and raw[pos + 4:pos + 5] == b"w"
        pos += 5
        assert struct.unpack_from("<BI2I", raw, pos) == (1, 2, 2, 3)
        pos += 13
        np.testing.assert_array_equal(np.frombuffer(raw[pos:], "<f4"), np.arange(6))

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT\n" + b"\0" * 8)
        with pytest.raises(CheckpointError, match="magic"):
            read_checkpoint(tmp_path / "x.ckpt")

    def test_version_mismatch(self, tmp_path):
        write_checkpoint(tmp_path / "v.ckpt", {}, {})
        raw = (tmp_path / "v.ckpt").read_bytes()
        (tmp_path / "v.ckpt").write_bytes(b"ASPCKPT2\n" + raw[len(MAGIC):])
        with pytest.raises(CheckpointError, match="version"):
            read_checkpoint(tmp_path / "v.ckpt")

    def test_truncated(self, tmp_path):
        save_checkpoint(AspcNet(small_config()), tmp_path / "t.ckpt")
        raw = (tmp_path / "t.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(raw[:-10])
        with pytest.raises(CheckpointError, match="truncated"):
            read_checkpoint(tmp_path / "t.ckpt")

    def test_trailing_bytes(self, tmp_path):
        write_checkpoint(tmp_path / "j.ckpt", {}, {})
        with open(tmp_path / "j.ckpt", "ab") as fh:
            fh.write(b"junk")
        with pytest.raises(CheckpointError, match="trailing"):
            read_checkpoint(tmp_path / "j.ckpt")

    def test_unknown_dtype_code(self, tmp_path):
        write_checkpoint(tmp_path / "c.ckpt", {}, {"w": np.zeros(1, np.float32)})
        raw = bytearray((tmp_path / "c.ckpt").read_bytes())
        code_pos = len(MAGIC) + 4 + 1 + 4 + 4 + 1
        assert raw[code_pos] == 1
        raw[code_pos] = 9
        (tmp_path / "c.ckpt").write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="dtype"):
            read_checkpoint(tmp_path / "c.ckpt")

    def test_unsupported_array_dtype(self, tmp_path):
        with pytest.raises(CheckpointError):
            write_checkpoint(tmp_path / "i.ckpt", {}, {"w": np.zeros(2, np.int32)})

    def test_width_mismatch_names_parameter(self, tmp_path):
        save_checkpoint(AspcNet(small_config()), tmp_path / "s.ckpt")
        with pytest.raises(CheckpointError, match="asp1.weight"):
            load_checkpoint(tmp_path / "s.ckpt", small_config(width_scale=1.0))

    def test_no_temp_file_left(self, tmp_path):
        save_checkpoint(AspcNet(small_config()), tmp_path / "a.ckpt")
        assert sorted(p.name for p in tmp_path.iterdir()) == ["a.ckpt"]
