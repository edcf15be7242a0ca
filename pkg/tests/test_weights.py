"""Binary weights container tests: layout, round trips, corruption."""

import struct
import zlib

import numpy as np
import pytest

from cair import model as M
from cair import training as TR
from cair import weights as W
from cair.tensor import ParamStore, Tensor


def tiny_model(seed=0):
    cfg = M.CairConfig(levels=2, width=8, block_counts=(1, 1, 1), variant="S")
    return M.make_cair(cfg, seed=seed)


class TestRawContainer:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        entries = {
            "a.weight": rng.standard_normal((4, 3, 3, 3)).astype(np.float32),
            "a.bias": rng.standard_normal(4).astype(np.float32),
            "b": rng.standard_normal((2, 2)).astype(np.float64),
            "scalar": np.asarray(7.25),
        }
        p = str(tmp_path / "w.cairw")
        W.save_weights(p, entries)
        back = W.load_weights(p)
        assert list(back.keys()) == list(entries.keys())
        for k in entries:
            assert back[k].dtype == entries[k].dtype
            assert np.array_equal(back[k], entries[k])

    def test_header_layout(self, tmp_path):
        p = str(tmp_path / "w.cairw")
        W.save_weights(p, {"x": np.zeros(2, dtype=np.float32)})
        raw = open(p, "rb").read()
        assert raw[:6] == b"CAIRW1"
        assert struct.unpack("<I", raw[6:10])[0] == 1       # version
        assert struct.unpack("<Q", raw[10:18])[0] == 1      # entry count
        assert struct.unpack("<I", raw[18:22])[0] == 1      # name length
        assert raw[22:23] == b"x"
        assert raw[23] == 1                                 # rank
        assert struct.unpack("<Q", raw[24:32])[0] == 2      # dim
        assert raw[32] == 0                                 # f32 code
        # payload 8 bytes + CRC32 of everything before it
        assert len(raw) == 33 + 8 + 4
        assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(raw[:-4])

    def test_crc_corruption_detected(self, tmp_path):
        p = str(tmp_path / "w.cairw")
        W.save_weights(p, {"x": np.ones(4, dtype=np.float32)})
        raw = bytearray(open(p, "rb").read())
        raw[30] ^= 0xFF
        open(p, "wb").write(bytes(raw))
        with pytest.raises(W.WeightsError, match="corrupt weights"):
            W.load_weights(p)

    def test_truncation_detected(self, tmp_path):
        p = str(tmp_path / "w.cairw")
        W.save_weights(p, {"x": np.ones(4, dtype=np.float32)})
        raw = open(p, "rb").read()
        open(p, "wb").write(raw[:len(raw) // 2])
        with pytest.raises(W.WeightsError):
            W.load_weights(p)

    def test_bad_magic_detected(self, tmp_path):
        p = str(tmp_path / "w.cairw")
        W.save_weights(p, {"x": np.ones(1, dtype=np.float32)})
        raw = bytearray(open(p, "rb").read())
        raw[:6] = b"NOTCAI"
        # keep the CRC consistent so the magic check itself fires
        body = bytes(raw[:-4])
        open(p, "wb").write(body + struct.pack("<I", zlib.crc32(body)))
        with pytest.raises(W.WeightsError, match="magic"):
            W.load_weights(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(W.WeightsError, match="missing.cairw"):
            W.load_weights(str(tmp_path / "missing.cairw"))

    def test_unsupported_dtype_rejected(self, tmp_path):
        with pytest.raises(Exception):
            W.save_weights(str(tmp_path / "w.cairw"),
                           {"x": np.zeros(2, dtype=np.int32)})

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(Exception):
            W.save_weights(str(tmp_path / "w.cairw"), {})


class TestStoreRoundTrip:
    def test_model_save_load_bit_exact(self, tmp_path):
        mdl = tiny_model(seed=3)
        p = str(tmp_path / "m.cairw")
        W.save_store(p, mdl.store)
        other = tiny_model(seed=9)
        changed = any(
            not np.array_equal(other.store[n].data, mdl.store[n].data)
            for n in mdl.store.names()
        )
        assert changed  # different seeds differ before loading
        W.load_into_store(p, other.store)
        for n in mdl.store.names():
            assert np.array_equal(other.store[n].data, mdl.store[n].data), n

    def test_forward_identical_after_round_trip(self, tmp_path):
        mdl = tiny_model(seed=3)
        for n, t in mdl.store.items():
            if n.endswith(("beta_scale", "gamma_scale")):
                t.data[:] = 0.3
        x = Tensor(np.random.default_rng(0).random((1, 3, 16, 16),
                                                   ).astype(np.float32))
        before = M.forward(x, mdl).data.copy()
        p = str(tmp_path / "m.cairw")
        W.save_store(p, mdl.store)
        fresh = tiny_model(seed=11)
        W.load_into_store(p, fresh.store)
        after = M.forward(x, fresh).data
        assert np.array_equal(before, after)

    def test_shape_mismatch_names_first_entry(self, tmp_path):
        mdl = tiny_model()
        p = str(tmp_path / "m.cairw")
        entries = {n: t.data for n, t in mdl.store.items()}
        entries["intro.weight"] = np.zeros((9, 3, 3, 3), dtype=np.float32)
        W.save_weights(p, entries)
        with pytest.raises(W.WeightsError, match="intro.weight"):
            W.load_into_store(p, tiny_model().store)

    def test_missing_entry_reported(self, tmp_path):
        mdl = tiny_model()
        entries = {n: t.data for n, t in mdl.store.items()}
        entries.pop("ending.bias")
        p = str(tmp_path / "m.cairw")
        W.save_weights(p, entries)
        with pytest.raises(W.WeightsError, match="ending.bias"):
            W.load_into_store(p, tiny_model().store)

    def test_unexpected_entry_reported(self, tmp_path):
        mdl = tiny_model()
        entries = {n: t.data for n, t in mdl.store.items()}
        entries["rogue"] = np.zeros(3, dtype=np.float32)
        p = str(tmp_path / "m.cairw")
        W.save_weights(p, entries)
        with pytest.raises(W.WeightsError, match="rogue"):
            W.load_into_store(p, tiny_model().store)


class TestCheckpointRoundTrip:
    def test_checkpoint_file_resume_bit_exact(self, tmp_path):
        rng = np.random.default_rng(5)
        orig = (0.2 + 0.6 * rng.random((3, 40, 40))).astype(np.float32)
        filt = np.clip(orig * 1.1 - 0.04, 0, 1).astype(np.float32)
        data = [(filt, orig)]
        cfg = TR.TrainConfig(total_iters=16, batch_size=2, patch_size=24,
                             seed=4, log_interval=1, checkpoint_interval=8)

        cfg8 = M.CairConfig(levels=2, width=8, block_counts=(1, 1, 1),
                            variant="plain")
        mdl_a = M.make_cair(cfg8, seed=0)
        logs_a = []
        for _ in TR.train(mdl_a, data, cfg, log_fn=logs_a.append):
            pass

        mdl_b = M.make_cair(cfg8, seed=0)
        gen = TR.train(mdl_b, data, cfg)
        ck = next(gen)
        gen.close()
        p = str(tmp_path / "ck.cairw")
        W.save_checkpoint(p, ck)

        mdl_c = M.make_cair(cfg8, seed=2)
        it, opt = W.load_checkpoint(p, mdl_c.store)
        assert it == 8
        logs_c = []
        for _ in TR.train(mdl_c, data, cfg, opt_state=opt, start_iter=it,
                          log_fn=logs_c.append):
            pass
        assert logs_a[8:] == logs_c
        for n in mdl_a.store.names():
            assert np.array_equal(mdl_a.store[n].data, mdl_c.store[n].data), n

    def test_weights_file_rejected_as_checkpoint(self, tmp_path):
        mdl = tiny_model()
        p = str(tmp_path / "w.cairw")
        W.save_store(p, mdl.store)
        with pytest.raises(W.WeightsError, match="checkpoint"):
            W.load_checkpoint(p, tiny_model().store)
