"""Run-configuration text format tests."""

import pytest

from cair import config as C
from cair.tensor import ContractViolation

SAMPLE = """
[model]
levels = 2
width = 16
block_counts = 1,1,1
variant = S
tlsc_window = none
ca_width = none

[train]
lr_init = 0.001
total_iters = 500
batch_size = 4
seed = 11

[data]
root = corpus
index = corpus/index.tsv

[infer]
tta = true
tlsc_window = 64
"""


class TestParsing:
    def test_sample_parses(self):
        cfg = C.parse_run_config(SAMPLE)
        assert cfg.model.levels == 2
        assert cfg.model.width == 16
        assert cfg.model.block_counts == (1, 1, 1)
        assert cfg.model.variant == "S"
        assert cfg.model.tlsc_window is None
        assert cfg.model.ca_width == 16  # resolves to width
        assert cfg.train.total_iters == 500
        assert cfg.train.seed == 11
        assert cfg.train.lr_final == 1e-6  # untouched default
        assert cfg.data.index == "corpus/index.tsv"
        assert cfg.infer.tta is True
        assert cfg.infer.tlsc_window == 64

    def test_missing_sections_use_defaults(self):
        cfg = C.parse_run_config("[train]\nseed = 3\n")
        assert cfg.model.levels == 4
        assert cfg.model.variant == "M"
        assert cfg.train.seed == 3
        assert cfg.infer.tta is False

    def test_unknown_section_rejected(self):
        with pytest.raises(ContractViolation, match="unknown section"):
            C.parse_run_config("[optimizer]\nlr = 1\n")

    def test_unknown_key_rejected(self):
        with pytest.raises(ContractViolation, match="unknown key"):
            C.parse_run_config("[model]\nwidht = 8\n")

    def test_bad_value_rejected(self):
        with pytest.raises(ContractViolation, match="cannot parse"):
            C.parse_run_config("[model]\nlevels = four\n")

    def test_bad_bool_rejected(self):
        with pytest.raises(ContractViolation):
            C.parse_run_config("[infer]\ntta = maybe\n")

    def test_invalid_model_values_propagate(self):
        with pytest.raises(ContractViolation):
            C.parse_run_config("[model]\nlevels = 1\n")


class TestSerialization:
    def test_round_trip_values(self):
        cfg = C.parse_run_config(SAMPLE)
        text = C.serialize_run_config(cfg)
        again = C.parse_run_config(text)
        assert again == cfg

    def test_canonical_fixed_point(self):
        cfg = C.parse_run_config(SAMPLE)
        once = C.serialize_run_config(cfg)
        twice = C.serialize_run_config(C.parse_run_config(once))
        assert once == twice

    def test_all_sections_present(self):
        text = C.serialize_run_config(C.RunConfig())
        for sec in ("[model]", "[train]", "[data]", "[infer]"):
            assert sec in text

    def test_none_spelled_out(self):
        text = C.serialize_run_config(C.RunConfig())
        assert "tlsc_window = none" in text

    def test_file_round_trip(self, tmp_path):
        cfg = C.parse_run_config(SAMPLE)
        p = str(tmp_path / "run.ini")
        C.save_run_config(p, cfg)
        assert C.load_run_config(p) == cfg

    def test_missing_file(self, tmp_path):
        with pytest.raises(IOError):
            C.load_run_config(str(tmp_path / "nope.ini"))
