import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from versreid import checkpoint as ck
from versreid.config import ConfigParseError, RunConfig, parse_config, parse_config_text
from versreid.model import ModelConfig, forward_bank, init_bank
from versreid.pipeline import branch_from_tensors, to_checkpoint


# -- config ---------------------------------------------------------------------

class TestConfig:
    def test_empty_file_gives_defaults(self, tmp_path):
        p = tmp_path / "empty.cfg"
        p.write_text("")
        assert parse_config(p) == RunConfig()
        assert parse_config(None) == RunConfig()

    def test_alpha_override(self):
        cfg = parse_config_text("alpha = 0.5\n")
        assert cfg.loss.alpha == 0.5
        assert parse_config_text("alpha = 1.0").loss.alpha == 1.0

    def test_comments_and_blank_lines(self):
        cfg = parse_config_text("# header\n\nstride = 4   # overlapping\nmpda = off\nP=4\n")
        assert cfg.model.stride == 4 and cfg.pretrain.mpda is False and cfg.P == 4

    def test_typed_error_names_line(self):
        with pytest.raises(ConfigParseError) as e:
            parse_config_text("margin = 0.3\nalpha = banana\n")
        assert e.value.line == 2
        assert ":2:" in str(e.value) and "alpha" in str(e.value)

    def test_unknown_key_named(self):
        with pytest.raises(ConfigParseError, match="'learning_rate'") as e:
            parse_config_text("\nlearning_rate = 1\n")
        assert e.value.line == 2

    def test_malformed_line(self):
        with pytest.raises(ConfigParseError) as e:
            parse_config_text("epochs 3\n")
        assert e.value.line == 1

    def test_duplicate_key(self):
        with pytest.raises(ConfigParseError, match="duplicate"):
            parse_config_text("seed = 1\nseed = 2\n")

    def test_semantic_validation(self):
        with pytest.raises(ConfigParseError):
            parse_config_text("epochs = 0\n")
        with pytest.raises(ConfigParseError):
            parse_config_text("stride = 5\n")

    def test_tuple_values(self):
        cfg = parse_config_text("brightness = 0.8, 1.2\n")
        assert cfg.aug.brightness == (0.8, 1.2)

    def test_replace(self):
        cfg = RunConfig().replace(lr="0.1", epochs=3, distill="kl")
        assert cfg.optim.lr == 0.1 and cfg.optim.epochs == 3 and cfg.loss.distill == "kl"

    def test_desk_defaults(self):
        cfg = RunConfig()
        assert (cfg.P, cfg.K) == (8, 4)
        assert (cfg.optim.epochs, cfg.optim.distill_epochs, cfg.optim.warmup_epochs) == (30, 30, 5)
        assert (cfg.optim.momentum, cfg.optim.weight_decay) == (0.9, 1e-4)
        assert (cfg.model.prompts_per_scene, cfg.model.versatile_prompts) == (2, 5)
        assert cfg.loss.alpha == 1.0 and cfg.loss.margin == 0.3


# -- checkpoint -------------------------------------------------------------------

names = st.text(st.characters(codec="utf-8", exclude_categories=("Cs",)), min_size=1, max_size=12)
tensors = st.dictionaries(
    names,
    arrays(np.float32, array_shapes(min_dims=0, max_dims=3, max_side=4),
           elements=st.floats(-1e6, 1e6, width=32)),
    max_size=5,
)


class TestCheckpoint:
    @given(tensors, st.integers(0, 2**64 - 1), st.binary(min_size=32, max_size=32))
    @settings(max_examples=60, deadline=None)
    def test_round_trip_bytes(self, tmap, step, rng_state):
        raw = ck.encode(ck.Checkpoint(tmap, step, rng_state))
        back = ck.decode(raw)
        assert back.step == step and back.rng_state == rng_state
        assert list(back.tensors) == list(tmap)
        for n in tmap:
            assert back.tensors[n].shape == np.asarray(tmap[n]).shape
            assert back.tensors[n].tobytes() == np.asarray(tmap[n], np.float32).tobytes()
        assert ck.encode(back) == raw

    def test_save_load_save_identical(self, tmp_path):
        b = init_bank(ModelConfig(num_classes=4), np.random.default_rng(0))
        rng = np.random.default_rng(5)
        rng.random(3)
        d1 = ck.save(tmp_path / "a.ckpt", to_checkpoint(b, 17, rng))
        d2 = ck.save(tmp_path / "b.ckpt", ck.load(tmp_path / "a.ckpt"))
        assert d1 == d2 == ck.file_digest(tmp_path / "b.ckpt")

    def test_forward_bitwise_after_reload(self, tmp_path):
        cfg = ModelConfig(num_classes=4)
        b = init_bank(cfg, np.random.default_rng(0))
        ck.save(tmp_path / "a.ckpt", to_checkpoint(b))
        b2 = branch_from_tensors(ck.load(tmp_path / "a.ckpt").tensors, ModelConfig())
        x = np.random.default_rng(1).random((3, 32, 16, 3)).astype(np.float32)
        f1, p1 = forward_bank(x, [0, 2, 4], b)
        f2, p2 = forward_bank(x, [0, 2, 4], b2)
        assert f1.data.tobytes() == f2.data.tobytes() and p1.data.tobytes() == p2.data.tobytes()
        assert b2.kind == "bank" and b2.config.num_classes == 4

    def test_rng_state_resumes_stream(self):
        rng = np.random.default_rng(42)
        rng.random(10)
        clone = ck.rng_from_bytes(ck.rng_to_bytes(rng))
        np.testing.assert_array_equal(rng.random(5), clone.random(5))

    def test_layout(self):
        raw = ck.encode(ck.Checkpoint({"w": np.array([[1.0, 2.0]], np.float32)}, 7, bytes(range(32))))
        assert raw[:4] == b"VRSR" and raw[4] == 1
        assert struct.unpack("<I", raw[5:9]) == (1,)
        assert struct.unpack("<H", raw[9:11]) == (1,) and raw[11:12] == b"w"
        assert raw[12] == 2 and struct.unpack("<2I", raw[13:21]) == (1, 2)
        assert struct.unpack("<2f", raw[21:29]) == (1.0, 2.0)
        assert struct.unpack("<Q", raw[29:37]) == (7,) and raw[37:] == bytes(range(32))

    def test_bad_magic(self):
        with pytest.raises(ck.CheckpointError, match="magic") as e:
            ck.decode(b"XXXX" + bytes(40))
        assert e.value.offset == 0

    def test_bad_version(self):
        raw = bytearray(ck.encode(ck.Checkpoint({})))
        raw[4] = 9
        with pytest.raises(ck.CheckpointError, match="version"):
            ck.decode(bytes(raw))

    def test_corrupted_length_names_record(self):
        raw = bytearray(ck.encode(ck.Checkpoint({"a": np.ones(2, np.float32),
                                                 "bias": np.ones(3, np.float32)})))
        # second record starts after header (9) + first record (2 + 1 + 1 + 4 + 8)
        second = 9 + 16
        raw[second + 2 + 4 + 1:second + 2 + 4 + 1 + 4] = struct.pack("<I", 10_000)
        with pytest.raises(ck.CheckpointError, match=r"tensor record 1 \('bias'\)") as e:
            ck.decode(bytes(raw))
        assert e.value.offset > second

    @pytest.mark.parametrize("cut", [3, 8, 12, 30, -1])
    def test_truncation(self, cut):
        raw = ck.encode(ck.Checkpoint({"w": np.ones(4, np.float32)}))
        with pytest.raises(ck.CheckpointError, match="truncated|magic"):
            ck.decode(raw[:cut])

    def test_trailing_bytes(self):
        with pytest.raises(ck.CheckpointError, match="trailing"):
            ck.decode(ck.encode(ck.Checkpoint({})) + b"\0")
