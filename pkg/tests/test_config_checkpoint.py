import numpy as np
import pytest

from duplexseg.checkpoint import FORMAT_VERSION, load_raw, save_raw
from duplexseg.config import Config, format_config, load_config, parse_config_text
from duplexseg.errors import ConfigurationError, InputError


class TestConfig:
    def test_defaults_complete(self):
        cfg = Config()
        assert cfg["optim.lr"] == 1e-4
        assert cfg["optim.weight_decay"] == 5e-2
        assert cfg["optim.backbone_lr_mult"] == 0.1
        assert cfg["fusion.mode"] == "hffm+ffrm"
        assert cfg["decoder.num_queries"] == 20
        assert cfg["decoder.layers"] == 6
        assert cfg["pixel_decoder.C"] == 64

    def test_unknown_key_rejected(self):
        cfg = Config()
        with pytest.raises(ConfigurationError):
            cfg.set("nope.nothing", 1)
        with pytest.raises(ConfigurationError):
            cfg["nope.nothing"]

    def test_parse_text(self):
        cfg = parse_config_text("train.steps = 42\nbackbone.channels = 8,8,16,16\n# comment\n")
        assert cfg["train.steps"] == 42
        assert cfg["backbone.channels"] == [8, 8, 16, 16]

    def test_format_roundtrip(self):
        cfg = Config()
        cfg.set("fusion.mode", "concat")
        text = format_config(cfg)
        again = parse_config_text(text)
        assert again.to_dict() == cfg.to_dict()

    def test_validate_modality(self):
        cfg = Config()
        cfg.set("model.modality", "thermal")
        with pytest.raises(ConfigurationError):
            cfg.validate()

    def test_load_config_overrides(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("train.steps = 10\n")
        cfg = load_config(path, {"train.steps": "20"})
        assert cfg["train.steps"] == 20


class TestCheckpointFormat:
    def arrays(self):
        rng = np.random.default_rng(0)
        return {
            "model.w": rng.normal(size=(4, 3)).astype(np.float32),
            "model.b": rng.normal(size=(4,)).astype(np.float64),
            "optim.step": np.asarray(7, dtype=np.int64),
            "rng.torch": rng.integers(0, 255, size=16).astype(np.uint8),
        }

    def test_roundtrip_byte_stable(self, tmp_path):
        p1, p2 = tmp_path / "a.ck", tmp_path / "b.ck"
        meta = {"config": {"seed": 1}, "step": 7}
        arrays = self.arrays()
        save_raw(p1, meta, arrays)
        meta2, arrays2 = load_raw(p1)
        save_raw(p2, {k: v for k, v in meta2.items() if k != "format_version"}, arrays2)
        assert p1.read_bytes() == p2.read_bytes()
        for name, arr in arrays.items():
            assert np.array_equal(arrays2[name], arr)
            assert arrays2[name].dtype == arr.dtype

    def test_version_mismatch_message(self, tmp_path):
        import json
        import struct

        path = tmp_path / "v.ck"
        save_raw(path, {"step": 0}, {})
        data = bytearray(path.read_bytes())
        (hlen,) = struct.unpack("<Q", data[8:16])
        header = json.loads(bytes(data[16 : 16 + hlen]))
        header["format_version"] = 99
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        with open(path, "wb") as fh:
            fh.write(b"DSEGCKPT")
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
        with pytest.raises(ConfigurationError) as err:
            load_raw(path)
        assert "99" in str(err.value) and str(FORMAT_VERSION) in str(err.value)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "t.ck"
        save_raw(path, {"step": 0}, self.arrays())
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 8])
        with pytest.raises(InputError, match="truncated"):
            load_raw(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ck"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
        with pytest.raises(InputError, match="magic"):
            load_raw(path)
