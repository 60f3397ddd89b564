import numpy as np
import pytest

from splatprune.checkpoint import CheckpointError, load_checkpoint, manifest_text, save_checkpoint, section_config
from splatprune.config import ConfigError, from_kv, parse_kv, split_sections, to_kv
from splatprune.encoder import EncoderConfig
from splatprune.images import read_float_dump, read_png, write_float_dump, write_png
from splatprune.pruner import PruneConfig
from splatprune.refiner import RefinerConfig


def test_parse_kv():
    vals = parse_kv("a = 1  # comment\n\n b=two words\n")
    assert vals == {"a": "1", "b": "two words"}
    with pytest.raises(ConfigError):
        parse_kv("a = 1\na = 2\n")
    with pytest.raises(ConfigError):
        parse_kv("no equals sign\n")


def test_from_kv_types_and_roundtrip():
    cfg = from_kv(RefinerConfig, {"blocks": "2 2", "knn_k": "8", "zero_init_heads": "false"})
    assert cfg.blocks == (2, 2) and cfg.knn_k == 8 and cfg.zero_init_heads is False
    assert from_kv(RefinerConfig, parse_kv(to_kv(cfg))) == cfg
    p = from_kv(PruneConfig, {"keep_fraction": "0.5", "keep_count": "none"})
    assert p.keep_fraction == 0.5 and p.keep_count is None


def test_from_kv_errors():
    with pytest.raises(ConfigError):
        from_kv(EncoderConfig, {"nope": "1"})
    with pytest.raises(ConfigError):
        from_kv(EncoderConfig, {"feature_width": "wide"})
    with pytest.raises(ConfigError):
        from_kv(EncoderConfig, {"variant": "other"})


def test_split_sections():
    assert split_sections({"a.x": "1", "b.y": "2", "z": "3"}) == {"a": {"x": "1"}, "b": {"y": "2"}, "": {"z": "3"}}


def test_png_roundtrip(tmp_path):
    img = np.random.default_rng(0).random((5, 7, 3))
    write_png(tmp_path / "a.png", img)
    back = read_png(tmp_path / "a.png")
    assert back.shape == (5, 7, 3)
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12


def test_float_dump_roundtrip(tmp_path):
    img = np.random.default_rng(1).random((4, 6, 3)).astype(np.float32)
    write_float_dump(tmp_path / "a.fd", img)
    data = (tmp_path / "a.fd").read_bytes()
    assert data[:4] == b"GSFD" and len(data) == 16 + 4 * 72
    assert np.array_equal(read_float_dump(tmp_path / "a.fd"), img)
    (tmp_path / "b.fd").write_bytes(data[:-1])
    with pytest.raises(ValueError):
        read_float_dump(tmp_path / "b.fd")


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    params = {"w": rng.normal(size=(3, 4)).astype(np.float32), "b": rng.normal(size=4).astype(np.float32),
              "s": np.float32(rng.normal(size=(2, 2, 2)))}
    manifest = manifest_text({"encoder": EncoderConfig(), "refiner": RefinerConfig.desk()})
    save_checkpoint(tmp_path / "m.ckpt", params, manifest)
    back, man = load_checkpoint(tmp_path / "m.ckpt")
    assert set(back) == set(params)
    assert all(np.array_equal(back[k], params[k]) for k in params)
    assert section_config(man, "refiner", RefinerConfig) == RefinerConfig.desk()
    save_checkpoint(tmp_path / "m2.ckpt", dict(reversed(list(params.items()))), manifest)
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()


def test_checkpoint_corruption(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", {"w": np.ones(3, np.float32)}, "")
    data = (tmp_path / "m.ckpt").read_bytes()
    for bad in (b"XXXX" + data[4:], data[:-2], data + b"\0"):
        (tmp_path / "bad.ckpt").write_bytes(bad)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "bad.ckpt")
