import json
import struct

import numpy as np
import pytest

from conftest import tiny_raw
from specfed.bank import KnowledgeBank
from specfed.config import load_config, parse_config
from specfed.exceptions import ConfigError
from specfed.io import MAGIC, SCHEMA_VERSION, ContainerError, read_container, write_container


class TestConfig:
    def test_defaults_fill_in(self):
        cfg = parse_config({"data": {"task": "segmentation"},
                            "federation": {"num_clients": 2, "rounds": 1, "lambda": 0.0, "top_k": 1}})
        assert cfg.model.task == "segmentation" and cfg.federation.lam == 0.0
        assert cfg.data.partition["mode"] == "dirichlet"

    @pytest.mark.parametrize("key", ["lambda", "top_k", "num_clients", "rounds"])
    def test_missing_required_federation_key_names_path(self, key):
        raw = tiny_raw()
        del raw["federation"][key]
        with pytest.raises(ConfigError) as info:
            parse_config(raw)
        assert info.value.key_path == f"federation.{key}"

    def test_missing_task(self):
        raw = tiny_raw()
        del raw["data"]["task"]
        with pytest.raises(ConfigError) as info:
            parse_config(raw)
        assert info.value.key_path == "data.task"

    def test_unknown_key_rejected(self):
        raw = tiny_raw()
        raw["model"]["depht"] = 2
        with pytest.raises(ConfigError) as info:
            parse_config(raw)
        assert info.value.key_path == "model.depht"

    @pytest.mark.parametrize("section,key,value", [
        ("federation", "lambda", "0.1"), ("federation", "top_k", 1.5), ("data", "image_size", True),
        ("federation", "lambda", -1.0), ("federation", "top_k", 0), ("data", "task", "vqa"),
        ("data", "test_fraction", 1.0), ("model", "fusion", "sum"),
    ])
    def test_bad_values(self, section, key, value):
        raw = tiny_raw()
        raw[section][key] = value
        with pytest.raises(ConfigError):
            parse_config(raw)

    def test_roundtrip_through_dict(self):
        cfg = parse_config(tiny_raw("super_resolution"))
        again = parse_config(cfg.to_dict())
        assert again == cfg

    def test_with_seed_and_updated(self):
        cfg = parse_config(tiny_raw())
        assert cfg.with_seed(9).federation.seed == 9
        assert cfg.updated("federation", top_k=4).federation.top_k == 4

    def test_load_errors(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(bad)
        good = tmp_path / "good.json"
        good.write_text(json.dumps(tiny_raw()))
        assert load_config(good) == parse_config(tiny_raw())


class TestContainer:
    def test_roundtrip_preserves_dtype_shape_values(self, tmp_path):
        arrays = {"f": np.arange(6.0).reshape(2, 3), "i": np.array([1, -2], dtype=np.int64),
                  "e": np.zeros((0, 4))}
        write_container(tmp_path / "c.bin", "test", {"n": np.int64(3), "x": [1.5]}, arrays)
        meta, back = read_container(tmp_path / "c.bin", "test")
        assert meta == {"n": 3, "x": [1.5]}
        for k, v in arrays.items():
            assert back[k].dtype == v.dtype and np.array_equal(back[k], v)

    def test_bytes_are_deterministic(self, tmp_path):
        a = {"z": np.ones(3), "a": np.zeros(2)}
        write_container(tmp_path / "1.bin", "k", {"b": 1, "a": 2}, a)
        write_container(tmp_path / "2.bin", "k", {"a": 2, "b": 1}, dict(reversed(list(a.items()))))
        assert (tmp_path / "1.bin").read_bytes() == (tmp_path / "2.bin").read_bytes()

    def test_header_layout(self, tmp_path):
        write_container(tmp_path / "c.bin", "k", {}, {})
        raw = (tmp_path / "c.bin").read_bytes()
        assert raw[:8] == MAGIC
        version, hlen = struct.unpack("<IQ", raw[8:20])
        assert version == SCHEMA_VERSION and json.loads(raw[20:20 + hlen])["kind"] == "k"

    def test_bad_magic_version_kind(self, tmp_path):
        p = tmp_path / "c.bin"
        write_container(p, "k", {}, {"a": np.ones(1)})
        raw = bytearray(p.read_bytes())
        with pytest.raises(ContainerError):
            read_container(p, "other")
        raw[8] = 99
        p.write_bytes(bytes(raw))
        with pytest.raises(ContainerError):
            read_container(p)
        p.write_bytes(b"NOTMAGIC" + bytes(raw[8:]))
        with pytest.raises(ContainerError):
            read_container(p)

    def test_bank_snapshot_roundtrip(self, tmp_path, rng):
        bank = KnowledgeBank(dim=4, rho=1.0, window=3, delta=0.5)
        bank.insert_and_project([(i, v) for i, v in enumerate(rng.normal(size=(5, 4)))])
        bank.save(tmp_path / "bank.bin")
        back = KnowledgeBank.load(tmp_path / "bank.bin")
        assert np.array_equal(back.prototypes, bank.prototypes)
