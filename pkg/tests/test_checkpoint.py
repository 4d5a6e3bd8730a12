import json
import struct

import pytest
import torch

from conftest import SMALL_MLP, all_assignments
from picircuits.checkpoint import MAGIC, CheckpointError, ModelConfig, dumps, load, loads, save
from picircuits.region_graph import build_quad_rg


def _model(mode="pic", merge="cp"):
    cfg = ModelConfig(merge=merge, K=3, categories=2, mode=mode, mlp=SMALL_MLP, seed=2)
    rg = build_quad_rg(2, 2, False)
    return cfg, rg, cfg.build(rg)


def _header(raw):
    n = struct.unpack("<Q", raw[len(MAGIC) + 1:len(MAGIC) + 9])[0]
    return json.loads(raw[len(MAGIC) + 9:len(MAGIC) + 9 + n])


@pytest.mark.parametrize("mode,merge", [("pic", "cp"), ("pc", "tucker")])
def test_roundtrip_preserves_outputs(tmp_path, mode, merge):
    cfg, rg, model = _model(mode, merge)
    with torch.no_grad():
        for p in model.parameters():
            p.mul_(1.5)
    save(tmp_path / "m.ckpt", model, cfg, rg, {"note": "x"})
    ck = load(tmp_path / "m.ckpt")
    assert ck.config == cfg and ck.rg == rg and ck.meta == {"note": "x"}
    x = all_assignments(4, 2)
    with torch.no_grad():
        assert torch.equal(ck.model.log_likelihood(x), model.log_likelihood(x))


def test_header_contents():
    cfg, rg, model = _model()
    h = _header(dumps(model, cfg, rg))
    assert h["mode"] == "pic" and h["K"] == 3 and h["rule"] == "trapezoidal"
    assert h["sharing"] == {"input": "F", "inner": "C"}
    assert all({"M", "L", "seed", "head_order"} <= set(g) for g in h["groups"])
    assert [s["name"] for s in h["sections"]] == list(model.state_dict())


def test_config_dict_roundtrip():
    cfg = ModelConfig(merge="tucker", K=5, mlp=SMALL_MLP)
    assert ModelConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_bad_magic():
    cfg, rg, model = _model()
    raw = dumps(model, cfg, rg)
    with pytest.raises(CheckpointError, match="magic"):
        loads(b"NOTACK" + raw[6:])


def test_truncated():
    cfg, rg, model = _model()
    raw = dumps(model, cfg, rg)
    for cut in (10, len(raw) // 2, len(raw) - 8):
        with pytest.raises(CheckpointError):
            loads(raw[:cut])


def test_version():
    cfg, rg, model = _model()
    raw = bytearray(dumps(model, cfg, rg))
    raw[len(MAGIC)] = 99
    with pytest.raises(CheckpointError, match="version"):
        loads(bytes(raw))


def test_rg_hash_mismatch():
    cfg, rg, model = _model()
    raw = dumps(model, cfg, rg)
    n = struct.unpack("<Q", raw[len(MAGIC) + 1:len(MAGIC) + 9])[0]
    h = _header(raw)
    h["rg_hash"] = "0" * len(h["rg_hash"])
    hb = json.dumps(h, sort_keys=True).encode()
    tampered = raw[:len(MAGIC) + 1] + struct.pack("<Q", len(hb)) + hb + raw[len(MAGIC) + 9 + n:]
    with pytest.raises(CheckpointError, match="hash"):
        loads(tampered)


def test_model_and_rg_disagree():
    cfg, rg, model = _model()
    with pytest.raises(CheckpointError):
        loads(dumps(model, cfg, build_quad_rg(3, 2, False)))


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load(tmp_path / "none.ckpt")
