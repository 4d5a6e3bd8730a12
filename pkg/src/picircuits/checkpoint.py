"""Model configuration and the binary checkpoint format.

Layout (all integers little-endian)::

    magic  b"QPCKPT"  | version u8 | header length u64 | header JSON (utf-8)
    region-graph length u64 | region-graph JSON
    tensor sections, float64 little-endian, in header order

The header records everything needed to rebuild the circuit plus, for each
tensor, its state-dict name, shape and byte offset into the section block.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .neural import MlpConfig
from .qpc import QpcModel, build_circuit
from .region_graph import RegionGraph, content_hash, parse, serialize

MAGIC = b"QPCKPT"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, corrupt or inconsistent checkpoint."""


@dataclass(frozen=True)
class ModelConfig:
    """Everything besides the region graph that determines a model.

    Parameters
    ----------
    merge : {"cp", "tucker"}
    K : int
        Integration points per latent dimension.
    categories : int
        Values per pixel, ``P``.
    mode : {"pic", "pc"}
        Neural (PIC) or direct (PC) parameterization.
    input_sharing : {"F", "C", "N"}
    inner_sharing : {"C", "N"}
    mlp : MlpConfig
    rule : str
        Quadrature rule name.
    seed : int
        Seeds direct-tensor initialization in PC mode.
    """

    merge: str = "cp"
    K: int = 16
    categories: int = 256
    mode: str = "pic"
    input_sharing: str = "F"
    inner_sharing: str = "C"
    mlp: MlpConfig = field(default_factory=MlpConfig)
    rule: str = "trapezoidal"
    seed: int = 0

    def build(self, rg: RegionGraph, folded: bool = True) -> QpcModel:
        circuit = build_circuit(rg, self.merge, self.K, self.categories, mode=self.mode,
                                input_sharing=self.input_sharing, inner_sharing=self.inner_sharing,
                                mlp=self.mlp, rule=self.rule, folded=folded)
        return QpcModel(circuit, seed=self.seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["mlp"] = MlpConfig(**d.get("mlp", {}))
        return cls(**d)


@dataclass
class Checkpoint:
    config: ModelConfig
    rg: RegionGraph
    model: QpcModel
    meta: dict = field(default_factory=dict)


def _group_records(model: QpcModel) -> list[dict]:
    c = model.circuit
    out = []
    for g in range(len(c.groups)):
        rec = {"group": g, "kind": c.groups.kinds[g], "arity": c.groups.arities[g],
               "heads": c.groups.heads[g], "head_order": list(c.groups.members[g])}
        if c.mode.value == "pic":
            rec.update(M=c.mlp.width, L=c.mlp.layers, seed=model.mlps[g].seed)
        out.append(rec)
    return out


def dumps(model: QpcModel, config: ModelConfig, rg: RegionGraph, meta: dict | None = None) -> bytes:
    state = model.state_dict()
    sections, offset = [], 0
    blobs = []
    for name, t in state.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f8")
        sections.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {"mode": config.mode, "K": config.K, "rule": config.rule, "rg_hash": content_hash(rg),
              "merge": config.merge, "sharing": {"input": config.input_sharing, "inner": config.inner_sharing},
              "config": config.to_dict(), "groups": _group_records(model), "sections": sections,
              "meta": meta or {}}
    hbytes = json.dumps(header, sort_keys=True).encode()
    rbytes = serialize(rg).encode()
    buf = io.BytesIO()
    buf.write(MAGIC + bytes([VERSION]))
    buf.write(struct.pack("<Q", len(hbytes)) + hbytes)
    buf.write(struct.pack("<Q", len(rbytes)) + rbytes)
    for b in blobs:
        buf.write(b)
    return buf.getvalue()


def save(path, model: QpcModel, config: ModelConfig, rg: RegionGraph, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(model, config, rg, meta))


def _take(raw: bytes, pos: int, n: int, what: str) -> bytes:
    if pos + n > len(raw):
        raise CheckpointError(f"truncated checkpoint while reading {what}: need {pos + n} bytes, have {len(raw)}")
    return raw[pos:pos + n]


def loads(raw: bytes) -> Checkpoint:
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {raw[:len(MAGIC)]!r}, expected {MAGIC!r}")
    pos = len(MAGIC)
    version = _take(raw, pos, 1, "version")[0]
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos += 1
    (hlen,) = struct.unpack("<Q", _take(raw, pos, 8, "header length"))
    pos += 8
    try:
        header = json.loads(_take(raw, pos, hlen, "header"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    pos += hlen
    (rlen,) = struct.unpack("<Q", _take(raw, pos, 8, "region-graph length"))
    pos += 8
    rg = parse(_take(raw, pos, rlen, "region graph").decode())
    pos += rlen
    if content_hash(rg) != header["rg_hash"]:
        raise CheckpointError("region graph does not match the hash recorded in the header")
    config = ModelConfig.from_dict(header["config"])
    model = config.build(rg)
    if _group_records(model) != header["groups"]:
        raise CheckpointError("group layout of the rebuilt circuit differs from the checkpoint")
    state = {}
    for sec in header["sections"]:
        n = int(np.prod(sec["shape"], dtype=np.int64)) * 8
        blob = _take(raw, pos + sec["offset"], n, sec["name"])
        state[sec["name"]] = torch.from_numpy(np.frombuffer(blob, dtype="<f8").reshape(sec["shape"]).copy())
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"parameter sections do not fit the circuit: {exc}") from exc
    return Checkpoint(config, rg, model, header.get("meta", {}))


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return loads(path.read_bytes())
