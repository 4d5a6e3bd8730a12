"""Command-line interface: ``picircuits <command> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 data or checkpoint
error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import checkpoint as ckpt
from .data import ColorTransform, DataError, apply_transform, load, save, train_valid_split
from .neural import MlpConfig
from .pic import rg_to_pic
from .qpc import ConfigurationError, ParamMode, build_circuit, count_params, group_param_count
from .region_graph import RegionGraphParseError, build_quad_rg, content_hash, parse, serialize, validate
from .train import NumericalError, TrainConfig, mean_nll, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

logger = logging.getLogger("picircuits")


class UsageError(Exception):
    pass


# run configuration

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RgSection(_Strict):
    kind: Literal["quad", "file"] = "quad"
    H: Optional[int] = Field(None, ge=1)
    W: Optional[int] = Field(None, ge=1)
    C: int = Field(1, ge=1)
    is_tree: bool = False
    path: Optional[str] = None


class SharingSection(_Strict):
    input: Literal["F", "C", "N"] = "F"
    inner: Literal["C", "N"] = "C"


class MlpSection(_Strict):
    L: int = Field(2, ge=0)
    M: int = Field(256, ge=2)
    sigma: float = Field(1.0, gt=0)
    seed: int = 0
    bias: bool = True


class TrainSection(_Strict):
    batch_size: int = Field(256, ge=1)
    cycle_steps: int = Field(250, ge=1)
    delta: float = Field(0.0, ge=0)
    patience: int = Field(5, ge=1)
    max_epochs: int = Field(200, ge=1)
    max_steps: Optional[int] = Field(None, ge=0)
    lr_max: float = Field(5e-3, gt=0)
    lr_min: float = Field(1e-4, gt=0)
    lr_period: int = Field(500, ge=1)
    weight_decay: float = Field(0.01, ge=0)
    pc_lr: float = Field(0.01, gt=0)
    seed: int = 0


class DataSection(_Strict):
    path: str
    format: Literal["idx", "raw"] = "idx"
    transform: Literal["identity", "ycocg_r", "ycocg_lossy"] = "identity"
    split_seed: int = 0
    valid_fraction: float = Field(0.05, gt=0, lt=1)


class OutputSection(_Strict):
    checkpoint: str = "model.qpc"
    history: str = "history.csv"


class RunConfig(_Strict):
    rg: RgSection = RgSection()
    merge: Literal["cp", "tucker"] = "cp"
    K: int = Field(16, ge=1)
    mode: Literal["pic", "pc"] = "pic"
    rule: Literal["trapezoidal", "gauss-legendre"] = "trapezoidal"
    seed: int = 0
    sharing: SharingSection = SharingSection()
    mlp: MlpSection = MlpSection()
    train: TrainSection = TrainSection()
    data: Optional[DataSection] = None
    output: OutputSection = OutputSection()

    def model_config_(self, categories: int) -> ckpt.ModelConfig:
        m = self.mlp
        return ckpt.ModelConfig(merge=self.merge, K=self.K, categories=categories, mode=self.mode,
                                input_sharing=self.sharing.input, inner_sharing=self.sharing.inner,
                                mlp=MlpConfig(layers=m.L, width=m.M, sigma=m.sigma, bias=m.bias, seed=m.seed),
                                rule=self.rule, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train.model_dump())

    def region_graph(self, channels: int | None = None):
        if self.rg.kind == "file":
            if not self.rg.path:
                raise ConfigurationError("rg.path: required when rg.kind is 'file'")
            return _read_rg(self.rg.path)
        if self.rg.H is None or self.rg.W is None:
            raise ConfigurationError("rg.H, rg.W: required when rg.kind is 'quad'")
        return build_quad_rg(self.rg.H, self.rg.W, self.rg.is_tree, channels or self.rg.C)


def _format_validation(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "invalid config:\n  " + "\n  ".join(lines)


def load_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = doc
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as exc:
        raise UsageError(_format_validation(exc)) from exc


def _read_rg(path):
    path = Path(path)
    if not path.exists():
        raise UsageError(f"region graph file not found: {path}")
    return parse(path.read_text())


# mask specs

def parse_mask(spec: str | None, num_vars: int) -> np.ndarray | None:
    """``"all"`` or comma-separated indices and inclusive ranges such as ``"0-3,7"``."""
    if spec is None:
        return None
    mask = np.zeros(num_vars, dtype=bool)
    if spec.strip() == "all":
        mask[:] = True
        return mask
    for part in spec.split(","):
        part = part.strip()
        try:
            lo, _, hi = part.partition("-")
            lo, hi = int(lo), int(hi or lo)
        except ValueError:
            raise UsageError(f"invalid mask item {part!r}") from None
        if not 0 <= lo <= hi < num_vars:
            raise UsageError(f"mask item {part!r} outside variables 0..{num_vars - 1}")
        mask[lo:hi + 1] = True
    return mask


# commands

def cmd_build_rg(args) -> int:
    if args.height < 1 or args.width < 1 or args.channels < 1:
        raise UsageError("--height, --width and --channels must be positive")
    rg = build_quad_rg(args.height, args.width, is_tree=args.tree, channels=args.channels)
    doc = serialize(rg)
    counts = f"regions: {len(rg.regions)}\npartitions: {len(rg.partitions)}"
    if args.out:
        Path(args.out).write_text(doc)
        print(counts)
    else:
        sys.stdout.write(doc)
        print(counts, file=sys.stderr)
    return EXIT_OK


def _is_checkpoint(path: Path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(len(ckpt.MAGIC)) == ckpt.MAGIC


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    if _is_checkpoint(path):
        c = ckpt.load(path)
        cfg = c.config
        info = {"kind": "checkpoint", "mode": cfg.mode, "merge": cfg.merge, "K": cfg.K, "rule": cfg.rule,
                "categories": cfg.categories, "sharing": {"input": cfg.input_sharing, "inner": cfg.inner_sharing},
                "rg_hash": content_hash(c.rg), "num_vars": c.rg.num_vars,
                "params": count_params(c.model.circuit).total, "meta": c.meta}
        print(json.dumps(info, indent=1, sort_keys=True))
        return EXIT_OK
    rg = parse(path.read_text())
    violations = validate(rg)
    info = {"kind": "region_graph", "regions": len(rg.regions), "partitions": len(rg.partitions),
            "num_vars": rg.num_vars, "is_tree": rg.is_tree(), "hash": content_hash(rg),
            "violations": [str(v) for v in violations]}
    if args.merge and not violations:
        pic = rg_to_pic(rg, args.merge)
        info["pic"] = pic.census()
        if args.pic_out:
            Path(args.pic_out).write_text(pic.to_json())
        circuit = build_circuit(rg, args.merge, args.K, args.categories, mode="pic")
        info["layers"] = [{"type": type(layer).__name__, "folds": layer.folds, "depth": layer.depth,
                           "width": layer.width} for layer in circuit.layers]
    print(json.dumps(info, indent=1, sort_keys=True))
    return EXIT_OK if not violations else EXIT_DATA


def _load_training_data(cfg: RunConfig):
    d = cfg.data
    if d is None:
        raise UsageError("data: section required for training")
    ds = load(d.path, d.format)
    if d.transform != ColorTransform.IDENTITY.value:
        if ds.transform == d.transform:
            logger.info("dataset already carries %s; not re-applying", d.transform)
        else:
            ds = apply_transform(ds, d.transform)
    elif ds.transform != ColorTransform.IDENTITY.value:
        logger.info("dataset carries transform %s", ds.transform)
    return ds


def cmd_train(args) -> int:
    overrides = {"K": args.K, "seed": args.seed, "train.seed": args.seed, "train.max_steps": args.max_steps,
                 "data.path": args.data, "output.checkpoint": args.checkpoint, "output.history": args.history}
    cfg = load_config(args.config, overrides)
    ds = _load_training_data(cfg)
    rg = cfg.region_graph(ds.channels)
    if rg.num_vars != ds.num_vars:
        raise UsageError(f"region graph covers {rg.num_vars} variables but images have {ds.num_vars}")
    split = train_valid_split(ds, cfg.data.valid_fraction, cfg.data.split_seed)
    model_cfg = cfg.model_config_(ds.categories)
    torch.manual_seed(cfg.seed)
    model = model_cfg.build(rg)
    logger.info("training %s model with %d parameters", cfg.mode, count_params(model.circuit).total)
    history = train(model, split.train.pixels, split.valid.pixels, cfg.train_config(),
                    progress=lambda r: print(f"cycle {r.cycle} step {r.step} valid_nll {r.valid_nll:.6f} "
                                             f"valid_bpd {r.valid_bpd:.6f}", file=sys.stderr))
    history.write_csv(cfg.output.history)
    best = history.records[history.best_cycle]
    meta = {"data": {"H": ds.height, "W": ds.width, "C": ds.channels, "P": ds.categories,
                     "transform": ds.transform}, "split": split.info(),
            "valid_nll": best.valid_nll, "valid_bpd": best.valid_bpd, "best_cycle": history.best_cycle}
    ckpt.save(cfg.output.checkpoint, model, model_cfg, rg, meta)
    print(f"final validation bpd: {best.valid_bpd:.12g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    c = ckpt.load(args.checkpoint)
    if args.K is not None and args.K != c.config.K:
        raise UsageError(f"requested K={args.K} but the checkpoint was built with K={c.config.K}")
    if args.rg is not None and content_hash(_read_rg(args.rg)) != content_hash(c.rg):
        raise UsageError("requested region graph differs from the checkpoint's region graph")
    ds = load(args.data, args.format)
    want = c.meta.get("data", {}).get("transform")
    if want and ds.transform != want:
        if ds.transform != ColorTransform.IDENTITY.value:
            raise DataError(f"dataset carries transform {ds.transform!r}, model expects {want!r}")
        ds = apply_transform(ds, want)
    if ds.num_vars != c.rg.num_vars or ds.categories > c.config.categories:
        raise DataError(f"dataset has {ds.num_vars} variables and P={ds.categories}; "
                        f"model expects {c.rg.num_vars} and P={c.config.categories}")
    if args.split != "all":
        info = c.meta.get("split")
        if not info:
            raise UsageError("checkpoint records no split; use --split all")
        split = train_valid_split(ds, info["valid_fraction"], info["seed"])
        ds = split.valid if args.split == "valid" else split.train
    model = c.model
    D = ds.num_vars
    mask = parse_mask(args.mask, D)
    with torch.no_grad():
        log_z = float(model.log_partition())
        if mask is not None and mask.all():
            out = {"log_partition": log_z, "n": ds.count, "marginal_ll_nats": 0.0,
                   "note": "all variables marginalized; the normalized marginal is 1, contributing 0 bpd"}
        elif mask is not None:
            nll = mean_nll(model, ds.pixels, mask=torch.as_tensor(mask))
            kept = int(D - mask.sum())
            out = {"mean_marginal_ll_nats": -nll, "bpd": nll / (kept * math.log(2)), "n": ds.count,
                   "marginalized": int(mask.sum()), "log_partition": log_z}
        else:
            nll = mean_nll(model, ds.pixels)
            out = {"mean_ll_nats": -nll, "bpd": nll / (D * math.log(2)), "n": ds.count}
    if not all(math.isfinite(v) for v in out.values() if isinstance(v, float)):
        raise NumericalError("non-finite metric")
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def cmd_transform_dataset(args) -> int:
    ds = load(args.input, args.format)
    out = apply_transform(ds, args.kind)
    save(out, args.output, "raw")
    print(f"wrote {out.count} images with transform {out.transform} to {args.output}")
    return EXIT_OK


def cmd_count_params(args) -> int:
    if args.config:
        cfg = load_config(args.config)
        rg = cfg.region_graph()
        categories = args.categories
        base = cfg.model_config_(categories)
    else:
        if args.height is None or args.width is None:
            raise UsageError("count-params needs a config file or --height and --width")
        if min(args.height, args.width, args.K) < 1:
            raise UsageError("--height, --width and --K must be positive")
        rg = build_quad_rg(args.height, args.width, is_tree=args.tree)
        base = ckpt.ModelConfig(merge=args.merge, K=args.K, categories=args.categories,
                                input_sharing=args.input_sharing, inner_sharing=args.inner_sharing,
                                mlp=MlpConfig(layers=args.L, width=args.M, bias=not args.no_bias))
    circuits = {}
    for mode in ParamMode:
        circuits[mode] = build_circuit(rg, base.merge, base.K, base.categories, mode=mode.value,
                                       input_sharing=base.input_sharing, inner_sharing=base.inner_sharing,
                                       mlp=base.mlp, rule=base.rule)
    groups = circuits[ParamMode.PC].groups
    rows = []
    for g in range(len(groups)):
        shape = circuits[ParamMode.PC].group_shape(g)
        rows.append({"group": g, "kind": groups.kinds[g], "depth": groups.depths[g], "arity": groups.arities[g],
                     "heads": groups.heads[g], "shape": list(shape),
                     "pc": group_param_count(circuits[ParamMode.PC], g).total,
                     "pic": group_param_count(circuits[ParamMode.PIC], g).total})
    totals = {m.value: count_params(c).total for m, c in circuits.items()}
    if args.json:
        print(json.dumps({"groups": rows, "mixing": circuits[ParamMode.PC].num_mixing, "total": totals},
                         indent=1))
        return EXIT_OK
    print(f"{'group':>5} {'kind':>8} {'depth':>5} {'arity':>5} {'heads':>6} {'shape':>18} {'pc':>14} {'pic':>10}")
    for r in rows:
        shape = "x".join(map(str, r["shape"]))
        print(f"{r['group']:>5} {r['kind']:>8} {r['depth']:>5} {r['arity']:>5} {r['heads']:>6} {shape:>18} "
              f"{r['pc']:>14,} {r['pic']:>10,}")
    print(f"mixing scalars: {circuits[ParamMode.PC].num_mixing}")
    print(f"total pc: {totals['pc']:,}")
    print(f"total pic: {totals['pic']:,}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="picircuits", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("build-rg", help="build a quad-tree or quad-graph region graph")
    s.add_argument("--height", type=int, required=True)
    s.add_argument("--width", type=int, required=True)
    s.add_argument("--channels", type=int, default=1)
    shape = s.add_mutually_exclusive_group()
    shape.add_argument("--dag", dest="tree", action="store_false", help="quad-graph (default)")
    shape.add_argument("--tree", dest="tree", action="store_true", help="quad-tree")
    s.add_argument("-o", "--out", help="output file (default: stdout)")
    s.set_defaults(func=cmd_build_rg, tree=False)

    s = sub.add_parser("inspect", help="summarize a region graph or checkpoint")
    s.add_argument("path")
    s.add_argument("--merge", choices=["cp", "tucker"], help="also compile and summarize the circuit")
    s.add_argument("--K", type=int, default=2)
    s.add_argument("--categories", type=int, default=256)
    s.add_argument("--pic-out", help="write the compiled PIC document here")
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("train", help="train a model from a JSON run config")
    s.add_argument("config")
    s.add_argument("--data", help="override data.path")
    s.add_argument("--K", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--max-steps", type=int)
    s.add_argument("--checkpoint", help="override output.checkpoint")
    s.add_argument("--history", help="override output.history")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a dataset with a checkpoint, printing metrics JSON")
    s.add_argument("checkpoint")
    s.add_argument("data")
    s.add_argument("--format", choices=["idx", "raw"], default="idx")
    s.add_argument("--split", choices=["all", "train", "valid"], default="all")
    s.add_argument("--mask", help="variables to marginalize: 'all' or e.g. '0-3,7'")
    s.add_argument("--K", type=int, help="fail unless the checkpoint uses this K")
    s.add_argument("--rg", help="fail unless the checkpoint uses this region graph file")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("transform-dataset", help="apply a color transform and write a raw dataset")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--kind", choices=["ycocg_r", "ycocg_lossy"], required=True)
    s.add_argument("--format", choices=["idx", "raw"], default="idx")
    s.set_defaults(func=cmd_transform_dataset)

    s = sub.add_parser("count-params", help="per-group and total parameter counts in PC and PIC modes")
    s.add_argument("--config")
    s.add_argument("--height", type=int)
    s.add_argument("--width", type=int)
    shape = s.add_mutually_exclusive_group()
    shape.add_argument("--dag", dest="tree", action="store_false")
    shape.add_argument("--tree", dest="tree", action="store_true")
    s.add_argument("--merge", choices=["cp", "tucker"], default="cp")
    s.add_argument("--K", type=int, default=16)
    s.add_argument("--categories", type=int, default=256)
    s.add_argument("--L", type=int, default=2)
    s.add_argument("--M", type=int, default=256)
    s.add_argument("--no-bias", action="store_true")
    s.add_argument("--input-sharing", choices=["F", "C", "N"], default="F")
    s.add_argument("--inner-sharing", choices=["C", "N"], default="C")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_count_params, tree=False)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError, RegionGraphParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, DataError, ckpt.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
