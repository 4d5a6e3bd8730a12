"""Tensorized quadrature circuits: materialization, folding and log-domain evaluation.

A :class:`QpcCircuit` is pure structure (layers, fold maps, shapes).  The
trainable values live in :class:`QpcModel`, which either evaluates group
MLPs on quadrature grids (``mode="pic"``) or holds free positive tensors of
the same shapes (``mode="pc"``).
"""
from __future__ import annotations

import enum
from collections import defaultdict
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .neural import (MlpConfig, ParamCount, SharedMlp, materialize_input_group,
                     materialize_integral_group, mlp_param_count)
from .pic import GroupTable, InputUnit, IntegralUnit, PicGraph, ProductUnit, SumUnit, assign_groups
from .quadrature import QuadratureRule, tensor_product_weights
from .tensor import DTYPE, as_tensor, log_kron, logsumexp_axis, matmul_log, matricize

PC_CLAMP = 1e-19

Slot = tuple[int, int]


class ParamMode(str, enum.Enum):
    PIC = "pic"
    PC = "pc"


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class Layer:
    """Base record: ``units[f]`` is the circuit unit computed by fold ``f``;
    ``inputs[f]`` lists the ``(layer, fold)`` slots it reads."""

    units: tuple[int, ...]
    inputs: tuple[tuple[Slot, ...], ...]
    width: int
    depth: int

    @property
    def folds(self) -> int:
        return len(self.units)

    def signature(self) -> tuple:
        return (type(self).__name__, self.width)


@dataclass(frozen=True)
class InputCategoricalLayer(Layer):
    variables: tuple[int, ...] = ()
    categories: int = 2
    params: tuple[tuple[int, int], ...] = ()

    def signature(self):
        return ("input", self.width, self.categories)


@dataclass(frozen=True)
class DenseSumLayer(Layer):
    in_width: int = 0
    params: tuple[tuple[int, int], ...] = ()

    def signature(self):
        return ("dense", self.width, self.in_width)


@dataclass(frozen=True)
class MixingLayer(Layer):
    weight_slots: tuple[tuple[int, ...], ...] = ()

    def signature(self):
        return ("mixing", self.width, len(self.inputs[0]))


@dataclass(frozen=True)
class HadamardLayer(Layer):
    def signature(self):
        return ("hadamard", self.width)


@dataclass(frozen=True)
class KroneckerLayer(Layer):
    in_widths: tuple[int, int] = (0, 0)

    def signature(self):
        return ("kronecker", self.width, self.in_widths)


_KIND_ORDER = {"input": 0, "dense": 1, "hadamard": 2, "kronecker": 3, "mixing": 4}


@dataclass(frozen=True)
class QpcCircuit:
    layers: tuple[Layer, ...]
    unit_slot: dict[int, Slot]
    output: int
    mode: ParamMode
    rule: QuadratureRule
    pic: PicGraph
    groups: GroupTable
    categories: int
    mlp: MlpConfig = field(default_factory=MlpConfig)
    num_mixing: int = 0

    @property
    def K(self) -> int:
        return self.rule.K

    @property
    def num_vars(self) -> int:
        return len(self.pic.scopes[self.pic.root])

    @property
    def is_folded(self) -> bool:
        return any(layer.folds > 1 for layer in self.layers)

    def group_shape(self, g: int) -> tuple[int, int, int]:
        """``(heads, rows, cols)`` of the tensor group ``g`` materializes."""
        K = self.K
        heads = self.groups.heads[g]
        if self.groups.kinds[g] == "input":
            return heads, K, self.categories
        n_out, n_in = self.group_split(g)
        return heads, K ** n_out, K ** n_in

    def group_split(self, g: int) -> tuple[int, int]:
        unit = self.pic.units[self.groups.members[g][0]]
        return len(unit.out_lvs), len(unit.in_lvs)


def quad_scale(w_tensor, rule: QuadratureRule, n_out: int, n_in: int) -> torch.Tensor:
    """Matricize a ``K x ... x K`` tensor (output axes first) and scale column
    ``(j_1..j_n_in)`` by ``prod_i w_{j_i}``."""
    w_tensor = as_tensor(w_tensor)
    if w_tensor.dim() != n_out + n_in or any(s != rule.K for s in w_tensor.shape):
        raise ValueError(
            f"expected a rank-{n_out + n_in} tensor with extents {rule.K}, got shape {tuple(w_tensor.shape)}")
    mat = matricize(w_tensor, n_out)
    return mat * torch.tensor(tensor_product_weights(rule, n_in), dtype=mat.dtype)


def mixing_matrix(weights, K: int) -> torch.Tensor:
    """Block matrix ``[w_1 I_K | ... | w_N I_K]``."""
    w = as_tensor(weights)
    if torch.any(w <= 0):
        raise ValueError("mixing weights must be strictly positive")
    eye = torch.eye(K, dtype=w.dtype)
    return torch.cat([wi * eye for wi in w], dim=1)


def pic_to_qpc(pic: PicGraph, rule: QuadratureRule, mode: ParamMode | str = ParamMode.PIC, *,
               categories: int, groups: GroupTable | None = None, mlp: MlpConfig = MlpConfig()) -> QpcCircuit:
    """One layer per circuit unit, in unit order (unfolded)."""
    mode = ParamMode(mode)
    groups = groups if groups is not None else pic.groups
    if groups is None:
        if mode is ParamMode.PIC:
            raise ConfigurationError("PIC materialization needs unit groups; call assign_groups first")
        groups = assign_groups(pic, "N", "N")
    grouped = {u for members in groups.members for u in members}
    K = rule.K
    depth = pic.depths()
    layers: list[Layer] = []
    slot: dict[int, Slot] = {}
    width: dict[int, int] = {}
    n_mix = 0
    for uid, unit in enumerate(pic.units):
        if isinstance(unit, (InputUnit, IntegralUnit)) and uid not in grouped:
            raise ConfigurationError(f"unit {uid} has no function group")
        kids = tuple((slot[c][0], 0) for c in getattr(unit, "children", ())) if not isinstance(unit, IntegralUnit) \
            else ((slot[unit.child][0], 0),)
        common = dict(units=(uid,), inputs=(kids,), depth=depth[uid])
        if isinstance(unit, InputUnit):
            layer = InputCategoricalLayer(width=K, variables=(unit.var,), categories=categories,
                                          params=(groups.slot(uid),), **common)
        elif isinstance(unit, IntegralUnit):
            rows = K ** len(unit.out_lvs)
            cols = width[unit.child]
            if cols != K ** len(unit.in_lvs):
                raise ConfigurationError(f"integral unit {uid} integrates {len(unit.in_lvs)} latents "
                                         f"but its input has width {cols}")
            layer = DenseSumLayer(width=rows, in_width=cols, params=(groups.slot(uid),), **common)
        elif isinstance(unit, SumUnit):
            n = len(unit.children)
            layer = MixingLayer(width=width[unit.children[0]], weight_slots=(tuple(range(n_mix, n_mix + n)),),
                                **common)
            n_mix += n
        elif isinstance(unit, ProductUnit):
            a, b = unit.children
            if pic.product_is_hadamard(uid):
                layer = HadamardLayer(width=width[a], **common)
            else:
                layer = KroneckerLayer(width=width[a] * width[b], in_widths=(width[a], width[b]), **common)
        else:  # pragma: no cover
            raise TypeError(f"unknown unit {unit!r}")
        slot[uid] = (len(layers), 0)
        width[uid] = layer.width
        layers.append(layer)
    return QpcCircuit(tuple(layers), slot, slot[pic.root][0], mode, rule, pic, groups, categories, mlp, n_mix)


def fold(circuit: QpcCircuit) -> QpcCircuit:
    """Stack layers with equal form and depth into folded layers (fold order = unit id)."""
    buckets: dict[tuple, list[Layer]] = defaultdict(list)
    for layer in circuit.layers:
        for f in range(layer.folds):
            buckets[(layer.depth, layer.signature())].append(_unfold_one(layer, f))
    keys = sorted(buckets, key=lambda k: (k[0], _KIND_ORDER[k[1][0]], repr(k[1])))
    old_unit_slot = circuit.unit_slot
    new_slot: dict[int, Slot] = {}
    for lid, key in enumerate(keys):
        members = sorted(buckets[key], key=lambda l: l.units[0])
        buckets[key] = members
        for f, l in enumerate(members):
            new_slot[l.units[0]] = (lid, f)
    slot_unit = {}
    for layer_id, layer in enumerate(circuit.layers):
        for f, u in enumerate(layer.units):
            slot_unit[(layer_id, f)] = u
    layers = []
    for key in keys:
        members = buckets[key]
        inputs = tuple(tuple(new_slot[slot_unit[s]] for s in l.inputs[0]) for l in members)
        base = dict(units=tuple(l.units[0] for l in members), inputs=inputs, width=members[0].width,
                    depth=members[0].depth)
        first = members[0]
        if isinstance(first, InputCategoricalLayer):
            layer = InputCategoricalLayer(variables=tuple(l.variables[0] for l in members),
                                          categories=first.categories,
                                          params=tuple(l.params[0] for l in members), **base)
        elif isinstance(first, DenseSumLayer):
            layer = DenseSumLayer(in_width=first.in_width, params=tuple(l.params[0] for l in members), **base)
        elif isinstance(first, MixingLayer):
            layer = MixingLayer(weight_slots=tuple(l.weight_slots[0] for l in members), **base)
        elif isinstance(first, KroneckerLayer):
            layer = KroneckerLayer(in_widths=first.in_widths, **base)
        else:
            layer = HadamardLayer(**base)
        layers.append(layer)
    out_unit = circuit.pic.root
    assert old_unit_slot[out_unit] is not None
    return replace(circuit, layers=tuple(layers), unit_slot=new_slot, output=new_slot[out_unit][0])


def _unfold_one(layer: Layer, f: int) -> Layer:
    if layer.folds == 1:
        return layer
    base = dict(units=(layer.units[f],), inputs=(layer.inputs[f],), width=layer.width, depth=layer.depth)
    if isinstance(layer, InputCategoricalLayer):
        return InputCategoricalLayer(variables=(layer.variables[f],), categories=layer.categories,
                                     params=(layer.params[f],), **base)
    if isinstance(layer, DenseSumLayer):
        return DenseSumLayer(in_width=layer.in_width, params=(layer.params[f],), **base)
    if isinstance(layer, MixingLayer):
        return MixingLayer(weight_slots=(layer.weight_slots[f],), **base)
    if isinstance(layer, KroneckerLayer):
        return KroneckerLayer(in_widths=layer.in_widths, **base)
    return HadamardLayer(**base)


def unfold(circuit: QpcCircuit) -> QpcCircuit:
    """One fold per layer, in unit order."""
    layers = sorted((_unfold_one(l, f) for l in circuit.layers for f in range(l.folds)), key=lambda l: l.units[0])
    slot_unit = {(lid, f): u for lid, l in enumerate(circuit.layers) for f, u in enumerate(l.units)}
    new_slot = {l.units[0]: (i, 0) for i, l in enumerate(layers)}
    rebuilt = []
    for l in layers:
        inputs = (tuple(new_slot[slot_unit[s]] for s in l.inputs[0]),)
        rebuilt.append(replace(l, inputs=inputs))
    return replace(circuit, layers=tuple(rebuilt), unit_slot=new_slot, output=new_slot[circuit.pic.root][0])


def count_params(circuit: QpcCircuit | None) -> ParamCount:
    """Trainable values implied by the circuit structure, without allocating them."""
    if circuit is None or not circuit.layers:
        return ParamCount()
    total = ParamCount(mixing=circuit.num_mixing)
    for g in range(len(circuit.groups)):
        total = total + group_param_count(circuit, g)
    return total


def group_param_count(circuit: QpcCircuit, g: int) -> ParamCount:
    heads, rows, cols = circuit.group_shape(g)
    if circuit.mode is ParamMode.PC:
        return ParamCount(direct=heads * rows * cols)
    cfg = circuit.mlp
    if circuit.groups.kinds[g] == "input":
        return mlp_param_count(cfg.layers, cfg.width, heads, circuit.categories, cfg.bias)
    return mlp_param_count(cfg.layers, cfg.width, heads, 1, cfg.bias)


# --- evaluation -----------------------------------------------------------


@dataclass(frozen=True)
class EvalRequest:
    """Batch of assignments and the variables to marginalize.

    ``mask`` is boolean with shape ``(D,)`` or ``(B, D)``; ``True`` marks a
    variable integrated out.
    """

    x: torch.Tensor
    mask: torch.Tensor | None = None

    @classmethod
    def build(cls, x, mask=None, *, num_vars: int, categories: int) -> "EvalRequest":
        x = x.long() if isinstance(x, torch.Tensor) else torch.from_numpy(np.array(x, dtype=np.int64))
        if x.dim() == 1:
            x = x[None, :]
        if x.dim() != 2 or x.shape[1] != num_vars:
            raise ValueError(f"expected assignments of shape (B, {num_vars}), got {tuple(x.shape)}")
        if mask is not None:
            mask = mask.bool() if isinstance(mask, torch.Tensor) else torch.from_numpy(np.array(mask, dtype=bool))
            if mask.shape[-1] != num_vars or mask.dim() > 2:
                raise ValueError(f"mask must have shape ({num_vars},) or (B, {num_vars}), got {tuple(mask.shape)}")
        observed = x if mask is None else torch.where(mask, torch.zeros_like(x), x)
        if observed.numel() and (observed.min() < 0 or observed.max() >= categories):
            raise ValueError(f"pixel values must lie in [0, {categories}), got range "
                             f"[{int(observed.min())}, {int(observed.max())}]")
        return cls(x, mask)


@dataclass
class _LayerPlan:
    sources: list[int]
    index: torch.Tensor | None
    params: list[tuple[int, torch.Tensor]] = field(default_factory=list)
    variables: torch.Tensor | None = None
    mix_index: torch.Tensor | None = None


def _segments(params) -> list[tuple[int, torch.Tensor]]:
    out: list[tuple[int, list[int]]] = []
    for g, h in params:
        if out and out[-1][0] == g:
            out[-1][1].append(h)
        else:
            out.append((g, [h]))
    return [(g, torch.as_tensor(hs, dtype=torch.long)) for g, hs in out]


def _plan(circuit: QpcCircuit) -> list[_LayerPlan]:
    plans = []
    for layer in circuit.layers:
        sources = sorted({s[0] for ins in layer.inputs for s in ins})
        offset, off = {}, 0
        for s in sources:
            offset[s] = off
            off += circuit.layers[s].folds
        index = None
        if sources:
            index = torch.as_tensor([[offset[l] + f for l, f in ins] for ins in layer.inputs], dtype=torch.long)
        plan = _LayerPlan(sources, index)
        if isinstance(layer, (InputCategoricalLayer, DenseSumLayer)):
            plan.params = _segments(layer.params)
        if isinstance(layer, InputCategoricalLayer):
            plan.variables = torch.as_tensor(layer.variables, dtype=torch.long)
        if isinstance(layer, MixingLayer):
            plan.mix_index = torch.as_tensor(layer.weight_slots, dtype=torch.long)
        plans.append(plan)
    return plans


def _gather_params(tensors: list[torch.Tensor], segments) -> torch.Tensor:
    parts = []
    for g, heads in segments:
        t = tensors[g]
        if heads.numel() == t.shape[0] and torch.equal(heads, torch.arange(t.shape[0])):
            parts.append(t)
        else:
            parts.append(t[heads])
    return parts[0] if len(parts) == 1 else torch.cat(parts, 0)


@dataclass
class Materialized:
    """Log-domain parameters for one evaluation step."""

    groups: list[torch.Tensor]
    log_mixing: torch.Tensor


def evaluate(circuit: QpcCircuit, mat: Materialized, request: EvalRequest, plans=None) -> torch.Tensor:
    """Unnormalized log value of the circuit for each assignment in ``request``."""
    plans = plans if plans is not None else _plan(circuit)
    x, mask = request.x, request.mask
    B = x.shape[0]
    outs: list[torch.Tensor | None] = [None] * len(circuit.layers)
    for lid, (layer, plan) in enumerate(zip(circuit.layers, plans)):
        if isinstance(layer, InputCategoricalLayer):
            table = _gather_params(mat.groups, plan.params)  # (F, K, P)
            vals = x[:, plan.variables].T  # (F, B)
            if mask is not None:
                m = (mask[plan.variables][:, None] if mask.dim() == 1 else mask[:, plan.variables].T).expand_as(vals)
                vals = torch.where(m, 0, vals)
            fidx = torch.arange(layer.folds)[:, None]
            out = table.transpose(1, 2)[fidx, vals]  # (F, B, K)
            if mask is not None:
                # unnormalized tables need the explicit sum over categories
                marg = logsumexp_axis(table, -1)[:, None, :]
                out = torch.where(m[..., None], marg.expand_as(out), out)
            outs[lid] = out
            continue
        src = outs[plan.sources[0]] if len(plan.sources) == 1 else torch.cat([outs[s] for s in plan.sources], 0)
        inp = src[plan.index]  # (F, A, B, W)
        if isinstance(layer, DenseSumLayer):
            w = _gather_params(mat.groups, plan.params)  # (F, S, Kin)
            outs[lid] = matmul_log(w, inp[:, 0])
        elif isinstance(layer, MixingLayer):
            lw = mat.log_mixing[plan.mix_index]  # (F, N)
            outs[lid] = logsumexp_axis(inp + lw[:, :, None, None], 1)
        elif isinstance(layer, HadamardLayer):
            outs[lid] = inp.sum(1)
        else:
            outs[lid] = log_kron(inp[:, 0], inp[:, 1])
    out = outs[circuit.output]
    f = circuit.unit_slot[circuit.pic.root][1]
    return out[f].reshape(B)


class QpcModel(nn.Module):
    """Trainable parameters of a circuit plus evaluation entry points.

    Parameters
    ----------
    circuit : QpcCircuit
    seed : int
        Seeds group MLPs (PIC mode) or direct tensors (PC mode).
    """

    def __init__(self, circuit: QpcCircuit, seed: int = 0, dtype=DTYPE):
        super().__init__()
        self.circuit = circuit
        self._plans = _plan(circuit)
        gen = torch.Generator().manual_seed(seed)
        groups = circuit.groups
        if circuit.mode is ParamMode.PIC:
            mlps = []
            for g in range(len(groups)):
                if groups.kinds[g] == "input":
                    m = SharedMlp(1, circuit.categories, groups.heads[g], circuit.mlp, positive=False,
                                  seed=circuit.mlp.seed + 7919 * g)
                else:
                    m = SharedMlp(groups.arities[g], 1, groups.heads[g], circuit.mlp, positive=True,
                                  seed=circuit.mlp.seed + 7919 * g)
                mlps.append(m)
            self.mlps = nn.ModuleList(mlps)
            self.mixing = nn.Parameter(torch.zeros(circuit.num_mixing, dtype=DTYPE))
        else:
            self.tensors = nn.ParameterList([
                nn.Parameter(F.softplus(torch.randn(*circuit.group_shape(g), generator=gen, dtype=DTYPE)))
                for g in range(len(groups))])
            self.mixing = nn.Parameter(F.softplus(torch.randn(circuit.num_mixing, generator=gen, dtype=DTYPE)))
        self.to(dtype)
        self._cache_key = None
        self._cache_value = None

    @property
    def mode(self) -> ParamMode:
        return self.circuit.mode

    def materialize(self) -> Materialized:
        c = self.circuit
        if c.mode is ParamMode.PC:
            tensors = [t.log() for t in self.tensors]
            return Materialized(tensors, self.mixing.log())
        tensors = []
        for g, mlp in enumerate(self.mlps):
            if c.groups.kinds[g] == "input":
                tensors.append(materialize_input_group(mlp, c.rule))
            else:
                n_out, n_in = c.group_split(g)
                tensors.append(materialize_integral_group(mlp, c.rule, n_out, n_in))
        return Materialized(tensors, torch.log(F.softplus(self.mixing)))

    def materialize_group(self, g: int) -> list[torch.Tensor]:
        """Linear-domain parameter tensor of every member of group ``g``, in head order."""
        t = self.materialize().groups[g].exp()
        return [t[self.circuit.groups.slot(u)[1]] for u in self.circuit.groups.members[g]]

    def request(self, x, mask=None) -> EvalRequest:
        return EvalRequest.build(x, mask, num_vars=self.circuit.num_vars, categories=self.circuit.categories)

    def forward(self, x, mask=None, materialized: Materialized | None = None) -> torch.Tensor:
        req = x if isinstance(x, EvalRequest) else self.request(x, mask)
        mat = materialized if materialized is not None else self.materialize()
        return evaluate(self.circuit, mat, req, self._plans)

    def _version(self):
        return tuple((id(p), p._version) for p in self.parameters())

    def log_partition(self, materialized: Materialized | None = None) -> torch.Tensor:
        """Log normalizing constant; cached while parameters are unchanged and no grad is tracked."""
        grad = torch.is_grad_enabled() and any(p.requires_grad for p in self.parameters())
        key = self._version()
        if not grad and materialized is None and key == self._cache_key:
            return self._cache_value
        D = self.circuit.num_vars
        req = EvalRequest(torch.zeros(1, D, dtype=torch.long), torch.ones(D, dtype=torch.bool))
        mat = materialized if materialized is not None else self.materialize()
        value = evaluate(self.circuit, mat, req, self._plans)[0]
        if not grad:
            self._cache_key, self._cache_value = key, value
        return value

    def log_likelihood(self, x, mask=None) -> torch.Tensor:
        """Normalized (marginal) log-likelihood of each row of ``x``."""
        mat = self.materialize()
        return self.forward(x, mask, mat) - self.log_partition(mat)

    def clamp_(self, floor: float = PC_CLAMP):
        if self.mode is ParamMode.PC:
            with torch.no_grad():
                for p in self.parameters():
                    p.clamp_(min=floor)

    def count_params(self) -> ParamCount:
        return count_params(self.circuit)

    def stored_param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_circuit(rg, merge: str, K: int, categories: int, *, mode: str = "pic", input_sharing: str = "F",
                  inner_sharing: str = "C", mlp: MlpConfig = MlpConfig(), rule: str = "trapezoidal",
                  folded: bool = True) -> QpcCircuit:
    """Region graph to (folded) circuit in one call."""
    from .pic import rg_to_pic
    from .quadrature import make_rule

    pic = rg_to_pic(rg, merge)
    groups = assign_groups(pic, input_sharing, inner_sharing)
    circuit = pic_to_qpc(pic.with_groups(groups), make_rule(rule, K), mode, categories=categories, mlp=mlp)
    return fold(circuit) if folded else circuit
