"""Symbolic integral circuits compiled from region graphs.

A circuit is a topologically ordered list of units (children always carry a
smaller id than their parent).  Latent variables are plain integers.
"""
from __future__ import annotations

import enum
import json
from collections import defaultdict
from dataclasses import dataclass, field

from .region_graph import RegionGraph, Violation, validate


class MergeMode(str, enum.Enum):
    TUCKER = "tucker"
    CP = "cp"


class InvalidRegionGraphError(ValueError):
    def __init__(self, region: int | None, violations):
        self.region = region
        self.violations = list(violations)
        head = f"region {region}" if region is not None else "region graph"
        super().__init__(f"{head} is invalid: " + "; ".join(str(v) for v in self.violations))


class LatentMismatchError(ValueError):
    """A merge was requested on units whose latent variables do not fit the mode."""


@dataclass(frozen=True)
class InputUnit:
    var: int
    lv: int
    kind: str = field(default="input", init=False)


@dataclass(frozen=True)
class SumUnit:
    children: tuple[int, ...]
    kind: str = field(default="sum", init=False)


@dataclass(frozen=True)
class ProductUnit:
    children: tuple[int, ...]
    kind: str = field(default="product", init=False)


@dataclass(frozen=True)
class IntegralUnit:
    child: int
    out_lvs: tuple[int, ...]
    in_lvs: tuple[int, ...]
    kind: str = field(default="integral", init=False)

    @property
    def arity(self) -> int:
        return len(self.out_lvs) + len(self.in_lvs)


def unit_children(unit) -> tuple[int, ...]:
    if isinstance(unit, IntegralUnit):
        return (unit.child,)
    return getattr(unit, "children", ())


@dataclass(frozen=True)
class GroupTable:
    """Unit groups sharing a function.

    ``members[g]`` lists the unit ids of group ``g`` in head order; ``heads[g]``
    is the number of distinct functions (1 under full sharing).
    """

    members: tuple[tuple[int, ...], ...]
    heads: tuple[int, ...]
    kinds: tuple[str, ...]
    arities: tuple[int, ...]
    depths: tuple[int, ...]

    def slot(self, unit: int) -> tuple[int, int]:
        return self._slots[unit]

    def __post_init__(self):
        slots = {}
        for g, members in enumerate(self.members):
            for i, u in enumerate(members):
                slots[u] = (g, i if self.heads[g] > 1 else 0)
        object.__setattr__(self, "_slots", slots)

    def __len__(self):
        return len(self.members)


class PicGraph:
    """Integral circuit with scope bookkeeping.

    Parameters
    ----------
    units : list of unit records
        Topologically ordered; ``units[i]`` may only reference ids ``< i``.
    root : int
    num_lvs : int
        Size of the latent-variable registry.
    """

    def __init__(self, units, root: int, num_lvs: int | None = None, groups: GroupTable | None = None):
        self.units = tuple(units)
        self.root = root
        lvs = set()
        for u in self.units:
            if isinstance(u, InputUnit):
                lvs.add(u.lv)
            elif isinstance(u, IntegralUnit):
                lvs.update(u.out_lvs)
                lvs.update(u.in_lvs)
        self.num_lvs = num_lvs if num_lvs is not None else (max(lvs) + 1 if lvs else 0)
        self.groups = groups
        self.scopes: list[frozenset] = []
        self.latent_scopes: list[tuple[int, ...]] = []
        for i, u in enumerate(self.units):
            kids = [c for c in unit_children(u) if 0 <= c < i]
            if isinstance(u, InputUnit):
                self.scopes.append(frozenset([u.var]))
                self.latent_scopes.append((u.lv,))
            elif isinstance(u, IntegralUnit):
                self.scopes.append(self.scopes[u.child] if kids else frozenset())
                self.latent_scopes.append(tuple(u.out_lvs))
            else:
                self.scopes.append(frozenset().union(*(self.scopes[c] for c in kids)))
                merged = []
                for c in kids:
                    for z in self.latent_scopes[c]:
                        if z not in merged:
                            merged.append(z)
                self.latent_scopes.append(tuple(merged))

    def __len__(self):
        return len(self.units)

    def with_groups(self, groups: GroupTable) -> "PicGraph":
        return PicGraph(self.units, self.root, self.num_lvs, groups)

    def depths(self) -> list[int]:
        """Longest path from any input unit."""
        depth = []
        for u in self.units:
            kids = unit_children(u)
            depth.append(0 if not kids else 1 + max(depth[c] for c in kids))
        return depth

    def census(self) -> dict[str, int]:
        counts = {"input": 0, "sum": 0, "product": 0, "integral": 0}
        for u in self.units:
            counts[u.kind] += 1
        return counts

    def product_is_hadamard(self, uid: int) -> bool:
        a, b = self.units[uid].children
        return set(self.latent_scopes[a]) == set(self.latent_scopes[b])

    def to_dict(self) -> dict:
        units = []
        for i, u in enumerate(self.units):
            rec = {"id": i, "kind": u.kind, "children": list(unit_children(u))}
            if isinstance(u, InputUnit):
                rec.update(var=u.var, lvs=[u.lv])
            elif isinstance(u, IntegralUnit):
                rec.update(out_lvs=list(u.out_lvs), in_lvs=list(u.in_lvs))
            if self.groups is not None and isinstance(u, (InputUnit, IntegralUnit)):
                g, h = self.groups.slot(i)
                rec.update(group=g, head=h)
            units.append(rec)
        return {"root": self.root, "num_lvs": self.num_lvs, "units": units}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"


class _Compiler:
    def __init__(self, mode: MergeMode):
        self.mode = MergeMode(mode)
        self.units: list = []
        self.lv_of: list[tuple[int, ...]] = []

    def add(self, unit) -> int:
        self.units.append(unit)
        if isinstance(unit, InputUnit):
            self.lv_of.append((unit.lv,))
        elif isinstance(unit, IntegralUnit):
            self.lv_of.append(unit.out_lvs)
        else:
            merged = []
            for c in unit.children:
                merged.extend(z for z in self.lv_of[c] if z not in merged)
            self.lv_of.append(tuple(merged))
        return len(self.units) - 1

    def merge(self, u1: int, u2: int, out_lv: int | None) -> int:
        """Combine two units; ``out_lv=None`` marginalizes all latents (root merge)."""
        z1, z2 = self.lv_of[u1], self.lv_of[u2]
        if len(z1) != 1 or len(z2) != 1:
            raise LatentMismatchError(f"units {u1} and {u2} must each expose one latent variable, got {z1} and {z2}")
        out = () if out_lv is None else (out_lv,)
        if self.mode is MergeMode.TUCKER:
            if z1 == z2:
                raise LatentMismatchError(f"Tucker merge needs distinct latents, units {u1} and {u2} share {z1[0]}")
            if out and out[0] in (z1[0], z2[0]):
                raise LatentMismatchError(f"output latent {out[0]} collides with an integrated latent")
            prod = self.add(ProductUnit((u1, u2)))
            return self.add(IntegralUnit(prod, out, (z1[0], z2[0])))
        if z1 != z2:
            raise LatentMismatchError(f"CP merge needs equal latents, got {z1[0]} and {z2[0]}")
        if out and out[0] == z1[0]:
            raise LatentMismatchError(f"output latent {out[0]} collides with the integrated latent")
        a = self.add(IntegralUnit(u1, out, z1))
        b = self.add(IntegralUnit(u2, out, z2))
        return self.add(ProductUnit((a, b)))


def merge(pic: PicGraph, u1: int, u2: int, is_root: bool, mode: MergeMode | str) -> tuple[PicGraph, int]:
    """Merge two units of ``pic`` and return the extended circuit and the new unit id.

    A fresh latent variable is minted for the output unless ``is_root``.
    """
    comp = _Compiler(MergeMode(mode))
    for u in pic.units:
        comp.add(u)
    if pic.scopes[u1] & pic.scopes[u2]:
        raise ValueError(f"units {u1} and {u2} have overlapping scopes")
    out = None if is_root else pic.num_lvs
    uid = comp.merge(u1, u2, out)
    return PicGraph(comp.units, uid, pic.num_lvs + (0 if is_root else 1)), uid


def _cp_latent_classes(rg: RegionGraph) -> dict[int, int]:
    """Union regions that appear side by side in some partition."""
    parent = list(range(len(rg.regions)))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for p in rg.partitions:
        a = find(p.children[0])
        for c in p.children[1:]:
            b = find(c)
            if a != b:
                parent[max(a, b)] = min(a, b)
                a = min(a, b)
    roots = sorted({find(r) for r in range(len(rg.regions))})
    label = {r: i for i, r in enumerate(roots)}
    return {r: label[find(r)] for r in range(len(rg.regions))}


def rg_to_pic(rg: RegionGraph, mode: MergeMode | str) -> PicGraph:
    """Compile a binary region graph with univariate leaves into an integral circuit.

    Leaves become input units, every partition is merged, and regions with
    several partitions get a sum unit over their merged units.  The root is
    always an integral or a product/sum of integrals with no free latent.
    """
    mode = MergeMode(mode)
    report = validate(rg)
    if report:
        region = None
        for v in report:
            if v.node.startswith("region "):
                region = int(v.node.split()[1])
                break
            if "parent region" in v.node:
                region = int(v.node.rsplit(" ", 1)[1].rstrip(")"))
                break
        raise InvalidRegionGraphError(region, report)

    if mode is MergeMode.CP:
        cls = _cp_latent_classes(rg)
        for p in rg.partitions:
            if cls[p.parent] == cls[p.children[0]]:
                raise InvalidRegionGraphError(
                    p.parent, [Violation("latent-clash", "region shares its latent class with a child region",
                                         f"region {p.parent}")])
        lv_of_region = cls
    else:
        lv_of_region = {r: i for i, r in enumerate(rg.post_order())}

    comp = _Compiler(mode)
    unit_of: dict[int, int] = {}
    for r in rg.post_order():
        parts = rg.partitions_of(r)
        if not parts:
            (var,) = rg.regions[r]
            unit_of[r] = comp.add(InputUnit(var, lv_of_region[r]))
            continue
        out = None if r == rg.root else lv_of_region[r]
        merged = [comp.merge(unit_of[p.children[0]], unit_of[p.children[1]], out) for p in parts]
        unit_of[r] = merged[0] if len(merged) == 1 else comp.add(SumUnit(tuple(merged)))
    root = unit_of[rg.root]
    if rg.is_leaf(rg.root):
        root = comp.add(IntegralUnit(root, (), comp.lv_of[root]))
    num_lvs = max(lv_of_region.values()) + 1
    return PicGraph(comp.units, root, num_lvs)


def validate_structure(pic: PicGraph) -> list[Violation]:
    """Smoothness, decomposability, latent-scope and acyclicity violations."""
    report: list[Violation] = []
    n = len(pic.units)
    for i, u in enumerate(pic.units):
        where = f"unit {i} ({u.kind})"
        kids = unit_children(u)
        bad = [c for c in kids if not 0 <= c < i]
        if bad:
            report.append(Violation("non-dag", f"edges to {bad} break the topological order", where))
            continue
        if isinstance(u, SumUnit):
            if len(kids) < 2:
                report.append(Violation("sum-arity", "sum unit needs at least 2 inputs", where))
            if len({pic.scopes[c] for c in kids}) > 1:
                report.append(Violation("smoothness", "inputs are defined over different variables", where))
            if len({frozenset(pic.latent_scopes[c]) for c in kids}) > 1:
                report.append(Violation("latent-scope", "inputs expose different latent variables", where))
        elif isinstance(u, ProductUnit):
            if len(kids) != 2:
                report.append(Violation("product-arity", f"product unit has {len(kids)} inputs", where))
            seen = set()
            for c in kids:
                if seen & pic.scopes[c]:
                    report.append(Violation(
                        "decomposability", f"inputs share variables {sorted(seen & pic.scopes[c])}", where))
                seen |= pic.scopes[c]
        elif isinstance(u, IntegralUnit):
            if not u.in_lvs:
                report.append(Violation("latent-scope", "integral unit integrates no latent variable", where))
            if set(u.in_lvs) & set(u.out_lvs):
                report.append(Violation("latent-scope", "integrated and output latents overlap", where))
            if set(u.in_lvs) != set(pic.latent_scopes[u.child]):
                report.append(Violation(
                    "latent-scope",
                    f"integrates {list(u.in_lvs)} but its input exposes {list(pic.latent_scopes[u.child])}", where))
    if n and not 0 <= pic.root < n:
        report.append(Violation("root", f"root id {pic.root} out of range"))
    elif n:
        if pic.latent_scopes[pic.root]:
            report.append(Violation("root", f"root exposes latents {list(pic.latent_scopes[pic.root])}"))
    return report


SHARING_INPUT = ("F", "C", "N")
SHARING_INNER = ("C", "N")


def assign_groups(pic: PicGraph, input_policy: str = "F", inner_policy: str = "C") -> GroupTable:
    """Group input and integral units for functional sharing.

    Input units form one group (``F``: one shared function, ``C``: one head
    per unit) or singleton groups (``N``).  Integral units are grouped by
    (depth, arity) with one head per unit under ``C``, or kept apart under ``N``.
    Heads follow ascending unit id.
    """
    if input_policy not in SHARING_INPUT:
        raise ValueError(f"input policy must be one of {SHARING_INPUT}, got {input_policy!r}")
    if inner_policy not in SHARING_INNER:
        raise ValueError(f"inner policy must be one of {SHARING_INNER}, got {inner_policy!r}")
    depth = pic.depths()
    members, heads, kinds, arities, depths = [], [], [], [], []

    def add(group, n_heads, kind, arity, d):
        members.append(tuple(group))
        heads.append(n_heads)
        kinds.append(kind)
        arities.append(arity)
        depths.append(d)

    inputs = [i for i, u in enumerate(pic.units) if isinstance(u, InputUnit)]
    if input_policy == "N":
        for i in inputs:
            add([i], 1, "input", 1, 0)
    elif inputs:
        add(inputs, 1 if input_policy == "F" else len(inputs), "input", 1, 0)

    buckets = defaultdict(list)
    for i, u in enumerate(pic.units):
        if isinstance(u, IntegralUnit):
            buckets[(depth[i], u.arity)].append(i)
    for (d, a), group in sorted(buckets.items()):
        if inner_policy == "N":
            for i in group:
                add([i], 1, "integral", a, d)
        else:
            add(group, len(group), "integral", a, d)
    return GroupTable(tuple(members), tuple(heads), tuple(kinds), tuple(arities), tuple(depths))
