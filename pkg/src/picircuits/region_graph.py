"""Region graphs: rooted bipartite DAGs of variable subsets and their partitions.

Variables of an ``H x W x C`` image are numbered row-major, i.e. channel
``c`` of pixel ``(i, j)`` is variable ``(i * W + j) * C + c``.
"""
from __future__ import annotations

import hashlib
import json
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable


class RegionGraphParseError(ValueError):
    """Malformed region-graph document.  ``where`` locates the offending field."""

    def __init__(self, message: str, where: str = ""):
        self.where = where
        super().__init__(f"{where}: {message}" if where else message)


@dataclass(frozen=True)
class Partition:
    parent: int
    children: tuple[int, ...]


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    node: str = ""

    def __str__(self):
        return f"[{self.code}] {self.node}: {self.message}" if self.node else f"[{self.code}] {self.message}"


class RegionGraph:
    """Immutable region graph.

    Parameters
    ----------
    regions : sequence of iterables of int
        Variable scope of each region; the position is the region id.
    partitions : sequence of Partition
    root : int
        Id of the root region.

    The constructor only checks id ranges; structural properties are
    reported by :func:`validate`.
    """

    def __init__(self, regions: Iterable[Iterable[int]], partitions: Iterable[Partition], root: int):
        self.regions: tuple[tuple[int, ...], ...] = tuple(tuple(sorted(set(r))) for r in regions)
        self.partitions: tuple[Partition, ...] = tuple(
            Partition(int(p.parent), tuple(int(c) for c in p.children)) for p in partitions
        )
        self.root = int(root)
        n = len(self.regions)
        if not 0 <= self.root < n:
            raise ValueError(f"root id {self.root} out of range for {n} regions")
        for k, p in enumerate(self.partitions):
            for rid in (p.parent, *p.children):
                if not 0 <= rid < n:
                    raise ValueError(f"partition {k} references unknown region {rid}")
        by_parent = defaultdict(list)
        for k, p in enumerate(self.partitions):
            by_parent[p.parent].append(k)
        self._by_parent = {r: tuple(ks) for r, ks in by_parent.items()}

    @property
    def num_vars(self) -> int:
        return len(self.regions[self.root])

    def partitions_of(self, region: int) -> tuple[Partition, ...]:
        return tuple(self.partitions[k] for k in self._by_parent.get(region, ()))

    def is_leaf(self, region: int) -> bool:
        return region not in self._by_parent

    def leaves(self) -> list[int]:
        return [r for r in range(len(self.regions)) if self.is_leaf(r)]

    def parents_of(self, region: int) -> list[int]:
        return [k for k, p in enumerate(self.partitions) if region in p.children]

    def is_tree(self) -> bool:
        counts = defaultdict(int)
        for p in self.partitions:
            for c in p.children:
                counts[c] += 1
        return all(v <= 1 for v in counts.values())

    def post_order(self) -> list[int]:
        """Region ids such that every child precedes its parents."""
        seen, order = set(), []

        def visit(r):
            stack = [(r, False)]
            while stack:
                node, done = stack.pop()
                if done:
                    order.append(node)
                    continue
                if node in seen:
                    continue
                seen.add(node)
                stack.append((node, True))
                for p in reversed(self.partitions_of(node)):
                    for c in reversed(p.children):
                        if c not in seen:
                            stack.append((c, False))

        visit(self.root)
        return order

    def __eq__(self, other):
        if not isinstance(other, RegionGraph):
            return NotImplemented
        return (self.regions, self.partitions, self.root) == (other.regions, other.partitions, other.root)

    def __hash__(self):
        return hash((self.regions, self.partitions, self.root))

    def __repr__(self):
        return f"RegionGraph(regions={len(self.regions)}, partitions={len(self.partitions)}, vars={self.num_vars})"

    # serialization

    def to_dict(self) -> dict:
        return {
            "regions": [{"id": i, "vars": list(v)} for i, v in enumerate(self.regions)],
            "partitions": [{"parent": p.parent, "children": list(p.children)} for p in self.partitions],
            "root": self.root,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def _canonical(scopes: dict[frozenset, None], edges: list[tuple[frozenset, tuple[frozenset, ...]]], root: frozenset) -> RegionGraph:
    """Assign deterministic ids: regions by (size, sorted vars), partitions by (parent, children)."""
    keys = sorted(scopes, key=lambda s: (len(s), sorted(s)))
    ids = {s: i for i, s in enumerate(keys)}
    parts = sorted(
        {(ids[par], tuple(ids[c] for c in ch)) for par, ch in edges},
        key=lambda pc: (pc[0], tuple(sorted(keys[c]) for c in pc[1])),
    )
    return RegionGraph([sorted(s) for s in keys], [Partition(p, c) for p, c in parts], ids[root])


class _Builder:
    def __init__(self):
        self.scopes: dict[frozenset, None] = {}
        self.edges: list[tuple[frozenset, tuple[frozenset, ...]]] = []
        self._seen: set = set()

    def add_region(self, scope: frozenset):
        self.scopes.setdefault(scope, None)

    def add_partition(self, parent: frozenset, children: list[frozenset]):
        self.add_region(parent)
        for c in children:
            self.add_region(c)
        if len(children) == 4:
            # quad split: ((c00 c01) (c10 c11)), then each pair
            top, bottom = children[0] | children[1], children[2] | children[3]
            self.add_partition(parent, [top, bottom])
            self.add_partition(top, children[:2])
            self.add_partition(bottom, children[2:])
        elif len(children) > 2:
            head = frozenset().union(*children[:-1])
            self.add_partition(parent, [head, children[-1]])
            self.add_partition(head, children[:-1])
        else:
            edge = (parent, tuple(children))
            if edge not in self._seen:
                self._seen.add(edge)
                self.edges.append(edge)

    def add_chain(self, parent: frozenset, children: list[frozenset]):
        """Left-deep binary chain ((c0 c1) c2) ..."""
        while len(children) > 2:
            head = frozenset().union(*children[:-1])
            self.add_partition(parent, [head, children[-1]])
            parent, children = head, children[:-1]
        self.add_partition(parent, children)


def build_quad_rg(height: int, width: int, is_tree: bool, channels: int = 1) -> RegionGraph:
    """Quad-tree (``is_tree``) or quad-graph region graph for an image.

    Patches are recursively merged two-by-two.  Four-way merges are emitted as
    binary partitions: a tree merge splits top/bottom then each half
    left/right, a graph merge adds both the top/bottom and the left/right
    split of the patch.  With ``channels > 1`` every pixel region is further
    split into per-channel leaves.
    """
    if height < 1 or width < 1 or channels < 1:
        raise ValueError(f"image dimensions must be positive, got {height}x{width}x{channels}")
    b = _Builder()

    def pixel(i, j):
        return frozenset(range((i * width + j) * channels, (i * width + j + 1) * channels))

    level = {(i, j): pixel(i, j) for i in range(height) for j in range(width)}
    for r in level.values():
        b.add_region(r)
    h, w = height, width
    while h > 1 or w > 1:
        prev_h, prev_w = h, w
        h, w = -(-h // 2), -(-w // 2)
        nxt = {}
        for i in range(h):
            for j in range(w):
                omega = [(p, q) for p in (2 * i, 2 * i + 1) for q in (2 * j, 2 * j + 1) if p < prev_h and q < prev_w]
                rs = [level[c] for c in omega]
                if len(rs) == 1:
                    b.add_region(rs[0])
                elif len(rs) == 2:
                    b.add_partition(rs[0] | rs[1], rs)
                elif is_tree:
                    b.add_partition(frozenset().union(*rs), rs)
                else:
                    y00, y01, y10, y11 = rs
                    top, bottom, left, right = y00 | y01, y10 | y11, y00 | y10, y01 | y11
                    whole = top | bottom
                    b.add_partition(whole, [top, bottom])
                    b.add_partition(whole, [left, right])
                    b.add_partition(top, [y00, y01])
                    b.add_partition(bottom, [y10, y11])
                    b.add_partition(left, [y00, y10])
                    b.add_partition(right, [y01, y11])
                nxt[(i, j)] = frozenset().union(*rs)
        level = nxt
    root = level[(0, 0)]
    if channels > 1:
        for i in range(height):
            for j in range(width):
                px = sorted(pixel(i, j))
                b.add_chain(pixel(i, j), [frozenset([v]) for v in px])
    return _canonical(b.scopes, b.edges, root)


def validate(rg: RegionGraph) -> list[Violation]:
    """Every structural violation of ``rg``; empty iff the graph is valid."""
    report: list[Violation] = []
    n = len(rg.regions)
    for r, scope in enumerate(rg.regions):
        if not scope:
            report.append(Violation("empty-region", "region has an empty scope", f"region {r}"))
    for k, p in enumerate(rg.partitions):
        where = f"partition {k} (parent region {p.parent})"
        if len(p.children) != 2:
            report.append(Violation("non-binary", f"partition has {len(p.children)} children", where))
        seen: dict[int, int] = {}
        for c in p.children:
            for v in rg.regions[c]:
                if v in seen:
                    report.append(Violation(
                        "overlap", f"variable {v} shared by child regions {seen[v]} and {c}", where))
                seen[v] = c
        union = set(seen)
        parent = set(rg.regions[p.parent])
        if union != parent:
            missing, extra = sorted(parent - union), sorted(union - parent)
            report.append(Violation(
                "coverage", f"children union differs from parent scope (missing {missing}, extra {extra})", where))
    for r in rg.leaves():
        if len(rg.regions[r]) != 1:
            report.append(Violation("multivariate-leaf", f"leaf has {len(rg.regions[r])} variables", f"region {r}"))
    # cycles via DFS colouring over region -> child region edges
    children = defaultdict(set)
    for p in rg.partitions:
        children[p.parent].update(p.children)
    color = [0] * n
    for start in range(n):
        if color[start]:
            continue
        stack = [(start, iter(sorted(children[start])))]
        color[start] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                color[node] = 2
                stack.pop()
            elif color[nxt] == 1:
                report.append(Violation("cycle", f"edge {node} -> {nxt} closes a cycle", f"region {node}"))
            elif color[nxt] == 0:
                color[nxt] = 1
                stack.append((nxt, iter(sorted(children[nxt]))))
    reachable = {rg.root}
    frontier = [rg.root]
    while frontier:
        r = frontier.pop()
        for c in children[r]:
            if c not in reachable:
                reachable.add(c)
                frontier.append(c)
    for r in range(n):
        if r not in reachable:
            report.append(Violation("unreachable", "region is not reachable from the root", f"region {r}"))
    for k, p in enumerate(rg.partitions):
        if p.parent not in reachable:
            report.append(Violation("unreachable", "partition is not reachable from the root", f"partition {k}"))
    return report


def serialize(rg: RegionGraph) -> str:
    return rg.to_json()


def parse(text: str) -> RegionGraph:
    """Parse a region-graph JSON document, reporting the offending line or field."""
    if not text.strip():
        raise RegionGraphParseError("empty document")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise RegionGraphParseError(e.msg, f"line {e.lineno} column {e.colno}") from None
    if not isinstance(doc, dict):
        raise RegionGraphParseError("top-level value must be an object")
    for key in ("regions", "partitions", "root"):
        if key not in doc:
            raise RegionGraphParseError("missing field", key)
    unknown = set(doc) - {"regions", "partitions", "root"}
    if unknown:
        raise RegionGraphParseError(f"unknown fields {sorted(unknown)}")
    if not isinstance(doc["regions"], list) or not doc["regions"]:
        raise RegionGraphParseError("must be a non-empty list", "regions")
    scopes: dict[int, list[int]] = {}
    for i, entry in enumerate(doc["regions"]):
        where = f"regions[{i}]"
        if not isinstance(entry, dict) or set(entry) != {"id", "vars"}:
            raise RegionGraphParseError("expected an object with fields 'id' and 'vars'", where)
        rid, vs = entry["id"], entry["vars"]
        if not _is_int(rid) or rid < 0:
            raise RegionGraphParseError("id must be a non-negative integer", where + ".id")
        if rid in scopes:
            raise RegionGraphParseError(f"duplicate region id {rid}", where + ".id")
        if not isinstance(vs, list) or not vs or not all(_is_int(v) and v >= 0 for v in vs):
            raise RegionGraphParseError("vars must be a non-empty list of non-negative integers", where + ".vars")
        if vs != sorted(set(vs)):
            raise RegionGraphParseError("vars must be sorted ascending without repeats", where + ".vars")
        scopes[rid] = vs
    if sorted(scopes) != list(range(len(scopes))):
        raise RegionGraphParseError("region ids must be exactly 0..n-1", "regions")
    if not isinstance(doc["partitions"], list):
        raise RegionGraphParseError("must be a list", "partitions")
    parts = []
    for k, entry in enumerate(doc["partitions"]):
        where = f"partitions[{k}]"
        if not isinstance(entry, dict) or set(entry) != {"parent", "children"}:
            raise RegionGraphParseError("expected an object with fields 'parent' and 'children'", where)
        par, ch = entry["parent"], entry["children"]
        if not _is_int(par) or par not in scopes:
            raise RegionGraphParseError(f"unknown region id {par!r}", where + ".parent")
        if not isinstance(ch, list) or not ch:
            raise RegionGraphParseError("children must be a non-empty list", where + ".children")
        for c in ch:
            if not _is_int(c) or c not in scopes:
                raise RegionGraphParseError(f"unknown region id {c!r}", where + ".children")
        parts.append(Partition(par, tuple(ch)))
    root = doc["root"]
    if not _is_int(root) or root not in scopes:
        raise RegionGraphParseError(f"unknown region id {root!r}", "root")
    return RegionGraph([scopes[i] for i in range(len(scopes))], parts, root)


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def content_hash(rg: RegionGraph) -> str:
    return hashlib.sha256(rg.to_json().encode()).hexdigest()[:16]
