"""Bayesian networks over latent/observed variables and the graph operations
needed to wire them into flow masks: topological ordering, moralization,
d-separation, faithful inversion, and the ind/fc/true structure variants.

All values are immutable after construction and all operations are pure.
"""

from __future__ import annotations

import heapq
import re
from dataclasses import dataclass, field
from typing import Iterable, Literal

__all__ = [
    "GraphError",
    "GbnParseError",
    "LinearGaussianCpd",
    "BayesNet",
    "InverseGraph",
    "parse_gbn",
    "serialize_gbn",
    "topological_order",
    "moralize",
    "d_separated",
    "faithful_inverse",
    "make_structure",
]

NodeKind = Literal["latent", "observed"]
StructureVariant = Literal["ind", "fc", "true"]

_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")


class GraphError(ValueError):
    """Invalid graph structure or graph query."""


class GbnParseError(GraphError):
    """Malformed GBN text; carries the 1-based line number."""

    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


@dataclass(frozen=True)
class LinearGaussianCpd:
    """Node value = intercept + sum(coef_p * parent_p) + Normal(0, variance)."""

    intercept: float
    variance: float
    coefficients: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.variance > 0:
            raise GraphError(f"cpd variance must be > 0, got {self.variance}")


@dataclass(frozen=True)
class BayesNet:
    """A DAG over named latent/observed variables, optionally with
    linear-Gaussian CPDs attached to every node.

    ``nodes`` fixes the declaration order used for tie-breaking and for the
    coordinate order of latent (z) and observed (x) vectors everywhere else
    in the package.
    """

    name: str
    nodes: tuple[tuple[str, NodeKind], ...]
    edges: tuple[tuple[str, str], ...]
    cpds: dict[str, LinearGaussianCpd] | None = None

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple((str(i), k) for i, k in self.nodes))
        object.__setattr__(self, "edges", tuple((str(s), str(d)) for s, d in self.edges))
        ids = [i for i, _ in self.nodes]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise GraphError(f"duplicate node id {dup!r}")
        for i, kind in self.nodes:
            if not _IDENT_RE.match(i):
                raise GraphError(f"invalid node id {i!r}")
            if kind not in ("latent", "observed"):
                raise GraphError(f"node {i!r} has invalid kind {kind!r}")
        known = set(ids)
        seen = set()
        for s, d in self.edges:
            if s not in known or d not in known:
                raise GraphError(f"edge ({s!r}, {d!r}) references undeclared node")
            if s == d:
                raise GraphError(f"self-loop on {s!r}")
            if (s, d) in seen:
                raise GraphError(f"duplicate edge ({s!r}, {d!r})")
            seen.add((s, d))
        # Raises on cycles; result is cached lazily afterwards.
        _toposort(ids, self.edges)
        if self.cpds is not None:
            missing = known - set(self.cpds)
            extra = set(self.cpds) - known
            if extra:
                raise GraphError(f"cpd for undeclared node {sorted(extra)[0]!r}")
            if missing:
                raise GraphError(f"missing cpd for node {sorted(missing)[0]!r}")
            for i in ids:
                want = set(self.parents(i))
                got = set(self.cpds[i].coefficients)
                if want != got:
                    raise GraphError(
                        f"cpd for {i!r} has coefficients {sorted(got)}, "
                        f"expected parent set {sorted(want)}"
                    )

    # --- basic accessors -------------------------------------------------

    @property
    def node_ids(self) -> tuple[str, ...]:
        return tuple(i for i, _ in self.nodes)

    @property
    def latent_ids(self) -> tuple[str, ...]:
        return tuple(i for i, k in self.nodes if k == "latent")

    @property
    def observed_ids(self) -> tuple[str, ...]:
        return tuple(i for i, k in self.nodes if k == "observed")

    @property
    def num_latent(self) -> int:
        return len(self.latent_ids)

    @property
    def num_observed(self) -> int:
        return len(self.observed_ids)

    def kind(self, node: str) -> NodeKind:
        for i, k in self.nodes:
            if i == node:
                return k
        raise GraphError(f"unknown node {node!r}")

    def declaration_index(self, node: str) -> int:
        for idx, (i, _) in enumerate(self.nodes):
            if i == node:
                return idx
        raise GraphError(f"unknown node {node!r}")

    def parents(self, node: str) -> tuple[str, ...]:
        if node not in set(self.node_ids):
            raise GraphError(f"unknown node {node!r}")
        order = {i: n for n, i in enumerate(self.node_ids)}
        ps = [s for s, d in self.edges if d == node]
        return tuple(sorted(ps, key=order.__getitem__))

    def children(self, node: str) -> tuple[str, ...]:
        if node not in set(self.node_ids):
            raise GraphError(f"unknown node {node!r}")
        order = {i: n for n, i in enumerate(self.node_ids)}
        cs = [d for s, d in self.edges if s == node]
        return tuple(sorted(cs, key=order.__getitem__))


@dataclass(frozen=True)
class InverseGraph:
    """Dependency structure for the approximate posterior q(z | x).

    Observed nodes are sources (they condition, they are never generated);
    ``latent_order`` is the elimination-derived topological order in which the
    latents are generated.  ``nodes`` preserves the originating network's
    declaration order so mask builders can map ids to coordinates.
    """

    nodes: tuple[tuple[str, NodeKind], ...]
    edges: tuple[tuple[str, str], ...]
    latent_order: tuple[str, ...]

    def __post_init__(self):
        kinds = dict(self.nodes)
        for s, d in self.edges:
            if kinds.get(d) != "latent":
                raise GraphError(f"inverse edge into non-latent node {d!r}")
        pos = {v: i for i, v in enumerate(self.latent_order)}
        for s, d in self.edges:
            if kinds.get(s) == "latent" and pos[s] >= pos[d]:
                raise GraphError(f"inverse edge ({s!r}, {d!r}) violates latent order")

    @property
    def latent_ids(self) -> tuple[str, ...]:
        return tuple(i for i, k in self.nodes if k == "latent")

    @property
    def observed_ids(self) -> tuple[str, ...]:
        return tuple(i for i, k in self.nodes if k == "observed")

    def parents(self, node: str) -> tuple[str, ...]:
        order = {i: n for n, (i, _) in enumerate(self.nodes)}
        if node not in order:
            raise GraphError(f"unknown node {node!r}")
        ps = [s for s, d in self.edges if d == node]
        return tuple(sorted(ps, key=order.__getitem__))


# --- GBN text format -----------------------------------------------------
#
#   gbn <name>
#   node <id> latent|observed
#   edge <src> <dst>
#   cpd <id> intercept <float> var <float> [coef <parent> <float>]*
#
# '#' starts a comment; floats are decimal or C99 hex; the serializer emits
# hex floats so that serialize -> parse -> serialize is byte-stable.

_HEX_FLOAT_RE = re.compile(r"[+-]?0x", re.IGNORECASE)


def _parse_float(tok: str, line: int) -> float:
    try:
        if _HEX_FLOAT_RE.match(tok):
            return float.fromhex(tok)
        return float(tok)
    except ValueError:
        raise GbnParseError(line, f"invalid float {tok!r}") from None


def parse_gbn(text: str) -> BayesNet:
    """Parse GBN text into a validated :class:`BayesNet`."""
    name = None
    nodes: list[tuple[str, NodeKind]] = []
    edges: list[tuple[str, str]] = []
    cpds: dict[str, LinearGaussianCpd] = {}
    # Sections must appear in order: gbn, node*, edge*, cpd*.
    stage = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        kw = toks[0]
        if kw == "gbn":
            if stage != 0:
                raise GbnParseError(lineno, "duplicate gbn line")
            if len(toks) != 2 or not _IDENT_RE.match(toks[1]):
                raise GbnParseError(lineno, "expected: gbn <name>")
            name = toks[1]
            stage = 1
        elif kw == "node":
            if stage not in (1,):
                raise GbnParseError(lineno, "node line out of order")
            if len(toks) != 3 or toks[2] not in ("latent", "observed"):
                raise GbnParseError(lineno, "expected: node <id> latent|observed")
            if not _IDENT_RE.match(toks[1]):
                raise GbnParseError(lineno, f"invalid node id {toks[1]!r}")
            if any(toks[1] == i for i, _ in nodes):
                raise GbnParseError(lineno, f"duplicate node id {toks[1]!r}")
            nodes.append((toks[1], toks[2]))
        elif kw == "edge":
            if stage == 1:
                stage = 2
            if stage != 2:
                raise GbnParseError(lineno, "edge line out of order")
            if len(toks) != 3:
                raise GbnParseError(lineno, "expected: edge <src> <dst>")
            edges.append((toks[1], toks[2]))
        elif kw == "cpd":
            if stage in (1, 2):
                stage = 3
            if stage != 3:
                raise GbnParseError(lineno, "cpd line out of order")
            if len(toks) < 6 or toks[2] != "intercept" or toks[4] != "var":
                raise GbnParseError(
                    lineno, "expected: cpd <id> intercept <f> var <f> [coef <p> <f>]*"
                )
            node = toks[1]
            if node in cpds:
                raise GbnParseError(lineno, f"duplicate cpd for {node!r}")
            intercept = _parse_float(toks[3], lineno)
            variance = _parse_float(toks[5], lineno)
            coefs: dict[str, float] = {}
            rest = toks[6:]
            while rest:
                if len(rest) < 3 or rest[0] != "coef":
                    raise GbnParseError(lineno, "expected: coef <parent> <float>")
                if rest[1] in coefs:
                    raise GbnParseError(lineno, f"duplicate coef for {rest[1]!r}")
                coefs[rest[1]] = _parse_float(rest[2], lineno)
                rest = rest[3:]
            if not variance > 0:
                raise GbnParseError(lineno, f"cpd variance must be > 0, got {variance}")
            cpds[node] = LinearGaussianCpd(intercept, variance, coefs)
        else:
            raise GbnParseError(lineno, f"unknown keyword {kw!r}")
    if name is None:
        raise GbnParseError(1, "missing gbn header line")
    try:
        return BayesNet(name, tuple(nodes), tuple(edges), cpds or None)
    except GraphError as exc:
        raise GraphError(f"{name}: {exc}") from exc


def serialize_gbn(g: BayesNet) -> str:
    """Emit canonical GBN text (hex floats, declaration order)."""
    lines = [f"gbn {g.name}"]
    for i, kind in g.nodes:
        lines.append(f"node {i} {kind}")
    for s, d in g.edges:
        lines.append(f"edge {s} {d}")
    if g.cpds is not None:
        for i, _ in g.nodes:
            cpd = g.cpds[i]
            parts = [f"cpd {i} intercept {cpd.intercept.hex()} var {cpd.variance.hex()}"]
            for p in g.parents(i):
                parts.append(f"coef {p} {cpd.coefficients[p].hex()}")
            lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


# --- orderings and separation --------------------------------------------


def _toposort(ids: Iterable[str], edges: Iterable[tuple[str, str]]) -> list[str]:
    ids = list(ids)
    pos = {i: n for n, i in enumerate(ids)}
    indeg = {i: 0 for i in ids}
    children: dict[str, list[str]] = {i: [] for i in ids}
    for s, d in edges:
        indeg[d] += 1
        children[s].append(d)
    order: list[str] = []
    # Ties broken by declaration order via a min-heap over declaration index.
    ready = [pos[i] for i in ids if indeg[i] == 0]
    heapq.heapify(ready)
    while ready:
        v = ids[heapq.heappop(ready)]
        order.append(v)
        for c in children[v]:
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(ready, pos[c])
    if len(order) != len(ids):
        stuck = sorted(i for i in ids if indeg[i] > 0)
        raise GraphError(f"cycle detected involving {stuck}")
    return order


def topological_order(g: BayesNet) -> list[str]:
    """Node ids with every edge pointing forward; ties broken by declaration order."""
    return _toposort(g.node_ids, g.edges)


def moralize(g: BayesNet) -> set[tuple[str, str]]:
    """Undirected skeleton plus an edge between every pair of co-parents.

    Edges are returned as tuples ordered by declaration index.
    """
    pos = {i: n for n, i in enumerate(g.node_ids)}

    def und(a: str, b: str) -> tuple[str, str]:
        return (a, b) if pos[a] < pos[b] else (b, a)

    out = {und(s, d) for s, d in g.edges}
    for v in g.node_ids:
        ps = g.parents(v)
        for i in range(len(ps)):
            for j in range(i + 1, len(ps)):
                out.add(und(ps[i], ps[j]))
    return out


def d_separated(g: BayesNet, a: str, b: str, conditioning: Iterable[str] = ()) -> bool:
    """True iff a and b are d-separated given ``conditioning`` in g.

    Uses the ancestral-moralization criterion: restrict to ancestors of
    {a, b} | conditioning, moralize, delete the conditioning nodes, and test
    undirected reachability.
    """
    cond = set(conditioning)
    known = set(g.node_ids)
    for v in {a, b} | cond:
        if v not in known:
            raise GraphError(f"unknown node {v!r}")
    if a == b or a in cond or b in cond:
        raise GraphError("d-separation endpoints must be distinct and unconditioned")

    parents = {v: set(g.parents(v)) for v in g.node_ids}
    anc = set()
    frontier = {a, b} | cond
    while frontier:
        v = frontier.pop()
        if v in anc:
            continue
        anc.add(v)
        frontier |= parents[v] - anc

    adj: dict[str, set[str]] = {v: set() for v in anc}
    for s, d in g.edges:
        if s in anc and d in anc:
            adj[s].add(d)
            adj[d].add(s)
    for v in anc:
        ps = [p for p in parents[v] if p in anc]
        for i in range(len(ps)):
            for j in range(i + 1, len(ps)):
                adj[ps[i]].add(ps[j])
                adj[ps[j]].add(ps[i])

    seen = {a}
    stack = [a]
    while stack:
        v = stack.pop()
        if v == b:
            return False
        for w in adj[v]:
            if w not in seen and w not in cond:
                seen.add(w)
                stack.append(w)
    return True


def faithful_inverse(g: BayesNet) -> InverseGraph:
    """Minimal faithful dependency structure for q(z | x).

    Construction: moralize g, then eliminate the latents in topological order
    of g, taking each latent's remaining neighbours at elimination time as its
    parents in the inverse and adding fill-in edges among them.  Observed
    nodes are never eliminated and become sources.  The resulting factoring
    q(z|x) = prod_j q(z_j | pa_inv(z_j)) asserts only conditional
    independencies that hold in the true posterior; minimality is heuristic
    (it depends on the elimination order).
    """
    latents = g.latent_ids
    if not latents:
        raise GraphError("faithful_inverse requires at least one latent node")
    pos = {i: n for n, i in enumerate(g.node_ids)}

    adj: dict[str, set[str]] = {v: set() for v in g.node_ids}
    for u, v in moralize(g):
        adj[u].add(v)
        adj[v].add(u)

    elim = [v for v in topological_order(g) if v in set(latents)]
    edges: list[tuple[str, str]] = []
    for v in elim:
        nbrs = sorted(adj[v], key=pos.__getitem__)
        for u in nbrs:
            edges.append((u, v))
        for i in range(len(nbrs)):
            for j in range(i + 1, len(nbrs)):
                adj[nbrs[i]].add(nbrs[j])
                adj[nbrs[j]].add(nbrs[i])
        for u in nbrs:
            adj[u].discard(v)
        del adj[v]

    # Later-eliminated latents are generated first in the inverse.
    latent_order = tuple(reversed(elim))
    order_pos = {v: i for i, v in enumerate(latent_order)}
    edges.sort(key=lambda e: (order_pos[e[1]], pos[e[0]]))
    return InverseGraph(nodes=g.nodes, edges=tuple(edges), latent_order=latent_order)


def make_structure(variant: StructureVariant, g: BayesNet) -> BayesNet:
    """Replace g's dependency structure for the ind / fc model variants.

    ind: latents mutually independent; fc: complete DAG over the latents in
    g's latent topological order.  In both, every observed node is conditioned
    on all latents.  'true' returns g unchanged.  CPDs do not carry over to
    the rewired variants.
    """
    if variant == "true":
        return g
    latents = [v for v in topological_order(g) if g.kind(v) == "latent"]
    edges: list[tuple[str, str]] = []
    if variant == "fc":
        for i in range(len(latents)):
            for j in range(i + 1, len(latents)):
                edges.append((latents[i], latents[j]))
    elif variant != "ind":
        raise GraphError(f"unknown structure variant {variant!r}")
    for x in g.observed_ids:
        for z in g.latent_ids:
            edges.append((z, x))
    return BayesNet(f"{g.name}_{variant}", g.nodes, tuple(edges), None)
