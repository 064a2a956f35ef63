"""Context-free grammar for multigrid preconditioners and its derivation trees.

The grammar is written for a hierarchy of ``depth`` levels numbered from 0
(finest) to ``depth - 1`` (coarsest).  Variables are

``S``
    start symbol, derives ``s0``.
``s{l}``
    state on level ``l`` (``l < depth - 1``): a smoothing step, a coarse-grid
    correction, or (finest level only) the initial state ``(u0, f, -, -)``.
``c{l}``
    a defect on level ``l``: the residual of a state, the start of a new
    coarse problem from a restricted finer defect (``cocy``), or on the
    coarsest level the directly solved restricted defect.
``B{l}``
    smoother splitting on level ``l`` (pointwise or an ``a x b`` block).
``P``
    partitioning: red-black or none.
``w``
    relaxation factor.

Trees are built from immutable :class:`Node` objects; every node is a
variable together with the index of the production applied to it, so
``B``, ``P`` and ``w`` leaves are nodes with childless productions.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator, Optional, Sequence

import numpy as np

from mgevo.problem import DEPTH, ProblemInstance


class InvalidTreeError(ValueError):
    pass


def _relaxation_factors() -> tuple[float, ...]:
    return tuple(round(0.1 + 0.05 * i, 2) for i in range(37))


def block_shapes(max_block: int) -> tuple[tuple[int, int], ...]:
    """All ``a x b`` tiles with ``2 <= a * b <= max_block``, ordered by size then ``a``."""
    shapes = [(a, b) for a in range(1, max_block + 1) for b in range(1, max_block + 1)
              if 2 <= a * b <= max_block]
    return tuple(sorted(shapes, key=lambda s: (s[0] * s[1], s[0])))


@dataclass(frozen=True)
class ComponentMenu:
    relaxation: tuple[float, ...] = field(default_factory=_relaxation_factors)
    max_block: int = 6

    @property
    def splittings(self) -> tuple[tuple[int, int], ...]:
        """``(1, 1)`` (pointwise) followed by every admissible block shape."""
        return ((1, 1),) + block_shapes(self.max_block)


@dataclass(frozen=True)
class Production:
    name: str
    children: tuple[str, ...] = ()
    value: object = None

    @property
    def terminal(self) -> bool:
        return not self.children


@lru_cache(maxsize=None)
def _production_table(depth: int, menu: ComponentMenu) -> dict[str, tuple[Production, ...]]:
    if depth < 3:
        raise ValueError("the grammar needs at least three levels")
    last = depth - 1
    table: dict[str, tuple[Production, ...]] = {"S": (Production("start", ("s0",)),)}
    for lv in range(last):
        smooth = Production("smooth", ("w", "P", f"B{lv}", f"c{lv}"))
        if lv + 1 < last:
            coarse = Production("cgc", ("w", f"s{lv + 1}"))
        else:
            coarse = Production("coarse", ("w", f"c{last}"))
        prods = [smooth, coarse]
        if lv == 0:
            prods.append(Production("init"))
        table[f"s{lv}"] = tuple(prods)
        if lv == 0:
            table["c0"] = (Production("residual", ("s0",)),)
        else:
            table[f"c{lv}"] = (Production("residual", (f"s{lv}",)),
                               Production("cocy", (f"c{lv - 1}",)))
        table[f"B{lv}"] = tuple(
            Production("point" if s == (1, 1) else f"block{s[0]}x{s[1]}", (), s)
            for s in menu.splittings)
    table[f"c{last}"] = (Production("solve", (f"c{last - 1}",)),)
    table["P"] = (Production("rb", (), "red-black"), Production("none", (), None))
    table["w"] = tuple(Production(f"{v:g}", (), v) for v in menu.relaxation)
    return table


def _variable_level(var: str) -> Optional[int]:
    return int(var[1:]) if var[0] in "scB" else None


@dataclass(frozen=True)
class Grammar:
    """Productions for ``depth`` levels, bound to a problem instance (if any)."""

    depth: int = DEPTH
    menu: ComponentMenu = field(default_factory=ComponentMenu)
    instance: Optional[ProblemInstance] = None

    def __post_init__(self):
        _production_table(self.depth, self.menu)

    @property
    def productions(self) -> dict[str, tuple[Production, ...]]:
        return _production_table(self.depth, self.menu)

    @property
    def variables(self) -> tuple[str, ...]:
        return tuple(self.productions)

    @property
    def shape(self) -> tuple[int, ComponentMenu]:
        return (self.depth, self.menu)

    def production(self, var: str, prod: int) -> Production:
        return self.productions[var][prod]

    def terminal_ids(self, var: str) -> list[int]:
        return [i for i, p in enumerate(self.productions[var]) if p.terminal]

    def nonterminal_ids(self, var: str) -> list[int]:
        return [i for i, p in enumerate(self.productions[var]) if not p.terminal]

    def min_heights(self) -> dict[str, int]:
        return _min_heights(self.depth, self.menu)

    def binding(self) -> Optional[float]:
        return None if self.instance is None else self.instance.k


@lru_cache(maxsize=None)
def _min_heights(depth: int, menu: ComponentMenu) -> dict[str, int]:
    # Fixed point of h(v) = min over productions of 1 + max(h(children)).
    table = _production_table(depth, menu)
    best = {v: float("inf") for v in table}
    changed = True
    while changed:
        changed = False
        for v, prods in table.items():
            for p in prods:
                h = 1 + max((best[c] for c in p.children), default=0)
                if h < best[v]:
                    best[v] = h
                    changed = True
    return {v: int(h) for v, h in best.items()}


def make_grammar(p: Optional[ProblemInstance] = None, components: Optional[ComponentMenu] = None,
                 depth: Optional[int] = None) -> Grammar:
    """Grammar for the hierarchy of ``p`` (``depth`` overrides the instance depth)."""
    if depth is None:
        depth = p.depth if p is not None else DEPTH
    if p is not None and p.depth != depth:
        raise ValueError(f"instance depth {p.depth} differs from requested depth {depth}")
    return Grammar(depth, components or ComponentMenu(), p)


@dataclass(frozen=True, slots=True)
class Node:
    var: str
    prod: int
    children: tuple["Node", ...] = ()
    height: int = field(init=False, compare=False, repr=False)
    size: int = field(init=False, compare=False, repr=False)
    _hash: int = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "height", 1 + max((c.height for c in self.children), default=0))
        object.__setattr__(self, "size", 1 + sum(c.size for c in self.children))
        object.__setattr__(self, "_hash", hash((self.var, self.prod, self.children)))

    def __hash__(self):
        return self._hash


@dataclass(frozen=True)
class DerivationTree:
    """Genotype: a derivation from ``S`` under the grammar with the given shape.

    ``k`` records the problem instance the tree is currently bound to.
    """

    root: Node
    depth: int = DEPTH
    menu: ComponentMenu = field(default_factory=ComponentMenu)
    k: Optional[float] = None

    @property
    def height(self) -> int:
        return self.root.height

    @property
    def size(self) -> int:
        return self.root.size

    def grammar(self) -> Grammar:
        return Grammar(self.depth, self.menu)

    def digest(self) -> str:
        return hashlib.sha1(dumps(self, header=False).encode()).hexdigest()[:16]

    def nodes(self) -> Iterator[tuple[tuple[int, ...], Node]]:
        return iter_nodes(self.root)


def iter_nodes(root: Node) -> Iterator[tuple[tuple[int, ...], Node]]:
    """Pre-order ``(path, node)`` pairs; ``path`` lists child indices from the root."""
    stack = [((), root)]
    while stack:
        path, node = stack.pop()
        yield path, node
        for i in range(len(node.children) - 1, -1, -1):
            stack.append((path + (i,), node.children[i]))


def node_at(root: Node, path: Sequence[int]) -> Node:
    for i in path:
        root = root.children[i]
    return root


def replace_at(root: Node, path: Sequence[int], new: Node) -> Node:
    if not path:
        return new
    i = path[0]
    child = replace_at(root.children[i], path[1:], new)
    return Node(root.var, root.prod, root.children[:i] + (child,) + root.children[i + 1:])


def validate(tree, grammar: Optional[Grammar] = None) -> None:
    """Raise :class:`InvalidTreeError` unless ``tree`` is a complete derivation."""
    if isinstance(tree, DerivationTree):
        grammar = grammar or tree.grammar()
        if grammar.shape != (tree.depth, tree.menu):
            raise InvalidTreeError("tree and grammar have different shapes")
        root = tree.root
    else:
        root = tree
    if grammar is None:
        raise InvalidTreeError("a grammar is required to validate a bare node")
    if root.var != "S":
        raise InvalidTreeError(f"root is {root.var!r}, expected 'S'")
    table = grammar.productions
    for path, node in iter_nodes(root):
        prods = table.get(node.var)
        if prods is None:
            raise InvalidTreeError(f"unknown variable {node.var!r} at {path}")
        if not 0 <= node.prod < len(prods):
            raise InvalidTreeError(f"production {node.prod} out of range for {node.var!r} at {path}")
        want = prods[node.prod].children
        got = tuple(c.var for c in node.children)
        if want != got:
            raise InvalidTreeError(
                f"{node.var}[{prods[node.prod].name}] at {path} has children {got}, expected {want}")


def is_valid(tree, grammar: Optional[Grammar] = None) -> bool:
    try:
        validate(tree, grammar)
    except InvalidTreeError:
        return False
    return True


class GrowError(RuntimeError):
    pass


def _grow_node(var, depth_here, g, min_height, max_height, rng, mins):
    prods = g.productions[var]
    feasible = [i for i, p in enumerate(prods)
                if depth_here + max((mins[c] for c in p.children), default=0) <= max_height]
    if not feasible:
        raise GrowError(f"no production of {var!r} fits below height {max_height}")
    if depth_here < min_height:
        extending = [i for i in feasible if not prods[i].terminal]
        if extending:
            feasible = extending
    choice = feasible[int(rng.integers(len(feasible)))]
    children = tuple(_grow_node(c, depth_here + 1, g, min_height, max_height, rng, mins)
                     for c in prods[choice].children)
    return Node(var, choice, children)


def grow_node(g: Grammar, var: str, min_height: int, max_height: int, rng,
              retries: int = 100) -> Node:
    """Grow a subtree rooted at ``var`` (heights relative to that root)."""
    if min_height > max_height:
        raise GrowError(f"empty height window [{min_height}, {max_height}]")
    mins = g.min_heights()
    if mins[var] > max_height:
        raise GrowError(f"{var!r} needs height {mins[var]} > {max_height}")
    for _ in range(retries):
        try:
            node = _grow_node(var, 1, g, min_height, max_height, rng, mins)
        except GrowError:
            continue
        if node.height >= min_height or not g.nonterminal_ids(var):
            return node
    raise GrowError(f"could not grow {var!r} within [{min_height}, {max_height}]")


def grow(g: Grammar, min_height: int = 4, max_height: int = 12, rng=None) -> DerivationTree:
    """Grow strategy: uniform choice among the productions that keep the tree
    inside ``[min_height, max_height]`` (heights count nodes on the longest path).

    Until ``min_height`` is reached only productions with variables are taken
    when the variable has any.
    """
    if not 2 <= min_height <= max_height:
        raise GrowError(f"invalid height window [{min_height}, {max_height}]")
    rng = np.random.default_rng(rng)
    root = grow_node(g, "S", min_height, max_height, rng)
    return DerivationTree(root, g.depth, g.menu, g.binding())


def _same_shape(t: DerivationTree, g: Grammar):
    if (t.depth, t.menu) != g.shape:
        raise ValueError(
            f"tree has depth {t.depth} / menu {t.menu}, grammar has {g.shape[0]} / {g.shape[1]}")


def mutate(t: DerivationTree, g: Grammar, p_terminal: float = 1 / 3, rng=None, *,
           min_height: int = 1, max_height: int = 12,
           height_limit: Optional[int] = None) -> DerivationTree:
    """Mutate one node of ``t``.

    With probability ``p_terminal`` a leaf whose variable has several terminal
    productions (``B``, ``P``, ``w``) is relabelled to a different one.
    Otherwise the subtree below a uniformly chosen variable node is replaced by
    a grown one; if the new subtree contains the replaced root's variable below
    its own root, the original subtree is spliced in at one such place.
    """
    _same_shape(t, g)
    rng = np.random.default_rng(rng)
    nodes = list(t.nodes())
    if rng.random() < p_terminal:
        leaves = [(path, n) for path, n in nodes
                  if not n.children and len(g.terminal_ids(n.var)) > 1]
        if leaves:
            path, node = leaves[int(rng.integers(len(leaves)))]
            others = [i for i in g.terminal_ids(node.var) if i != node.prod]
            new = Node(node.var, others[int(rng.integers(len(others)))])
            return DerivationTree(replace_at(t.root, path, new), t.depth, t.menu, t.k)
    candidates = [(path, n) for path, n in nodes if g.nonterminal_ids(n.var)]
    path, old = candidates[int(rng.integers(len(candidates)))]
    limit = height_limit if height_limit is not None else max_height + t.height
    room = max(limit - len(path), g.min_heights()[old.var])
    new = grow_node(g, old.var, min(min_height, room), min(max_height, room), rng)
    spots = [p for p, n in iter_nodes(new) if p and n.var == old.var]
    if spots:
        spot = spots[int(rng.integers(len(spots)))]
        spliced = replace_at(new, spot, old)
        if len(path) + spliced.height <= limit:
            new = spliced
    return DerivationTree(replace_at(t.root, path, new), t.depth, t.menu, t.k)


def crossover(a: DerivationTree, b: DerivationTree, rng=None,
              height_limit: Optional[int] = None) -> tuple[DerivationTree, DerivationTree]:
    """Exchange subtrees at a node pair drawn uniformly from all label-matching pairs.

    A child that would exceed ``height_limit`` is replaced by its parent.
    """
    if (a.depth, a.menu) != (b.depth, b.menu):
        raise ValueError("parents come from different grammars")
    rng = np.random.default_rng(rng)
    by_var_a: dict[str, list] = {}
    by_var_b: dict[str, list] = {}
    for path, n in a.nodes():
        by_var_a.setdefault(n.var, []).append((path, n))
    for path, n in b.nodes():
        by_var_b.setdefault(n.var, []).append((path, n))
    shared = sorted(v for v in by_var_a if v in by_var_b)
    if not shared:
        return a, b
    weights = np.array([len(by_var_a[v]) * len(by_var_b[v]) for v in shared], dtype=float)
    idx = int(rng.integers(int(weights.sum())))
    cum = np.cumsum(weights)
    var = shared[int(np.searchsorted(cum, idx, side="right"))]
    pa, na = by_var_a[var][int(rng.integers(len(by_var_a[var])))]
    pb, nb = by_var_b[var][int(rng.integers(len(by_var_b[var])))]
    ca = DerivationTree(replace_at(a.root, pa, nb), a.depth, a.menu, a.k)
    cb = DerivationTree(replace_at(b.root, pb, na), b.depth, b.menu, b.k)
    if height_limit is not None:
        if ca.height > height_limit:
            ca = a
        if cb.height > height_limit:
            cb = b
    return ca, cb


def translate(t: DerivationTree, g_new: Grammar) -> DerivationTree:
    """Rebind ``t`` to the hierarchy of ``g_new``; the structure is untouched."""
    _same_shape(t, g_new)
    return DerivationTree(t.root, t.depth, t.menu, g_new.binding())


def isomorphic(a: DerivationTree, b: DerivationTree) -> bool:
    return a.root == b.root and a.depth == b.depth and a.menu == b.menu


# -- text form ---------------------------------------------------------------

def _value_token(prod: Production) -> str:
    return prod.name


def _dump_node(node: Node, table, out: list[str]) -> None:
    prod = table[node.var][node.prod]
    out.append(f"({node.var} {node.prod}")
    if prod.terminal and prod.value is not None or node.var in ("P", "w") or node.var.startswith("B"):
        out.append(f" {_value_token(prod)}")
    for c in node.children:
        out.append(" ")
        _dump_node(c, table, out)
    out.append(")")


def dumps(t: DerivationTree, header: bool = True) -> str:
    """Canonical S-expression: ``(var production-id [terminal] children...)``."""
    out: list[str] = []
    if header:
        k = "none" if t.k is None else repr(float(t.k))
        out.append(f"(genotype depth={t.depth} max_block={t.menu.max_block} "
                   f"omegas={len(t.menu.relaxation)} k={k} ")
    table = _production_table(t.depth, t.menu)
    _dump_node(t.root, table, out)
    if header:
        out.append(")")
    return "".join(out)


_TOKEN = re.compile(r"\(|\)|[^\s()]+")


def loads(text: str, menu: Optional[ComponentMenu] = None) -> DerivationTree:
    """Parse the output of :func:`dumps`; raises :class:`InvalidTreeError` on bad input."""
    tokens = _TOKEN.findall(text)
    if not tokens:
        raise InvalidTreeError("empty genotype text")
    pos = 0

    def expect(tok):
        nonlocal pos
        if pos >= len(tokens) or tokens[pos] != tok:
            got = tokens[pos] if pos < len(tokens) else "end of input"
            raise InvalidTreeError(f"expected {tok!r}, got {got!r}")
        pos += 1

    expect("(")
    if tokens[pos] != "genotype":
        raise InvalidTreeError("missing genotype header")
    pos += 1
    attrs = {}
    while pos < len(tokens) and "=" in tokens[pos]:
        key, _, val = tokens[pos].partition("=")
        attrs[key] = val
        pos += 1
    try:
        depth = int(attrs["depth"])
        max_block = int(attrs.get("max_block", 6))
        n_omega = int(attrs.get("omegas", 37))
        k = None if attrs.get("k", "none") == "none" else float(attrs["k"])
    except (KeyError, ValueError) as exc:
        raise InvalidTreeError(f"bad genotype header: {exc}") from None
    menu = menu or ComponentMenu(max_block=max_block)
    if len(menu.relaxation) != n_omega or menu.max_block != max_block:
        raise InvalidTreeError("genotype menu does not match the component menu")
    try:
        table = _production_table(depth, menu)
    except ValueError as exc:
        raise InvalidTreeError(str(exc)) from None

    def parse_node():
        nonlocal pos
        expect("(")
        if pos + 1 >= len(tokens):
            raise InvalidTreeError("truncated genotype")
        var = tokens[pos]
        if var not in table:
            raise InvalidTreeError(f"unknown variable {var!r}")
        try:
            prod = int(tokens[pos + 1])
        except ValueError:
            raise InvalidTreeError(f"bad production id {tokens[pos + 1]!r}") from None
        pos += 2
        if not 0 <= prod < len(table[var]):
            raise InvalidTreeError(f"production {prod} out of range for {var!r}")
        p = table[var][prod]
        if pos < len(tokens) and tokens[pos] not in "()":
            if tokens[pos] != _value_token(p):
                raise InvalidTreeError(
                    f"terminal {tokens[pos]!r} does not match production {var}[{prod}]")
            pos += 1
        children = []
        while pos < len(tokens) and tokens[pos] == "(":
            children.append(parse_node())
        expect(")")
        return Node(var, prod, tuple(children))

    root = parse_node()
    expect(")")
    if pos != len(tokens):
        raise InvalidTreeError("trailing text after genotype")
    tree = DerivationTree(root, depth, menu, k)
    validate(tree)
    return tree
