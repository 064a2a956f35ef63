"""Genotype-to-phenotype mapping: derivation trees become linear multigrid programs.

A program works on three registers per level: the approximation ``u``, the
right-hand side ``f`` and the defect ``r``.  Levels are relative, 0 is the
finest.  The instruction set:

========================  ===============================================
``RESIDUAL l``            ``r_l <- f_l - M_l u_l``
``SMOOTH l B P w``        ``u_l <- u_l + w B^-1 r_l`` (two colours when ``P``)
``RESTRICT l``            ``f_{l+1} <- R r_l``
``ZERO l``                ``u_l <- 0``
``SOLVE l``               ``u_l <- M_l^-1 f_l`` (coarsest level)
``CORRECT l w``           ``u_l <- u_l + w P u_{l+1}``
========================  ===============================================

Execution starts with ``u_0 = 0`` and ``f_0`` set to the vector the
preconditioner is applied to; the result is ``u_0``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

from mgevo.grammar import ComponentMenu, DerivationTree, Node, _production_table, validate
from mgevo.problem import KH, ProblemInstance

RESIDUAL = "RESIDUAL"
SMOOTH = "SMOOTH"
RESTRICT = "RESTRICT"
ZERO = "ZERO"
SOLVE = "SOLVE"
CORRECT = "CORRECT"


class Instruction(NamedTuple):
    op: str
    level: int
    omega: float = 1.0
    block: tuple[int, int] = (1, 1)
    red_black: bool = False

    def __str__(self):
        if self.op == SMOOTH:
            kind = "point" if self.block == (1, 1) else f"block{self.block[0]}x{self.block[1]}"
            part = " red-black" if self.red_black else ""
            return f"SMOOTH {self.level} {kind}{part} w={self.omega:g}"
        if self.op == CORRECT:
            return f"CORRECT {self.level} w={self.omega:g}"
        return f"{self.op} {self.level}"


class ProgramError(ValueError):
    pass


@dataclass(frozen=True)
class MultigridProgram:
    """Loop-free instruction list for one preconditioner application."""

    depth: int
    instructions: tuple[Instruction, ...]
    l_max: Optional[int] = None

    def __post_init__(self):
        check_program(self)

    def __len__(self):
        return len(self.instructions)

    def count(self, op: str) -> int:
        return sum(1 for ins in self.instructions if ins.op == op)

    def opcodes(self) -> list[tuple]:
        """Instructions without the level binding (for structural comparison)."""
        return [tuple(ins) for ins in self.instructions]

    def __str__(self):
        return "\n".join(str(ins) for ins in self.instructions)


def check_program(prog: MultigridProgram) -> None:
    """Verify the register discipline of a program.

    Every ``SMOOTH`` and ``RESTRICT`` needs an up-to-date defect on its level,
    every coarse level is entered through ``RESTRICT`` and ``ZERO`` (or the
    direct solve) before it is used, and corrections only read finished
    coarse approximations.
    """
    last = prog.depth - 1
    fresh = [False] * prog.depth
    active = [True] + [False] * last
    for pos, ins in enumerate(prog.instructions):
        lv = ins.level
        if not 0 <= lv <= last:
            raise ProgramError(f"instruction {pos} ({ins}) uses level {lv} outside 0..{last}")
        if ins.op == RESIDUAL:
            if not active[lv] or lv == last:
                raise ProgramError(f"instruction {pos}: residual on inactive level {lv}")
            fresh[lv] = True
        elif ins.op == SMOOTH:
            if not active[lv] or not fresh[lv] or lv == last:
                raise ProgramError(f"instruction {pos}: smoothing level {lv} without a current defect")
            fresh[lv] = False
        elif ins.op == RESTRICT:
            if not fresh[lv] or lv >= last:
                raise ProgramError(f"instruction {pos}: restriction from level {lv} without a defect")
            if lv + 1 < last and active[lv + 1]:
                raise ProgramError(f"instruction {pos}: level {lv + 1} is still in use")
            active[lv + 1] = lv + 1 == last
            fresh[lv + 1] = False
        elif ins.op == ZERO:
            if lv == 0 or lv == last:
                raise ProgramError(f"instruction {pos}: ZERO on level {lv}")
            active[lv] = True
        elif ins.op == SOLVE:
            if lv != last or not active[lv]:
                raise ProgramError(f"instruction {pos}: solve outside the coarsest level")
        elif ins.op == CORRECT:
            if lv >= last or not active[lv + 1] or not active[lv]:
                raise ProgramError(f"instruction {pos}: correction of level {lv} from inactive level")
            active[lv + 1] = False
            fresh[lv + 1] = False
            fresh[lv] = False
        else:
            raise ProgramError(f"unknown opcode {ins.op!r}")
    if any(active[1:]):
        raise ProgramError("program ends with an unfinished coarse-grid correction")


class _Emitter:
    def __init__(self, tree: DerivationTree):
        self.table = tree.grammar().productions
        self.last = tree.depth - 1
        self.out: list[Instruction] = []

    def value(self, node: Node):
        return self.table[node.var][node.prod].value

    def name(self, node: Node) -> str:
        return self.table[node.var][node.prod].name

    def state(self, node: Node, level: int) -> None:
        # s_l: leaves the state of level ``level`` in u_l.
        kind = self.name(node)
        if kind == "init":
            return
        if kind == "smooth":
            w, part, split, defect = node.children
            self.defect(defect, level)
            self.out.append(Instruction(SMOOTH, level, self.value(w), self.value(split),
                                        self.value(part) is not None))
        elif kind == "cgc":
            w, sub = node.children
            self.state(sub, level + 1)
            self.out.append(Instruction(CORRECT, level, self.value(w)))
        elif kind == "coarse":
            w, solved = node.children
            self.defect(solved, level + 1)
            self.out.append(Instruction(CORRECT, level, self.value(w)))
        else:
            raise ProgramError(f"unexpected production {kind!r} for {node.var}")

    def defect(self, node: Node, level: int) -> None:
        # c_l: leaves a defect in r_l (or, on the coarsest level, the solution in u_l).
        kind = self.name(node)
        (child,) = node.children
        if kind == "residual":
            self.state(child, level)
            self.out.append(Instruction(RESIDUAL, level))
        elif kind == "cocy":
            self.defect(child, level - 1)
            self.out.append(Instruction(RESTRICT, level - 1))
            self.out.append(Instruction(ZERO, level))
            self.out.append(Instruction(RESIDUAL, level))
        elif kind == "solve":
            self.defect(child, level - 1)
            self.out.append(Instruction(RESTRICT, level - 1))
            self.out.append(Instruction(SOLVE, level))
        else:
            raise ProgramError(f"unexpected production {kind!r} for {node.var}")


def evaluate_semantics(t: DerivationTree, l_max: Optional[int] = None) -> MultigridProgram:
    """Map a derivation tree to the instruction list it denotes.

    ``l_max`` (the absolute index of the finest level) defaults to the level of
    the instance the tree is bound to, if any.
    """
    validate(t)
    emitter = _Emitter(t)
    emitter.state(t.root.children[0], 0)
    if l_max is None and t.k is not None:
        l_max = round(math.log2(t.k / KH))
    return MultigridProgram(t.depth, tuple(emitter.out), l_max)


# -- reference cycles ----------------------------------------------------------

class _Start:
    """Marker for the beginning of a level's chain (entered by a restriction)."""

    def __init__(self, parent):
        self.parent = parent


class _TreeBuilder:
    """Build derivation trees from per-level event lists."""

    def __init__(self, depth: int, menu: ComponentMenu):
        self.depth = depth
        self.last = depth - 1
        self.menu = menu
        self.table = _production_table(depth, menu)

    def prod(self, var: str, name: str) -> int:
        for i, p in enumerate(self.table[var]):
            if p.name == name:
                return i
        raise KeyError(f"{var} has no production {name!r}")

    def omega(self, w: float) -> Node:
        try:
            idx = self.menu.relaxation.index(round(w, 2))
        except ValueError:
            raise ValueError(f"relaxation factor {w} is not in the menu") from None
        return Node("w", idx)

    def defect(self, state, level: int) -> Node:
        if isinstance(state, _Start):
            inner = self.defect(state.parent, level - 1)
            return Node(f"c{level}", self.prod(f"c{level}", "cocy"), (inner,))
        return Node(f"c{level}", self.prod(f"c{level}", "residual"), (state,))

    def chain(self, level: int, events, start) -> Node:
        """``events``: ``("smooth", w, block, red_black)`` or ``("cgc", w, sub_events)``."""
        state = start
        for ev in events:
            if ev[0] == "smooth":
                _, w, block, rb = ev
                part = Node("P", self.prod("P", "rb" if rb else "none"))
                split = Node(f"B{level}", self.menu.splittings.index(tuple(block)))
                state = Node(f"s{level}", self.prod(f"s{level}", "smooth"),
                             (self.omega(w), part, split, self.defect(state, level)))
            elif ev[0] == "cgc":
                _, w, sub = ev
                if level + 1 == self.last:
                    solved = Node(f"c{self.last}", 0, (self.defect(state, level),))
                    state = Node(f"s{level}", self.prod(f"s{level}", "coarse"),
                                 (self.omega(w), solved))
                else:
                    if not sub:
                        raise ValueError(f"empty event list on level {level + 1}")
                    inner = self.chain(level + 1, sub, _Start(state))
                    state = Node(f"s{level}", self.prod(f"s{level}", "cgc"),
                                 (self.omega(w), inner))
            else:
                raise ValueError(f"unknown event {ev[0]!r}")
        if isinstance(state, _Start):
            raise ValueError(f"level {level} chain has no operations")
        return state

    def tree(self, events, k: Optional[float] = None) -> DerivationTree:
        init = Node("s0", self.prod("s0", "init"))
        root = Node("S", 0, (self.chain(0, events, init),))
        return DerivationTree(root, self.depth, self.menu, k)


def _cycle_events(kind: str, level: int, last: int, nu1: int, nu2: int, omega: float,
                  block=(1, 1), red_black=True, cgc_omega: float = 1.0):
    sm = ("smooth", omega, block, red_black)
    if level + 1 == last:
        return [sm] * nu1 + [("cgc", cgc_omega, None)] + [sm] * nu2
    sub = lambda k: _cycle_events(k, level + 1, last, nu1, nu2, omega, block, red_black, cgc_omega)
    if kind == "V":
        coarse = sub("V")
    elif kind == "W":
        coarse = sub("W") + sub("W")
    elif kind == "F":
        coarse = sub("F") + sub("V")
    else:
        raise ValueError(f"unknown cycle type {kind!r}")
    return [sm] * nu1 + [("cgc", cgc_omega, coarse)] + [sm] * nu2


def reference_tree(kind: str, nu1: int, nu2: int, omega: float, depth: int = 5, *,
                   block=(1, 1), red_black: bool = True, menu: Optional[ComponentMenu] = None,
                   k: Optional[float] = None) -> DerivationTree:
    """Genotype of a textbook V/F/W(nu1, nu2) cycle with the given smoother."""
    if nu1 < 0 or nu2 < 0:
        raise ValueError("smoothing counts must be non-negative")
    builder = _TreeBuilder(depth, menu or ComponentMenu())
    events = _cycle_events(kind.upper(), 0, depth - 1, nu1, nu2, omega, block, red_black)
    return builder.tree(events, k)


def tree_from_events(events, depth: int = 5, menu: Optional[ComponentMenu] = None,
                     k: Optional[float] = None) -> DerivationTree:
    """Derivation tree from nested event lists (see :class:`_TreeBuilder`)."""
    return _TreeBuilder(depth, menu or ComponentMenu()).tree(events, k)


def build_reference_cycle(kind: str, nu1: int, nu2: int, omega: float,
                          depth: int = 5, l_max: Optional[int] = None) -> MultigridProgram:
    """V/F/W cycle with red-black Gauss-Seidel smoothing on every non-coarsest level."""
    return evaluate_semantics(reference_tree(kind, nu1, nu2, omega, depth), l_max)


# -- cost model ------------------------------------------------------------------

WEIGHTS = {RESIDUAL: 1.0, SMOOTH: 1.0, RESTRICT: 0.5, CORRECT: 0.5, SOLVE: 50.0, ZERO: 0.0}


def program_cost(prog: MultigridProgram, p: ProblemInstance | int) -> float:
    """Work units of one application: sum of per-point weights times level points.

    ``p`` is a problem instance or the absolute finest level index.
    """
    l_max = p if isinstance(p, int) else p.l_max
    total = 0.0
    for ins in prog.instructions:
        # restriction is charged on the coarse points it produces
        lv = ins.level + 1 if ins.op == RESTRICT else ins.level
        points = (2 ** (l_max - lv) + 1) ** 2
        w = WEIGHTS[ins.op]
        if ins.op == SMOOTH:
            w *= ins.block[0] * ins.block[1]
        total += w * points
    return total


# -- structure export ----------------------------------------------------------

def _smoother_label(ins: Instruction) -> str:
    if ins.block == (1, 1):
        return "rbgs" if ins.red_black else "jacobi"
    name = f"block-jacobi-{ins.block[0]}x{ins.block[1]}"
    return name + "-rb" if ins.red_black else name


def structure(prog: MultigridProgram) -> dict:
    """Level-visit graph: one node per visit (smoothing label, coarse solve or
    no-op) and one edge per level change; corrections carry their factor."""
    nodes = [{"id": 0, "level": 0, "op": "none", "omega": None}]
    edges = []
    cur = 0

    def new_node(level, op="none", omega=None, label=None):
        nonlocal cur
        nid = len(nodes)
        nodes.append({"id": nid, "level": level, "op": op, "omega": omega})
        edges.append({"from": cur, "to": nid, "omega": label})
        cur = nid

    for ins in prog.instructions:
        if ins.op == SMOOTH:
            if nodes[cur]["op"] == "none" and nodes[cur]["level"] == ins.level:
                nodes[cur]["op"] = _smoother_label(ins)
                nodes[cur]["omega"] = ins.omega
            else:
                new_node(ins.level, _smoother_label(ins), ins.omega)
        elif ins.op == RESTRICT:
            new_node(ins.level + 1)
        elif ins.op == SOLVE:
            nodes[cur]["op"] = "coarse-solve"
        elif ins.op == CORRECT:
            new_node(ins.level, label=ins.omega)
    return {"depth": prog.depth, "nodes": nodes, "edges": edges}


def structure_json(prog: MultigridProgram) -> str:
    return json.dumps(structure(prog), indent=1)


def render_structure(prog: MultigridProgram) -> str:
    """Text picture with one line per level (finest first), one column per node."""
    st = structure(prog)
    symbol = {"none": "o", "coarse-solve": "#"}
    cols = []
    for node in st["nodes"]:
        op = node["op"]
        if op in symbol:
            cols.append(symbol[op])
        else:
            tag = {"rbgs": "RB", "jacobi": "J"}.get(op, op.replace("block-jacobi-", "BJ"))
            cols.append(f"{tag}{node['omega']:.2f}")
    width = max(len(c) for c in cols)
    names = ["h"] + [f"{2 ** d}h" for d in range(1, prog.depth)]
    lines = []
    for lv in range(prog.depth):
        cells = [c.ljust(width) if n["level"] == lv else " " * width
                 for c, n in zip(cols, st["nodes"])]
        lines.append(f"{names[lv]:>4} | " + " ".join(cells).rstrip())
    corr = [f"{e['from']}->{e['to']}:{e['omega']:.2f}" for e in st["edges"] if e["omega"] is not None]
    if corr:
        lines.append("corrections: " + " ".join(corr))
    return "\n".join(lines)
