import json

import numpy as np
import pytest

from conftest import DenseHierarchy, build_tree, dense_tree_operator, fig1_spec, probe_program
from mgevo.grammar import grow, make_grammar
from mgevo.problem import OperatorHierarchy, build_instance
from mgevo.semantics import (CORRECT, RESIDUAL, RESTRICT, SMOOTH, SOLVE, ZERO, Instruction,
                             MultigridProgram, ProgramError, build_reference_cycle,
                             evaluate_semantics, program_cost, reference_tree, render_structure,
                             structure, structure_json, tree_from_events)

K, SHIFT = 6.0, 0.5


@pytest.fixture(scope="module")
def small():
    return DenseHierarchy(3, 3, K, SHIFT), OperatorHierarchy.create(3, 3, K, SHIFT)


def assert_matches_oracle(tree, small):
    DH, H = small
    want = dense_tree_operator(tree, DH)
    got = probe_program(evaluate_semantics(tree), H)
    assert np.max(np.abs(got - want)) <= 1e-12 * max(1.0, np.max(np.abs(want)))


def test_fig1_program_matches_dense(small):
    g = make_grammar(depth=3)
    assert_matches_oracle(build_tree(g, fig1_spec()), small)


@pytest.mark.parametrize("seed", range(60))
def test_random_programs_match_dense(seed, small):
    g = make_grammar(depth=3)
    assert_matches_oracle(grow(g, 3, 16, rng=seed), small)


@pytest.mark.parametrize("kind,nu1,nu2", [("V", 1, 1), ("W", 2, 0), ("F", 0, 2)])
def test_reference_cycles_match_dense(kind, nu1, nu2, small):
    assert_matches_oracle(reference_tree(kind, nu1, nu2, 1.1, depth=3), small)


def test_fig1_structure():
    g = make_grammar(depth=3)
    prog = evaluate_semantics(build_tree(g, fig1_spec("0.7")))
    assert [ins.op for ins in prog.instructions] == [
        RESIDUAL, RESTRICT, ZERO, RESIDUAL, RESTRICT, SOLVE, CORRECT, RESIDUAL, SMOOTH, CORRECT]
    smooths = [ins for ins in prog.instructions if ins.op == SMOOTH]
    assert len(smooths) == 1
    assert smooths[0] == Instruction(SMOOTH, 1, 0.7, (1, 1), False)
    st = structure(prog)
    labelled = [n for n in st["nodes"] if n["op"] not in ("none", "coarse-solve")]
    assert [(n["level"], n["op"], n["omega"]) for n in labelled] == [(1, "jacobi", 0.7)]
    assert [n["level"] for n in st["nodes"] if n["op"] == "coarse-solve"] == [2]
    assert json.loads(structure_json(prog)) == st
    text = render_structure(prog)
    assert "J0.70" in text and "#" in text


@pytest.mark.parametrize("kind,solves", [("V", 1), ("F", 4), ("W", 8)])
def test_reference_cycle_shapes(kind, solves):
    prog = build_reference_cycle(kind, 2, 2, 1.0)
    assert prog.count(SOLVE) == solves
    if kind == "V":
        assert prog.count(SMOOTH) == 16
        assert {ins.level for ins in prog.instructions if ins.op == SMOOTH} == {0, 1, 2, 3}


def test_reference_cycle_rejects_bad_input():
    with pytest.raises(ValueError):
        reference_tree("X", 1, 1, 1.0)
    with pytest.raises(ValueError):
        reference_tree("V", -1, 1, 1.0)
    with pytest.raises(ValueError):
        reference_tree("V", 1, 1, 1.23)  # not on the omega grid


def test_v01_cost_by_hand():
    # per level l = 0..3: two residuals, one smoothing step, one correction
    # (3.5 N_l), restriction charged on N_{l+1} at 0.5, and the solve at 50.
    N = [(2 ** (7 - l) + 1) ** 2 for l in range(5)]
    want = 3.5 * sum(N[:4]) + 0.5 * sum(N[1:]) + 50 * N[4]
    assert want == 84746
    prog = build_reference_cycle("V", 0, 1, 1.25)
    assert program_cost(prog, build_instance(80)) == want
    assert program_cost(prog, 7) == want


def test_block_smoothing_cost_scales_with_block():
    point = tree_from_events([("smooth", 1.0, (1, 1), False), ("cgc", 1.0, [("cgc", 1.0, None)])],
                             depth=3)
    block = tree_from_events([("smooth", 1.0, (2, 3), False), ("cgc", 1.0, [("cgc", 1.0, None)])],
                             depth=3)
    a = program_cost(evaluate_semantics(point), 4)
    b = program_cost(evaluate_semantics(block), 4)
    assert b - a == 5 * 17 ** 2


def test_l_max_follows_binding():
    t = reference_tree("V", 1, 1, 1.0, k=160.0)
    assert evaluate_semantics(t).l_max == 8
    assert evaluate_semantics(t, l_max=5).l_max == 5


@pytest.mark.parametrize("instructions", [
    [Instruction(SMOOTH, 0)],
    [Instruction(RESIDUAL, 0), Instruction(RESTRICT, 0), Instruction(RESIDUAL, 1)],
    [Instruction(RESIDUAL, 0), Instruction(RESTRICT, 0), Instruction(ZERO, 1)],
    [Instruction(ZERO, 0)],
    [Instruction(SOLVE, 1)],
    [Instruction(CORRECT, 0)],
    [Instruction(RESIDUAL, 5)],
    [Instruction("JUMP", 0)],
    [Instruction(RESIDUAL, 0), Instruction(SMOOTH, 0), Instruction(SMOOTH, 0)],
])
def test_check_program_rejects(instructions):
    with pytest.raises(ProgramError):
        MultigridProgram(3, tuple(instructions))


def test_empty_program_costs_nothing():
    prog = MultigridProgram(3, ())
    assert len(prog) == 0 and program_cost(prog, 3) == 0


def test_v00_skeleton_cost_by_hand():
    # residual on 0, restrict 0..3 (charged coarse), residual 1..3 for the
    # coarse defects, solve on 4, corrections on 0..3
    N = [(2 ** (7 - l) + 1) ** 2 for l in range(5)]
    want = N[0] + sum(N[1:4]) + 0.5 * sum(N[1:5]) + 50 * N[4] + 0.5 * sum(N[:4])
    prog = build_reference_cycle("V", 0, 0, 1.0)
    assert prog.count(SMOOTH) == 0
    assert program_cost(prog, 7) == want


def test_cost_grows_with_smoothing_steps():
    costs = [program_cost(build_reference_cycle("V", nu, nu, 1.0), 7) for nu in range(4)]
    assert costs == sorted(costs) and len(set(costs)) == 4
