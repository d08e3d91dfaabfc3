import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from worldprobe.symreg import (
    OPERATORS,
    SENTINEL,
    ExprTree,
    FrontEntry,
    InvalidInputError,
    ParetoFront,
    SRConfig,
    UnboundVariableError,
    const,
    dominates,
    eval_expr,
    evolve,
    loglog_slope,
    pareto_scores,
    parse_expr,
    select_best,
    var,
    zero_shot,
)

FAST = SRConfig(population=200, generations=25, seed=0)


def test_operator_set():
    assert set(OPERATORS) == {"+", "-", "*", "/", "sin", "cos"}
    with pytest.raises(ValueError):
        ExprTree(("exp", var("x")))
    with pytest.raises(ValueError):
        ExprTree(("+", var("x")))


# ---------------------------------------------------------------- evaluation


def test_protected_division():
    ev = eval_expr(ExprTree(("/", var("x"), var("y"))), {"x": [1.0, 4.0], "y": [0.0, 2.0]})
    assert ev.values[0] == SENTINEL and ev.flags[0]
    assert ev.values[1] == 2.0 and not ev.flags[1]
    assert ev.any_flagged


def test_unbound_variable():
    with pytest.raises(UnboundVariableError):
        eval_expr(ExprTree(("+", var("x"), var("z"))), {"x": [1.0]})


def _oracle(node, row):
    tag = node[0]
    if tag == "c":
        return node[1]
    if tag == "v":
        return row[node[1]]
    args = [_oracle(ch, row) for ch in node[1:]]
    return {"+": lambda a, b: a + b, "-": lambda a, b: a - b, "*": lambda a, b: a * b,
            "/": lambda a, b: a / b, "sin": math.sin, "cos": math.cos}[tag](*args)


def test_depth_four_expression_against_scalar_oracle():
    expr = parse_expr("sin(x1 * (x2 - 0.5)) + cos(x1) / (x2 + 3.0) * (x1 - x2 * 1.5)")
    rng = np.random.default_rng(0)
    cols = {"x1": rng.uniform(-2, 2, 100), "x2": rng.uniform(0, 2, 100)}
    ev = eval_expr(expr, cols)
    expect = [_oracle(expr.root, {k: float(v[i]) for k, v in cols.items()}) for i in range(100)]
    np.testing.assert_allclose(ev.values, expect, rtol=1e-12, atol=1e-14)
    assert not ev.any_flagged


def test_matrix_inputs_with_names():
    ev = eval_expr(parse_expr("a * b"), np.array([[2.0, 3.0], [4.0, 5.0]]), names=["a", "b"])
    np.testing.assert_array_equal(ev.values, [6.0, 20.0])


@pytest.mark.parametrize("text", ["((x1 * x2) - -1.8)", "sin((r / 2.5))", "(m2 / (r * r))", "x1"])
def test_infix_round_trip(text):
    expr = parse_expr(text)
    assert parse_expr(expr.infix()) == expr


def test_unary_minus_folds_into_constant():
    assert parse_expr("x - -1.8").root == ("-", var("x"), const(-1.8))


# ---------------------------------------------------------------- search


def test_constant_target():
    x = np.linspace(0, 1, 50)
    front = evolve({"x": x}, np.full(50, 2.5), FAST)
    best = select_best(front)
    assert best.variables() == set()
    assert eval_expr(best, {"x": x}).values == pytest.approx(2.5)


def test_recovers_sum_exactly():
    rng = np.random.default_rng(1)
    X = rng.uniform(-1, 1, size=(200, 2))
    front = evolve(X, X[:, 0] + X[:, 1], FAST, names=["x1", "x2"])
    assert min(e.mse for e in front.entries) < 1e-10
    best = select_best(front)
    assert best.variables() == {"x1", "x2"}


def test_identity_target_returns_the_variable():
    x = np.random.default_rng(2).uniform(0.5, 2.0, 100)
    best = select_best(evolve({"x1": x}, x, FAST))
    assert best.infix() == "x1"


def test_search_is_deterministic():
    rng = np.random.default_rng(3)
    cols = {"r": rng.uniform(1, 2, 80)}
    y = 1 / cols["r"] ** 2
    a = evolve(cols, y, SRConfig(population=60, generations=5, seed=7))
    b = evolve(cols, y, SRConfig(population=60, generations=5, seed=7))
    assert a.to_json() == b.to_json()


def test_invalid_inputs():
    with pytest.raises(InvalidInputError):
        evolve({"x": []}, [], FAST)
    with pytest.raises(InvalidInputError):
        evolve({"x": [1.0, 2.0]}, [1.0], FAST)
    with pytest.raises(InvalidInputError):
        evolve({"x": [1.0]}, [np.nan], FAST)
    with pytest.raises(ValueError):
        SRConfig(population=0)


# ---------------------------------------------------------------- Pareto front


def _front(losses, complexities):
    return ParetoFront([FrontEntry(ExprTree(const(float(c))), l, c) for l, c in zip(losses, complexities)])


def test_select_best_prefers_big_drop_per_size():
    # scores: ln(1/.1)/2 = 1.1513 versus ln(.1/.09)/6 = 0.0176
    front = _front([1.0, 0.1, 0.09], [1, 3, 9])
    np.testing.assert_allclose(front.scores()[1:], [math.log(10) / 2, math.log(0.1 / 0.09) / 6])
    assert select_best(front).root == const(3.0)


def test_select_best_single_and_empty():
    assert select_best(_front([0.5], [4])).root == const(4.0)
    with pytest.raises(ValueError):
        select_best(ParetoFront([]))


def test_front_json_round_trip():
    front = ParetoFront([FrontEntry(parse_expr("m2 / (r * r)"), 1e-3, 5), FrontEntry(ExprTree(const(1.0)), 0.2, 1)],
                        ["r", "m2"])
    back = ParetoFront.from_json(front.to_json())
    assert [e.expr for e in back.entries] == [e.expr for e in front.entries]
    assert [e.complexity for e in back.entries] == [1, 5]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000))
def test_front_is_non_dominated_and_monotone(seed):
    rng = np.random.default_rng(seed)
    cols = {"x": rng.uniform(0.5, 2, 40), "y": rng.uniform(0.5, 2, 40)}
    target = cols["x"] * cols["y"] + rng.normal(0, 0.01, 40)
    front = evolve(cols, target, SRConfig(population=40, generations=3, seed=seed))
    es = front.entries
    assert all(es[i].complexity < es[i + 1].complexity and es[i].mse > es[i + 1].mse for i in range(len(es) - 1))
    assert not any(dominates(a, b) for a in es for b in es if a is not b)


@settings(max_examples=50, deadline=None)
@given(losses=st.lists(st.floats(1e-6, 10.0), min_size=2, max_size=6))
def test_scores_are_log_loss_slopes(losses):
    losses = sorted(losses, reverse=True)
    comps = list(range(1, 2 * len(losses), 2))
    scores = pareto_scores(losses, comps)
    assert scores[0] == 0.0
    assert all(s >= 0 for s in scores)


# ---------------------------------------------------------------- structure


def test_inverse_square_slope():
    expr = parse_expr("m2 / (r * r)")
    assert abs(loglog_slope(expr, "r", 0.5, 2.0, fixed={"m2": 1.0}) + 2.0) < 0.1
    assert loglog_slope(parse_expr("r"), "r", 0.5, 2.0) == pytest.approx(1.0)


def test_zero_shot_on_exact_law(toy_splits):
    rep = zero_shot(parse_expr("m2 / (r * r)"), toy_splits["ood"], "force_magnitude", window=4)
    assert all(r == pytest.approx(1.0, abs=1e-12) for r in rep.rho)
    assert rep.flagged_rows == 0
    assert rep.slope_r == pytest.approx(-2.0)
