"""Genetic-programming symbolic regression with a complexity/loss Pareto front."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dynamics import DatasetSplit
from .probes import pearson
from .worldmodel import aligned_targets, make_windows

BINARY = ("+", "-", "*", "/")
UNARY = ("sin", "cos")
OPERATORS = BINARY + UNARY
PROTECT_EPS = 1e-9
SENTINEL = 1.0
PENALTY = 1e30


class InvalidInputError(ValueError):
    pass


class UnboundVariableError(NameError):
    pass


# Trees are nested tuples: ("c", value) | ("v", name) | (op, child) | (op, left, right).


def const(value: float):
    return ("c", float(value))


def var(name: str):
    return ("v", name)


def _size(node) -> int:
    if node[0] in ("c", "v"):
        return 1
    return 1 + sum(_size(ch) for ch in node[1:])


def _check(node):
    tag = node[0]
    if tag == "c":
        if not math.isfinite(node[1]):
            raise ValueError("constants must be finite")
    elif tag == "v":
        if not isinstance(node[1], str):
            raise ValueError("variable names must be strings")
    elif tag in BINARY:
        if len(node) != 3:
            raise ValueError(f"operator {tag!r} takes two arguments")
        _check(node[1])
        _check(node[2])
    elif tag in UNARY:
        if len(node) != 2:
            raise ValueError(f"operator {tag!r} takes one argument")
        _check(node[1])
    else:
        raise ValueError(f"unknown operator {tag!r}")


@dataclass(frozen=True)
class ExprTree:
    root: tuple

    def __post_init__(self):
        _check(self.root)

    @property
    def complexity(self) -> int:
        return _size(self.root)

    def variables(self) -> set[str]:
        out = set()

        def walk(n):
            if n[0] == "v":
                out.add(n[1])
            elif n[0] != "c":
                for ch in n[1:]:
                    walk(ch)

        walk(self.root)
        return out

    def infix(self) -> str:
        return _infix(self.root)

    def __str__(self) -> str:
        return self.infix()


def _infix(n) -> str:
    tag = n[0]
    if tag == "c":
        return repr(n[1])
    if tag == "v":
        return n[1]
    if tag in UNARY:
        return f"{tag}({_infix(n[1])})"
    return f"({_infix(n[1])} {tag} {_infix(n[2])})"


def parse_expr(text: str) -> ExprTree:
    """Parse the infix form produced by :meth:`ExprTree.infix` (plus plain precedence)."""
    import ast

    def conv(node):
        if isinstance(node, ast.Expression):
            return conv(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return const(node.value)
        if isinstance(node, ast.Name):
            return var(node.id)
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
            inner = conv(node.operand)
            if inner[0] == "c":
                return const(-inner[1])
            return ("-", const(0.0), inner)
        if isinstance(node, ast.BinOp):
            ops = {ast.Add: "+", ast.Sub: "-", ast.Mult: "*", ast.Div: "/"}
            op = ops.get(type(node.op))
            if op is None:
                raise ValueError(f"unsupported operator in {text!r}")
            return (op, conv(node.left), conv(node.right))
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in UNARY:
            if len(node.args) != 1:
                raise ValueError(f"{node.func.id} takes one argument")
            return (node.func.id, conv(node.args[0]))
        raise ValueError(f"cannot parse {text!r}")

    return ExprTree(conv(ast.parse(text, mode="eval")))


# --------------------------------------------------------------------------
# evaluation


@dataclass
class Evaluation:
    values: np.ndarray
    flags: np.ndarray  # True where a protected operation fired

    @property
    def any_flagged(self) -> bool:
        return bool(self.flags.any())


def _columns(inputs, names=None) -> tuple[dict[str, np.ndarray], int]:
    if isinstance(inputs, Mapping):
        cols = {k: np.asarray(v, dtype=np.float64).ravel() for k, v in inputs.items()}
    else:
        X = np.asarray(inputs, dtype=np.float64)
        if X.ndim != 2:
            raise InvalidInputError("feature matrix must be 2D")
        names = list(names) if names is not None else [f"x{i + 1}" for i in range(X.shape[1])]
        if len(names) != X.shape[1]:
            raise InvalidInputError("one name per column required")
        cols = {n: X[:, i] for i, n in enumerate(names)}
    lengths = {len(v) for v in cols.values()}
    if len(lengths) > 1:
        raise InvalidInputError("columns differ in length")
    return cols, (lengths.pop() if lengths else 0)


def _eval(node, cols, n, flags):
    tag = node[0]
    if tag == "c":
        return np.full(n, node[1])
    if tag == "v":
        try:
            return cols[node[1]]
        except KeyError:
            raise UnboundVariableError(f"variable {node[1]!r} is not bound to a column") from None
    a = _eval(node[1], cols, n, flags)
    if tag in UNARY:
        with np.errstate(invalid="ignore"):
            out = np.sin(a) if tag == "sin" else np.cos(a)
    else:
        b = _eval(node[2], cols, n, flags)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            if tag == "+":
                out = a + b
            elif tag == "-":
                out = a - b
            elif tag == "*":
                out = a * b
            else:
                bad = ~(np.abs(b) >= PROTECT_EPS)
                out = a / np.where(bad, 1.0, b)
                if bad.any():
                    out = np.where(bad, SENTINEL, out)
                    flags |= bad
    nonfinite = ~np.isfinite(out)
    if nonfinite.any():
        out = np.where(nonfinite, SENTINEL, out)
        flags |= nonfinite
    return out


def eval_expr(expr: ExprTree, inputs, names=None) -> Evaluation:
    """Evaluate ``expr`` row-wise. Protected operations yield a sentinel and set the row flag."""
    cols, n = _columns(inputs, names)
    flags = np.zeros(n, dtype=bool)
    values = _eval(expr.root, cols, n, flags)
    return Evaluation(np.array(values, dtype=np.float64, copy=True), flags)


# --------------------------------------------------------------------------
# Pareto front and selection


@dataclass
class FrontEntry:
    expr: ExprTree
    mse: float
    complexity: int


@dataclass
class ParetoFront:
    entries: list[FrontEntry]
    variables: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.entries = sorted(self.entries, key=lambda e: e.complexity)

    def __len__(self):
        return len(self.entries)

    def scores(self) -> list[float]:
        return pareto_scores([e.mse for e in self.entries], [e.complexity for e in self.entries])

    def to_json(self):
        return {
            "variables": self.variables,
            "entries": [{"expr": e.expr.infix(), "complexity": e.complexity, "mse": e.mse, "score": s}
                        for e, s in zip(self.entries, self.scores())],
        }

    @classmethod
    def from_json(cls, obj):
        return cls([FrontEntry(parse_expr(d["expr"]), float(d["mse"]), int(d["complexity"]))
                    for d in obj["entries"]], list(obj.get("variables", [])))


def dominates(a: FrontEntry, b: FrontEntry) -> bool:
    return (a.complexity <= b.complexity and a.mse <= b.mse
            and (a.complexity < b.complexity or a.mse < b.mse))


def pareto_scores(losses: Sequence[float], complexities: Sequence[int]) -> list[float]:
    tiny = np.finfo(float).tiny
    logs = [math.log(max(float(l), tiny)) for l in losses]
    scores = [0.0]
    for i in range(1, len(losses)):
        scores.append((logs[i - 1] - logs[i]) / (complexities[i] - complexities[i - 1]))
    return scores


def select_best(front: ParetoFront) -> ExprTree:
    """Entry with the largest drop in log-loss per unit of added complexity."""
    if not front.entries:
        raise ValueError("empty Pareto front")
    if len(front.entries) == 1:
        return front.entries[0].expr
    scores = front.scores()
    best = max(range(1, len(scores)), key=lambda i: (scores[i], -i))
    return front.entries[best].expr


def _front_from_best(best: dict[int, tuple[float, tuple]]) -> list[FrontEntry]:
    out, floor = [], math.inf
    for c in sorted(best):
        mse, root = best[c]
        if mse < floor:
            out.append(FrontEntry(ExprTree(root), mse, c))
            floor = mse
    return out


# --------------------------------------------------------------------------
# genetic programming


@dataclass(frozen=True)
class SRConfig:
    population: int = 512
    generations: int = 60
    max_complexity: int = 25
    tournament: int = 5
    seed: int = 0
    p_crossover: float = 0.5
    p_subtree: float = 0.2
    p_constant: float = 0.2
    init_depth: int = 4
    const_range: tuple[float, float] = (-2.0, 2.0)
    max_rows: int = 2000

    def __post_init__(self):
        for name in ("population", "generations", "max_complexity", "tournament", "init_depth", "max_rows"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.p_crossover + self.p_subtree + self.p_constant > 1.0:
            raise ValueError("variation probabilities exceed 1")


def _random_leaf(rng, names, cfg):
    if rng.random() < 0.5 or not names:
        return const(round(float(rng.uniform(*cfg.const_range)), 3))
    return var(names[int(rng.integers(len(names)))])


def _random_tree(rng, names, depth, full, cfg):
    if depth <= 1 or (not full and rng.random() < 0.3):
        return _random_leaf(rng, names, cfg)
    op = OPERATORS[int(rng.integers(len(OPERATORS)))]
    if op in UNARY:
        return (op, _random_tree(rng, names, depth - 1, full, cfg))
    return (op, _random_tree(rng, names, depth - 1, full, cfg), _random_tree(rng, names, depth - 1, full, cfg))


def _paths(node, prefix=()):
    yield prefix
    if node[0] not in ("c", "v"):
        for i, ch in enumerate(node[1:], start=1):
            yield from _paths(ch, prefix + (i,))


def _get(node, path):
    for i in path:
        node = node[i]
    return node


def _replace(node, path, new):
    if not path:
        return new
    i = path[0]
    return node[:i] + (_replace(node[i], path[1:], new),) + node[i + 1:]


def _fold(node):
    """Constant folding: collapse variable-free subtrees to a single constant."""
    if node[0] in ("c", "v"):
        return node
    kids = tuple(_fold(ch) for ch in node[1:])
    node = (node[0],) + kids
    if all(k[0] == "c" for k in kids):
        flags = np.zeros(1, dtype=bool)
        val = float(_eval(node, {}, 1, flags)[0])
        if not flags[0]:
            return const(val)
    return node


def _mse(root, cols, n, y) -> float:
    flags = np.zeros(n, dtype=bool)
    try:
        pred = _eval(root, cols, n, flags)
    except UnboundVariableError:
        return PENALTY
    if flags.any():
        return PENALTY
    with np.errstate(over="ignore", invalid="ignore"):
        err = float(np.mean((pred - y) ** 2))
    return err if math.isfinite(err) else PENALTY


def _vary(rng, parent, other, names, cfg):
    u = rng.random()
    if u < cfg.p_crossover:
        paths_a = list(_paths(parent))
        paths_b = list(_paths(other))
        pa = paths_a[int(rng.integers(len(paths_a)))]
        pb = paths_b[int(rng.integers(len(paths_b)))]
        return _replace(parent, pa, _get(other, pb))
    u -= cfg.p_crossover
    if u < cfg.p_subtree:
        paths = list(_paths(parent))
        p = paths[int(rng.integers(len(paths)))]
        return _replace(parent, p, _random_tree(rng, names, int(rng.integers(1, 4)), False, cfg))
    u -= cfg.p_subtree
    if u < cfg.p_constant:
        paths = [p for p in _paths(parent) if _get(parent, p)[0] == "c"]
        if not paths:
            return parent
        p = paths[int(rng.integers(len(paths)))]
        c = _get(parent, p)[1]
        factor = math.exp(rng.normal(0.0, 0.3))
        sign = -1.0 if rng.random() < 0.05 else 1.0
        new = c * factor * sign if c != 0.0 else float(rng.normal())
        return _replace(parent, p, const(new))
    return parent


def evolve(inputs, targets, config: SRConfig | None = None, names=None) -> ParetoFront:
    """Search expressions over the fixed operator set; return the complexity/MSE front."""
    cfg = config or SRConfig()
    cols, n = _columns(inputs, names)
    y = np.asarray(targets, dtype=np.float64).ravel()
    if n == 0 or len(y) == 0 or not cols:
        raise InvalidInputError("symbolic regression needs non-empty data")
    if len(y) != n:
        raise InvalidInputError("inputs and targets are not aligned")
    if not np.all(np.isfinite(y)):
        raise InvalidInputError("targets must be finite")
    var_names = list(cols)
    if n > cfg.max_rows:
        keep = np.sort(np.random.default_rng(cfg.seed).choice(n, cfg.max_rows, replace=False))
        cols = {k: v[keep] for k, v in cols.items()}
        y = y[keep]
        n = cfg.max_rows

    rng = np.random.default_rng(cfg.seed)
    pop = []
    for i in range(cfg.population):
        depth = 1 + i % cfg.init_depth
        root = _fold(_random_tree(rng, var_names, depth, i % 2 == 0, cfg))
        if _size(root) > cfg.max_complexity:
            root = _random_leaf(rng, var_names, cfg)
        pop.append(root)
    # seed the mean so a constant is always on the front
    pop[0] = const(float(np.mean(y)))
    fitness = [_mse(r, cols, n, y) for r in pop]

    best: dict[int, tuple[float, tuple]] = {}

    def record(root, mse):
        if mse >= PENALTY:
            return
        c = _size(root)
        if c not in best or mse < best[c][0]:
            best[c] = (mse, root)

    for r, f in zip(pop, fitness):
        record(r, f)

    for gen in range(cfg.generations):
        new_pop, new_fit = [], []
        # elites: current front members survive unchanged
        for entry in _front_from_best(best):
            if len(new_pop) < cfg.population // 10:
                new_pop.append(entry.expr.root)
                new_fit.append(entry.mse)
        fitness_arr = np.asarray(fitness)
        while len(new_pop) < cfg.population:
            child_rng = np.random.default_rng([cfg.seed, gen + 1, len(new_pop)])
            a = child_rng.integers(len(pop), size=cfg.tournament)
            b = child_rng.integers(len(pop), size=cfg.tournament)
            pa = pop[int(a[np.argmin(fitness_arr[a])])]
            pb = pop[int(b[np.argmin(fitness_arr[b])])]
            child = _fold(_vary(child_rng, pa, pb, var_names, cfg))
            if _size(child) > cfg.max_complexity:
                child = pa
            f = _mse(child, cols, n, y)
            new_pop.append(child)
            new_fit.append(f)
            record(child, f)
        pop, fitness = new_pop, new_fit

    return ParetoFront(_front_from_best(best), var_names)


# --------------------------------------------------------------------------
# structural checks and zero-shot validation


def loglog_slope(expr: ExprTree, variable: str, lo: float, hi: float,
                 fixed: Mapping[str, float] | None = None, n: int = 101) -> float:
    """Least-squares slope of ln|f| against ln(variable) on a log-spaced grid."""
    grid = np.geomspace(lo, hi, n)
    cols = {variable: grid}
    for k, v in (fixed or {}).items():
        if k != variable:
            cols[k] = np.full(n, float(v))
    ev = eval_expr(expr, cols)
    vals = np.abs(ev.values)
    ok = (vals > 0) & ~ev.flags
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(grid[ok]), np.log(vals[ok]), 1)[0])


LAW_FEATURES = ("r", "m1", "m2")


def law_features(split: DatasetSplit, window: int, names: Sequence[str] = LAW_FEATURES) -> dict[str, np.ndarray]:
    """Feature columns aligned with the next-step probe targets of ``split``."""
    w = make_windows(split, window)
    cols = {}
    for name in names:
        if name == "r":
            cols[name] = aligned_targets(split, w, "radius").reshape(-1)
        else:
            cols[name] = split.param_values(name)[w.traj].astype(np.float64)
    return cols


@dataclass
class LawReport:
    expr: str
    complexity: int
    slope_r: float
    rho: list[float]
    flagged_rows: int

    @property
    def rho_mean(self) -> float:
        return float(np.nanmean(self.rho)) if self.rho else float("nan")

    def to_json(self):
        return {"expr": self.expr, "complexity": self.complexity, "slope_r": self.slope_r,
                "rho": self.rho, "rho_mean": self.rho_mean, "flagged_rows": self.flagged_rows}


def zero_shot(expr: ExprTree, suite: Sequence[DatasetSplit], target: str, window: int,
              names: Sequence[str] = LAW_FEATURES, slope_range=(0.5, 2.0), fixed=None) -> LawReport:
    """Score a fixed law on every set of ``suite`` with no refitting."""
    rhos, flagged = [], 0
    for split in suite:
        cols = law_features(split, window, names)
        ev = eval_expr(expr, cols)
        flagged += int(ev.flags.sum())
        truth = aligned_targets(split, make_windows(split, window), target).reshape(len(ev.values), -1)
        truth = np.linalg.norm(truth, axis=1) if truth.shape[1] > 1 else truth[:, 0]
        rhos.append(pearson(ev.values, truth)[0])
    fixed = fixed if fixed is not None else {k: 1.0 for k in names}
    slope = loglog_slope(expr, "r", *slope_range, fixed=fixed)
    return LawReport(expr.infix(), expr.complexity, slope, rhos, flagged)
