"""Measure-space dynamic programming: exact path oracle and quantized solver.

Two solvers share the quantized kernels:

* :func:`exact_path_dp` -- backward induction over sparse path measures with
  control maps enumerated over observation histories (or observation cells in
  closed-loop mode).  Exponential; guarded by an explicit budget.  This is the
  desk-scale oracle.
* :func:`quantized_dp` -- the production recursion over a finite measure
  codebook.  The DP state is the current joint (x, y) marginal, represented
  by its codeword; one-step pushes are projected back onto the codebook.  For
  closed-loop controls the marginal flow is lossless, so with a codebook
  containing every reachable marginal the two solvers agree exactly.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .measures import DiscreteMeasure, PathMeasure, first_marginal
from .model import HiddenLaw

log = logging.getLogger(__name__)

ENUMERATE_AUTO_LIMIT = 4096
ENUMERATE_HARD_LIMIT = 10**6
DEFAULT_PATH_BUDGET = 1e9
MAX_CD_SWEEPS = 5


@dataclass
class ValueTable:
    """Per-time map from DP state key to (value, optimal control map)."""

    values: list = field(default_factory=list)  # one dict per time

    def value(self, n, key):
        return self.values[n][key][0]

    def control_map(self, n, key):
        return self.values[n][key][1]

    def to_json_dict(self):
        out = []
        for table in self.values:
            out.append(
                {
                    str(k): {
                        "value": float(v),
                        "control_map": None if a is None else [int(c) for c in a],
                    }
                    for k, (v, a) in table.items()
                }
            )
        return out


@dataclass
class QuantizedDPResult:
    value: float
    policy: list  # per time, array of control indices per observation cell
    table: ValueTable
    initial_codeword: int
    lossless_codebook: bool
    optimizer_mode: str
    optimizer_warnings: int = 0


# ---------------------------------------------------------------------------
# One-step operations on pair marginals
# ---------------------------------------------------------------------------


def push_marginal(m: DiscreteMeasure, model, grids, kernels, control_map, n: int) -> DiscreteMeasure:
    """Push a joint (x, y) marginal one step under a closed-loop control map.

    ``m'(k, l) = sum_{i,j} P^(a(j))(i -> k) h^(a(j))(j; k, l) m(i, j)`` with
    the hidden kernel evaluated at the hidden marginal of ``m`` itself.
    """
    contribs = _push_contributions(m, model, grids, kernels, n)
    control_map = np.asarray(control_map, dtype=int)
    out = np.zeros((grids.size, grids.size))
    for j, c in enumerate(control_map):
        out += contribs[j, c]
    return DiscreteMeasure(out, normalized=True)


def _push_contributions(m: DiscreteMeasure, model, grids, kernels, n: int) -> np.ndarray:
    """Per-(observation cell, control) contribution matrices of a push.

    The pushed marginal under map ``a`` is ``sum_j contribs[j, a(j)]``; this
    factorization is what both the enumeration and the coordinate-descent
    optimizers exploit.
    """
    w = m.weights
    n_grid = grids.size
    n_controls = len(model.control_set)
    law = HiddenLaw.from_measure(first_marginal(m), grids.hidden(n))
    contribs = np.empty((n_grid, n_controls, n_grid, n_grid))
    for c in range(n_controls):
        trans = kernels.hidden_matrix(n, c, law)  # (i, k)
        pushed_cols = trans.T @ w  # (k, j)
        for j in range(n_grid):
            obs = kernels.obs_table(n, j, c)  # (k, l)
            contribs[j, c] = pushed_cols[:, j][:, None] * obs
    return contribs


def cost_running(m: DiscreteMeasure, model, grids, control_map, n: int) -> float:
    """Expected stage cost of a pair marginal under a closed-loop map."""
    table = _cost_table(m, model, grids, n)
    control_map = np.asarray(control_map, dtype=int)
    return float(table[control_map, np.arange(table.shape[1])].sum())


def _cost_table(m: DiscreteMeasure, model, grids, n: int) -> np.ndarray:
    """cost[c, j] = stage cost mass of observation cell j under control c."""
    w = m.weights
    law = HiddenLaw.from_measure(first_marginal(m), grids.hidden(n))
    xs = grids.hidden(n).centers
    n_controls = len(model.control_set)
    table = np.empty((n_controls, w.shape[1]))
    for c, a in enumerate(model.control_set):
        per_x = np.asarray(model.running_cost(n, xs, law, a), dtype=float)
        table[c] = per_x @ w
    return table


def cost_terminal(m: DiscreteMeasure, model, grids) -> float:
    """Expected terminal cost of a pair marginal."""
    T = model.horizon
    law = HiddenLaw.from_measure(first_marginal(m), grids.hidden(T))
    per_x = np.asarray(model.terminal_cost(grids.hidden(T).centers, law), dtype=float)
    return float(per_x @ m.weights.sum(axis=1))


# ---------------------------------------------------------------------------
# Control-map optimization over one DP state
# ---------------------------------------------------------------------------


def _enumerate_maps(n_cells: int, n_controls: int):
    for combo in itertools.product(range(n_controls), repeat=n_cells):
        yield np.array(combo, dtype=int)


def optimize_control_map(
    m: DiscreteMeasure,
    model,
    grids,
    kernels,
    continuation,
    n: int,
    mode: str = "coordinate_descent",
):
    """Best closed-loop control map for one DP state.

    ``continuation`` maps a stack of pushed weight matrices (len, N, N) to
    continuation values.  Modes: ``enumerate`` (exact, guarded), ``constant``
    (best constant map) and ``coordinate_descent`` (cell-by-cell sweeps from
    the best constant map, at most five sweeps).  Returns
    ``(value, control_map, converged)``.
    """
    contribs = _push_contributions(m, model, grids, kernels, n)
    costs = _cost_table(m, model, grids, n)
    return _optimize_prepared(contribs, costs, continuation, mode)


def _optimize_prepared(contribs, costs, continuation, mode):
    n_cells, n_controls = costs.shape[1], costs.shape[0]
    if mode == "enumerate":
        total = n_controls**n_cells
        if total > ENUMERATE_HARD_LIMIT:
            raise ValueError(
                "enumerate mode would visit %d control maps (limit %d)"
                % (total, ENUMERATE_HARD_LIMIT)
            )
        return _optimize_enumerate(contribs, costs, continuation)
    if mode == "constant":
        value, amap, _ = _best_constant(contribs, costs, continuation)
        return value, amap, True
    if mode == "coordinate_descent":
        return _optimize_cd(contribs, costs, continuation)
    raise ValueError("unknown optimizer mode %r" % mode)


def _stage_cost_of_map(costs, amap):
    return float(costs[amap, np.arange(costs.shape[1])].sum())


def _optimize_enumerate(contribs, costs, continuation):
    n_cells, n_controls = costs.shape[1], costs.shape[0]
    best_value, best_map = np.inf, None
    # Batched evaluation keeps the continuation call count low.
    batch, maps = [], []
    for amap in _enumerate_maps(n_cells, n_controls):
        pushed = contribs[np.arange(n_cells), amap].sum(axis=0)
        batch.append(pushed)
        maps.append(amap)
    cont = continuation(np.stack(batch))
    for amap, cv in zip(maps, cont):
        value = _stage_cost_of_map(costs, amap) + float(cv)
        if value < best_value:
            best_value, best_map = value, amap
    return best_value, best_map, True


def _best_constant(contribs, costs, continuation):
    n_cells, n_controls = costs.shape[1], costs.shape[0]
    pushes = np.stack(
        [contribs[np.arange(n_cells), c].sum(axis=0) for c in range(n_controls)]
    )
    cont = continuation(pushes)
    values = costs.sum(axis=1) + cont
    c = int(np.argmin(values))
    return float(values[c]), np.full(n_cells, c, dtype=int), None


def _optimize_cd(contribs, costs, continuation):
    n_cells, n_controls = costs.shape[1], costs.shape[0]
    best_value, amap, _ = _best_constant(contribs, costs, continuation)
    amap = amap.copy()
    base = contribs[np.arange(n_cells), amap].sum(axis=0)
    converged = False
    for _ in range(MAX_CD_SWEEPS):
        changed = False
        for j in range(n_cells):
            current = amap[j]
            candidates = base[None, :, :] - contribs[j, current][None, :, :] + contribs[j]
            cont = continuation(candidates)
            stage = np.array(
                [
                    _stage_cost_of_map(costs, _with(amap, j, c))
                    for c in range(n_controls)
                ]
            )
            values = stage + cont
            c_new = int(np.argmin(values))
            if values[c_new] < best_value - 1e-15 and c_new != current:
                base = base - contribs[j, current] + contribs[j, c_new]
                amap[j] = c_new
                best_value = float(values[c_new])
                changed = True
        if not changed:
            converged = True
            break
    return best_value, amap, converged


def _with(amap, j, c):
    out = amap.copy()
    out[j] = c
    return out


# ---------------------------------------------------------------------------
# Production quantized DP over a measure codebook
# ---------------------------------------------------------------------------


def quantized_dp(
    model,
    grids,
    kernels,
    codebook,
    initial: DiscreteMeasure,
    optimizer_mode: str = "auto",
) -> QuantizedDPResult:
    """Backward recursion over codewords with projected one-step pushes.

    ``W[T](l) = terminal cost of codeword l``; for n < T,
    ``W[n](l) = min over maps of stage cost + W[n+1](projection of push)``.
    The returned value is ``W[0]`` at the projection of the initial marginal,
    and the returned policy is the argmin map along the projected forward
    trajectory from it.
    """
    T = model.horizon
    n_controls = len(model.control_set)
    n_cells = grids.size
    if optimizer_mode == "auto":
        optimizer_mode = (
            "enumerate" if n_controls**n_cells <= ENUMERATE_AUTO_LIMIT else "coordinate_descent"
        )
    L = codebook.size
    values = np.empty((T + 1, L))
    argmaps = [[None] * L for _ in range(T)]
    for el in range(L):
        values[T, el] = cost_terminal(DiscreteMeasure(codebook.matrices[el]), model, grids)

    warnings = 0
    for n in range(T - 1, -1, -1):
        next_vals = values[n + 1]

        def continuation(stack):
            idx = codebook.project_indices(stack)
            return next_vals[idx]

        for el in range(L):
            m = DiscreteMeasure(codebook.matrices[el])
            contribs = _push_contributions(m, model, grids, kernels, n)
            costs = _cost_table(m, model, grids, n)
            value, amap, converged = _optimize_prepared(
                contribs, costs, continuation, optimizer_mode
            )
            if converged is False:
                warnings += 1
            values[n, el] = value
            argmaps[n][el] = amap

    table = ValueTable(values=[])
    for n in range(T):
        table.values.append(
            {el: (float(values[n, el]), argmaps[n][el]) for el in range(L)}
        )
    table.values.append({el: (float(values[T, el]), None) for el in range(L)})

    el0 = codebook.project_index(initial.weights)
    policy = []
    el = el0
    for n in range(T):
        amap = argmaps[n][el]
        policy.append(np.asarray(amap, dtype=int))
        pushed = push_marginal(
            DiscreteMeasure(codebook.matrices[el]), model, grids, kernels, amap, n
        )
        el = codebook.project_index(pushed.weights)

    if warnings:
        log.warning("quantized_dp: %d coordinate-descent optimizations hit the sweep cap", warnings)
    return QuantizedDPResult(
        value=float(values[0, el0]),
        policy=policy,
        table=table,
        initial_codeword=int(el0),
        lossless_codebook=bool(getattr(codebook, "lossless", False)),
        optimizer_mode=optimizer_mode,
        optimizer_warnings=warnings,
    )


def exact_path_measure(model, grids, kernels, initial: DiscreteMeasure, policy) -> PathMeasure:
    """Forward path law of the quantized chain under a closed-loop policy.

    Desk-scale oracle construction: every path gets the product of its
    transition weights; the mean-field argument at each step is the hidden
    marginal of the current path law.
    """
    n_grid = grids.size
    entries = {}
    for i, j in zip(*np.nonzero(initial.weights)):
        entries[((int(i), int(j)),)] = float(initial.weights[i, j])
    horizon = len(policy)
    for n in range(horizon):
        hidden_w = np.zeros(n_grid)
        for path, w in entries.items():
            hidden_w[path[n][0]] += w
        law = HiddenLaw(grids.hidden(n).centers, hidden_w)
        amap = np.asarray(policy[n], dtype=int)
        new_entries = {}
        for path, w in entries.items():
            i, j = path[-1]
            c = int(amap[j])
            row = kernels.hidden_row(n, i, c, law)
            tab = kernels.obs_table(n, j, c)
            for k in range(n_grid):
                if row[k] <= 0.0:
                    continue
                for el in range(n_grid):
                    p = row[k] * tab[k, el]
                    if p > 0.0:
                        child = path + ((k, el),)
                        new_entries[child] = new_entries.get(child, 0.0) + w * p
        entries = new_entries
    return PathMeasure(horizon, n_grid, n_grid, entries)


def evaluate_policy_on_marginals(model, grids, kernels, initial, policy) -> float:
    """Forward evaluation of a closed-loop policy through the marginal flow."""
    m = initial
    total = 0.0
    for n, amap in enumerate(policy):
        total += cost_running(m, model, grids, amap, n)
        m = push_marginal(m, model, grids, kernels, amap, n)
    return total + cost_terminal(m, model, grids)


# ---------------------------------------------------------------------------
# Exact oracle on path measures
# ---------------------------------------------------------------------------


@dataclass
class PathDPResult:
    value: float
    policy: dict  # (time, state key) -> {history or cell: control index}
    evaluations: int


class _PathState:
    """Flat path-measure representation used inside the oracle recursion."""

    __slots__ = ("paths", "weights", "key")

    def __init__(self, paths: np.ndarray, weights: np.ndarray):
        order = np.lexsort(paths.T[::-1])
        self.paths = paths[order]
        self.weights = weights[order]
        self.key = (
            self.paths.tobytes(),
            np.round(self.weights, 12).tobytes(),
        )


def path_dp_budget(n_grid: int, horizon: int, n_controls: int, closed_loop: bool) -> float:
    """Upper bound on the work of the exact oracle, used as a refusal guard."""
    state_size = float(n_grid ** (2 * (horizon + 1)))
    histories = 0.0
    for n in range(horizon):
        histories += n_grid if closed_loop else float(n_grid ** (n + 1))
    return state_size * float(n_controls) ** histories


def exact_path_dp(
    model,
    grids,
    kernels,
    initial: DiscreteMeasure,
    closed_loop: bool = False,
    budget: float = DEFAULT_PATH_BUDGET,
) -> PathDPResult:
    """Exact backward induction over path measures (desk-scale oracle).

    Control maps are enumerated over reachable observation histories
    (``closed_loop=False``, the general class) or over observation cells
    (``closed_loop=True``).  The mean-field argument of the hidden kernel is
    the unconditional hidden marginal of the current path measure.  Refuses
    instances whose estimated work exceeds ``budget``, naming the count.
    """
    T = model.horizon
    n_grid = grids.size
    n_controls = len(model.control_set)
    est = path_dp_budget(n_grid, T, n_controls, closed_loop)
    if est > budget:
        raise ValueError(
            "exact_path_dp refused: estimated work %.3g exceeds budget %.3g" % (est, budget)
        )

    pair_weights = initial.weights
    idx = np.argwhere(pair_weights > 0.0)
    paths = (idx[:, 0] * n_grid + idx[:, 1])[:, None].astype(np.int64)
    weights = pair_weights[idx[:, 0], idx[:, 1]]
    root = _PathState(paths, weights)

    memo = [{} for _ in range(T + 1)]
    policy = {}
    stats = {"evals": 0}

    def hidden_centers(n):
        return grids.hidden(n).centers

    def hidden_marginal_of(state: _PathState, n: int) -> HiddenLaw:
        xs = state.paths[:, n] // n_grid
        w = np.zeros(n_grid)
        np.add.at(w, xs, state.weights)
        return HiddenLaw(hidden_centers(n), w)

    def terminal_value(state: _PathState) -> float:
        law = hidden_marginal_of(state, T)
        xs = state.paths[:, T] // n_grid
        per_x = np.asarray(
            model.terminal_cost(hidden_centers(T), law), dtype=float
        )
        return float((per_x[xs] * state.weights).sum())

    def stage_keys(state: _PathState, n: int) -> np.ndarray:
        """Map-argument key per path: last obs cell or full obs history."""
        obs = state.paths[:, : n + 1] % n_grid
        if closed_loop:
            return obs[:, -1]
        # Encode histories as integers in base n_grid.
        key = np.zeros(state.paths.shape[0], dtype=np.int64)
        for t in range(n + 1):
            key = key * n_grid + obs[:, t]
        return key

    def value(state: _PathState, n: int) -> float:
        if n == T:
            return terminal_value(state)
        hit = memo[n].get(state.key)
        if hit is not None:
            return hit[0]
        law = hidden_marginal_of(state, n)
        xs_idx = state.paths[:, n] // n_grid
        keys = stage_keys(state, n)
        uniq_keys = np.unique(keys)
        # Transition tensor per control: (pair q, child pair q').
        trans = np.empty((n_controls, n_grid * n_grid, n_grid * n_grid))
        for c in range(n_controls):
            hidden_mat = kernels.hidden_matrix(n, c, law)  # (i, k)
            for j in range(n_grid):
                obs_tab = kernels.obs_table(n, j, c)  # (k, l)
                for i in range(n_grid):
                    trans[c, i * n_grid + j] = (
                        hidden_mat[i][:, None] * obs_tab
                    ).ravel()
        # Stage cost per (control, path).
        stage = np.empty((n_controls, state.paths.shape[0]))
        for c, a in enumerate(model.control_set):
            per_x = np.asarray(
                model.running_cost(n, hidden_centers(n), law, a), dtype=float
            )
            stage[c] = per_x[xs_idx] * state.weights
        best_value, best_assign = np.inf, None
        for combo in itertools.product(range(n_controls), repeat=uniq_keys.size):
            assign = dict(zip(uniq_keys.tolist(), combo))
            c_per_path = np.array([assign[k] for k in keys.tolist()])
            stats["evals"] += 1
            stage_cost = float(stage[c_per_path, np.arange(keys.size)].sum())
            child_paths, child_weights = _push_paths(
                state, c_per_path, trans, n_grid
            )
            child = _PathState(child_paths, child_weights)
            v = stage_cost + value(child, n + 1)
            if v < best_value:
                best_value, best_assign = v, assign
        memo[n][state.key] = (best_value, best_assign)
        policy[(n, state.key)] = best_assign
        return best_value

    val = value(root, 0)
    return PathDPResult(value=float(val), policy=policy, evaluations=stats["evals"])


def _push_paths(state: _PathState, c_per_path, trans, n_grid):
    last = state.paths[:, -1]
    rows = trans[c_per_path, last]  # (n_paths, N^2)
    child_w = state.weights[:, None] * rows
    keep = child_w > 0.0
    n_children = n_grid * n_grid
    reps = keep.sum(axis=1)
    parent_idx = np.repeat(np.arange(state.paths.shape[0]), reps)
    child_pair = np.tile(np.arange(n_children), state.paths.shape[0]).reshape(
        state.paths.shape[0], n_children
    )[keep]
    new_paths = np.concatenate(
        [state.paths[parent_idx], child_pair[:, None]], axis=1
    )
    return new_paths, child_w[keep]
