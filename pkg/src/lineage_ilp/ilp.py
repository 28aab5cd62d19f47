"""Tracking ILP: constraint system, exact solver, brute-force oracle, block-wise solving.

The exact solver is HiGHS (branch-and-cut) run with zero optimality gap.
Among equal-objective optima the lexicographically smallest assignment in
canonical indicator order is returned; see :func:`solve_linear`.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import highspy
import numpy as np
import scipy.sparse as sp

from .model import CandidateGraph, as_weights, objective_value

# Two objective values closer than TIE_TOL * max(1, |best|) count as a tie.
TIE_TOL = 1e-9
BRUTE_FORCE_MAX = 24

FAMILIES = {
    "a": "edge-node coupling",
    "b": "single parent link",
    "c": "binary branching",
    "d": "track start consistency",
    "e": "state exclusivity",
    "f": "parent/daughter linkage",
    "g": "division implies parent",
}


class SolverError(RuntimeError):
    pass


class SolverTimeout(SolverError):
    def __init__(self, message: str, report: "SolveReport | None" = None):
        super().__init__(message)
        self.report = report


class InstanceTooLarge(SolverError):
    pass


class StitchingError(SolverError):
    pass


@dataclass(frozen=True)
class ConstraintSystem:
    """Rows ``lower <= A @ y <= upper``; ``family``/``anchor`` name each row's origin.

    ``anchor`` is a node id for node-level rows and an edge position (canonical
    order) for edge-level rows.
    """

    A: sp.csr_matrix
    lower: np.ndarray
    upper: np.ndarray
    family: np.ndarray
    anchor: np.ndarray

    def __post_init__(self) -> None:
        m, n = self.A.shape
        if not (len(self.lower) == len(self.upper) == len(self.family) == len(self.anchor) == m):
            raise ValueError("constraint arrays disagree on the row count")

    @property
    def n_vars(self) -> int:
        return self.A.shape[1]

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    def relation(self, row: int) -> str:
        lo, hi = self.lower[row], self.upper[row]
        if lo == hi:
            return "="
        return "<=" if lo == -np.inf else ">="

    def rows(self) -> Iterator[tuple[list[tuple[int, float]], str, float]]:
        """Yield each row as ``(sparse coefficients, relation, bound)``."""
        A = self.A
        for r in range(self.n_rows):
            lo, hi = A.indptr[r], A.indptr[r + 1]
            coeffs = [(int(j), float(v)) for j, v in zip(A.indices[lo:hi], A.data[lo:hi])]
            rel = self.relation(r)
            bound = float(self.lower[r] if rel == ">=" else self.upper[r])
            yield coeffs, rel, bound

    def violated(self, y: Sequence[int]) -> np.ndarray:
        """Indices of rows that ``y`` violates."""
        ay = self.A @ np.asarray(y, dtype=float)
        return np.flatnonzero((ay < self.lower - 1e-9) | (ay > self.upper + 1e-9))

    def is_feasible(self, y: Sequence[int]) -> bool:
        y = np.asarray(y)
        return y.shape == (self.n_vars,) and bool(np.all((y == 0) | (y == 1))) and not len(self.violated(y))

    def describe(self, row: int) -> str:
        coeffs, rel, bound = self._row(row)
        lhs = " + ".join(f"{v:g}*y[{j}]" for j, v in coeffs)
        fam = str(self.family[row])
        return f"({fam}) {FAMILIES[fam]} @ {int(self.anchor[row])}: {lhs} {rel} {bound:g}"

    def _row(self, r: int):
        A = self.A
        lo, hi = A.indptr[r], A.indptr[r + 1]
        coeffs = [(int(j), float(v)) for j, v in zip(A.indices[lo:hi], A.data[lo:hi])]
        rel = self.relation(r)
        return coeffs, rel, float(self.lower[r] if rel == ">=" else self.upper[r])


class _RowBuilder:
    def __init__(self) -> None:
        self.rows: list[np.ndarray] = []
        self.cols: list[np.ndarray] = []
        self.vals: list[np.ndarray] = []
        self.lower: list[np.ndarray] = []
        self.upper: list[np.ndarray] = []
        self.family: list[np.ndarray] = []
        self.anchor: list[np.ndarray] = []
        self.count = 0

    def add(self, row_of_entry, cols, vals, n_rows, lower, upper, family, anchor) -> None:
        self.rows.append(np.asarray(row_of_entry, dtype=np.int64) + self.count)
        self.cols.append(np.asarray(cols, dtype=np.int64))
        self.vals.append(np.broadcast_to(np.asarray(vals, dtype=float), np.shape(cols)).copy())
        self.lower.append(np.broadcast_to(float(lower), (n_rows,)).copy())
        self.upper.append(np.broadcast_to(float(upper), (n_rows,)).copy())
        self.family.append(np.full(n_rows, family))
        self.anchor.append(np.asarray(anchor, dtype=np.int64).reshape(n_rows))
        self.count += n_rows

    def build(self, n_vars: int) -> ConstraintSystem:
        if not self.count:
            empty = np.zeros(0)
            return ConstraintSystem(
                sp.csr_matrix((0, n_vars)), empty, empty.copy(), np.zeros(0, dtype="<U1"),
                np.zeros(0, dtype=np.int64),
            )
        A = sp.csr_matrix(
            (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=(self.count, n_vars),
        )
        A.sum_duplicates()
        A.sort_indices()
        return ConstraintSystem(
            A,
            np.concatenate(self.lower),
            np.concatenate(self.upper),
            np.concatenate(self.family),
            np.concatenate(self.anchor),
        )


def build_constraints(graph: CandidateGraph) -> ConstraintSystem:
    """Feasibility constraints of a binary lineage forest with consistent cell states."""
    v, e = graph.n_nodes, graph.n_edges
    node = np.arange(v)
    track, parent, daughter, cont = v + node, 2 * v + node, 3 * v + node, 4 * v + node
    edge = 5 * v + np.arange(e)
    src, dst = graph.edge_src, graph.edge_dst
    ids = graph.node_ids
    edge_pos = np.arange(e)
    inf = np.inf
    rb = _RowBuilder()

    # (a) y_edge <= y_node for both endpoints
    r = np.arange(e)
    rb.add(np.r_[r, r], np.r_[edge, src], np.r_[np.ones(e), -np.ones(e)], e, -inf, 0, "a", edge_pos)
    rb.add(np.r_[r, r], np.r_[edge, dst], np.r_[np.ones(e), -np.ones(e)], e, -inf, 0, "a", edge_pos)

    # (b) at most one incoming link, (c) at most two outgoing
    for fam, ends, bound in (("b", dst, 1), ("c", src, 2)):
        owners = np.unique(ends)
        row_of = np.searchsorted(owners, ends)
        rb.add(row_of, edge, 1.0, len(owners), -inf, bound, fam, ids[owners])

    # (d) y_track >= y_node - sum(in), y_track <= y_node
    rb.add(
        np.r_[node, node, np.searchsorted(node, dst)],
        np.r_[track, node, edge],
        np.r_[np.ones(v), -np.ones(v), np.ones(e)],
        v, 0, inf, "d", ids,
    )
    rb.add(np.r_[node, node], np.r_[track, node], np.r_[np.ones(v), -np.ones(v)], v, -inf, 0, "d", ids)

    # (e) exactly one state on a selected node
    rb.add(
        np.r_[node, node, node, node],
        np.r_[parent, daughter, cont, node],
        np.r_[np.ones(3 * v), -np.ones(v)],
        v, 0, 0, "e", ids,
    )

    # (f) parent -> daughter across a selected edge, and back
    rb.add(
        np.r_[r, r, r], np.r_[parent[src], edge, daughter[dst]],
        np.r_[np.ones(2 * e), -np.ones(e)], e, -inf, 1, "f", edge_pos,
    )
    rb.add(
        np.r_[r, r, r], np.r_[daughter[dst], edge, parent[src]],
        np.r_[np.ones(2 * e), -np.ones(e)], e, -inf, 1, "f", edge_pos,
    )

    # (g) two outgoing links force the parent label
    owners, outdeg = np.unique(src, return_counts=True)
    owners = owners[outdeg >= 2]
    mask = np.isin(src, owners)
    row_of = np.searchsorted(owners, src[mask])
    k = len(owners)
    rb.add(
        np.r_[row_of, np.arange(k)], np.r_[edge[mask], parent[owners]],
        np.r_[np.ones(mask.sum()), -np.ones(k)], k, -inf, 1, "g", ids[owners],
    )
    return rb.build(graph.n_indicators)


# --------------------------------------------------------------------------
# Solving


@dataclass
class SolveReport:
    y: np.ndarray
    objective: float
    status: str
    n_nodes: int
    n_edges: int
    wall_time: float = 0.0
    # block-wise runs only
    global_objective: float | None = None
    n_blocks: int = 1
    extra: dict = field(default_factory=dict)

    @property
    def gap(self) -> float | None:
        if self.global_objective is None:
            return None
        return self.objective - self.global_objective

    def to_dict(self) -> dict:
        """Machine-readable summary (wall time excluded so outputs stay reproducible)."""
        out = {
            "status": self.status,
            "objective": self.objective,
            "n_nodes": self.n_nodes,
            "n_edges": self.n_edges,
            "n_selected_nodes": int(self.y[: self.n_nodes].sum()),
            "n_selected_edges": int(self.y[5 * self.n_nodes:].sum()),
        }
        if self.global_objective is not None:
            out.update(
                n_blocks=self.n_blocks,
                global_objective=self.global_objective,
                gap=self.gap,
                gap_flagged=bool(self.gap > _tie_tol(self.global_objective)),
            )
        out.update(self.extra)
        return out


def _tie_tol(best: float) -> float:
    return TIE_TOL * max(1.0, abs(best))


class _Highs:
    """A binary program kept resident so bounds and costs can be changed between runs."""

    def __init__(self, cs: ConstraintSystem, lb: np.ndarray, ub: np.ndarray, time_limit: float | None):
        h = highspy.Highs()
        h.setOptionValue("output_flag", False)
        h.setOptionValue("mip_rel_gap", 0.0)
        h.setOptionValue("mip_abs_gap", 0.0)
        h.setOptionValue("mip_feasibility_tolerance", 1e-9)
        h.setOptionValue("primal_feasibility_tolerance", 1e-9)
        h.setOptionValue("random_seed", 0)
        h.setOptionValue("threads", 1)
        if time_limit is not None:
            h.setOptionValue("time_limit", float(time_limit))
        n = cs.n_vars
        self.n = n
        self.cols = np.arange(n, dtype=np.int32)
        h.addVars(n, lb.astype(float), ub.astype(float))
        if n:
            h.changeColsIntegrality(n, self.cols, np.full(n, highspy.HighsVarType.kInteger))
        A = cs.A
        if cs.n_rows:
            h.addRows(
                cs.n_rows,
                np.where(np.isinf(cs.lower), -highspy.kHighsInf, cs.lower),
                np.where(np.isinf(cs.upper), highspy.kHighsInf, cs.upper),
                A.nnz,
                A.indptr[:-1].astype(np.int32),
                A.indices.astype(np.int32),
                A.data.astype(float),
            )
        self.h = h

    def set_costs(self, c: np.ndarray) -> None:
        if self.n:
            self.h.changeColsCost(self.n, self.cols, np.asarray(c, dtype=float))

    def set_bounds(self, j: int, lo: float, hi: float) -> None:
        self.h.changeColBounds(int(j), float(lo), float(hi))

    def add_cap(self, c: np.ndarray, cap: float) -> None:
        nz = np.flatnonzero(c)
        self.h.addRow(-highspy.kHighsInf, float(cap), len(nz), nz.astype(np.int32), c[nz].astype(float))

    def run(self) -> np.ndarray | None:
        """Solve; return the rounded solution, ``None`` if infeasible."""
        if not self.n:
            return np.zeros(0, dtype=np.uint8)
        self.h.run()
        status = self.h.getModelStatus()
        if status == highspy.HighsModelStatus.kOptimal:
            x = np.asarray(self.h.getSolution().col_value)
            return np.rint(x).astype(np.uint8)
        if status == highspy.HighsModelStatus.kInfeasible:
            return None
        if status == highspy.HighsModelStatus.kTimeLimit:
            raise SolverTimeout("time limit reached")
        raise SolverError(f"HiGHS returned status {self.h.modelStatusToString(status)}")


def _lexicographic_refine(
    hs: _Highs, c: np.ndarray, y: np.ndarray, cs: ConstraintSystem,
    fixed_lo: np.ndarray, fixed_hi: np.ndarray,
) -> np.ndarray:
    """Lexicographically smallest assignment among those within the tie tolerance of ``y``.

    Greedy over indicators in order: keep 0 where some tied optimum allows
    it, otherwise 1. Blocks of indicators that are 1 in every tied optimum
    are confirmed with a single solve (minimise their sum), found by
    bisection when only a prefix is forced.
    """
    n = len(y)
    best = float(c @ y)
    cap = best + _tie_tol(best)
    hs.add_cap(c, cap)
    lo, hi = fixed_lo.astype(float).copy(), fixed_hi.astype(float).copy()
    free = lo != hi

    def ok(x: np.ndarray | None) -> bool:
        return x is not None and float(c @ x) <= cap and cs.is_feasible(x)

    def fix(j: int, val: int) -> None:
        lo[j] = hi[j] = val
        free[j] = False
        hs.set_bounds(j, val, val)

    def min_sum(idx: np.ndarray) -> np.ndarray | None:
        cost = np.zeros(n)
        cost[idx] = 1.0
        hs.set_costs(cost)
        return hs.run()

    i = 0
    while i < n:
        ones = np.flatnonzero((y[i:] == 1) & free[i:]) + i
        if not len(ones):
            break
        for j in range(i, ones[0]):
            if free[j]:
                fix(j, 0)
        i = int(ones[0])

        def forced(m: int) -> bool:
            x = min_sum(ones[:m])
            return x is not None and int(x[ones[:m]].sum()) == m

        if forced(len(ones)):
            break
        good, bad = 0, len(ones)
        while bad - good > 1:
            mid = (good + bad) // 2
            if forced(mid):
                good = mid
            else:
                bad = mid
        t = int(ones[good])
        for j in range(i, t):
            if free[j]:
                fix(j, int(y[j]))
        # can indicator t be 0 in some tied optimum?
        hs.set_bounds(t, 0, 0)
        x = min_sum(np.flatnonzero(free))
        if ok(x):
            y = x
            fix(t, 0)
        else:
            fix(t, 1)
        i = t + 1
    return y


def solve_linear(
    c: np.ndarray,
    cs: ConstraintSystem,
    *,
    fixed: Mapping[int, int] | None = None,
    lexicographic: bool = True,
    time_limit: float | None = None,
) -> np.ndarray:
    """Exact ``argmin c.y`` over the binary points of ``cs``.

    ``fixed`` pins indicators to given values. Raises :class:`SolverError`
    with status infeasible if no point satisfies the constraints.
    """
    c = np.asarray(c, dtype=float)
    if c.shape != (cs.n_vars,):
        raise ValueError(f"cost vector has shape {c.shape}, expected ({cs.n_vars},)")
    lb = np.zeros(cs.n_vars)
    ub = np.ones(cs.n_vars)
    for j, val in (fixed or {}).items():
        lb[j] = ub[j] = val
    hs = _Highs(cs, lb, ub, time_limit)
    hs.set_costs(c)
    y = hs.run()
    if y is None:
        raise SolverError("infeasible")
    if lexicographic and len(y):
        y = _lexicographic_refine(hs, c, y, cs, lb, ub)
    return y


def _report(graph: CandidateGraph, S, w, y, t0: float, status: str = "optimal") -> SolveReport:
    return SolveReport(
        y=y,
        objective=objective_value(S, w, y),
        status=status,
        n_nodes=graph.n_nodes,
        n_edges=graph.n_edges,
        wall_time=time.perf_counter() - t0,
    )


def _check_dims(graph: CandidateGraph, S, cs: ConstraintSystem) -> None:
    if S.shape[0] != graph.n_indicators or cs.n_vars != graph.n_indicators:
        raise ValueError(
            f"dimension mismatch: graph {graph.n_indicators} indicators, "
            f"S {S.shape}, constraints over {cs.n_vars}"
        )


def solve(
    graph: CandidateGraph,
    S,
    w: Sequence[float],
    constraints: ConstraintSystem,
    *,
    lexicographic: bool = True,
    time_limit: float | None = None,
) -> SolveReport:
    """Globally optimal feasible assignment for weights ``w``."""
    t0 = time.perf_counter()
    w = as_weights(w)
    _check_dims(graph, S, constraints)
    # the empty selection is always feasible
    assert constraints.is_feasible(np.zeros(graph.n_indicators, dtype=np.uint8))
    c = np.asarray(S @ w, dtype=float)
    try:
        y = solve_linear(c, constraints, lexicographic=lexicographic, time_limit=time_limit)
    except SolverTimeout as exc:
        exc.report = SolveReport(
            np.zeros(graph.n_indicators, dtype=np.uint8), 0.0, "timeout",
            graph.n_nodes, graph.n_edges, time.perf_counter() - t0,
        )
        raise
    return _report(graph, S, w, y, t0)


def brute_force_argmin(c: np.ndarray, cs: ConstraintSystem) -> np.ndarray:
    """Enumerate every binary vector; return the lexicographically first tied minimiser."""
    n = cs.n_vars
    if n > BRUTE_FORCE_MAX:
        raise InstanceTooLarge(f"{n} indicators exceed the brute-force bound of {BRUTE_FORCE_MAX}")
    c = np.asarray(c, dtype=float)
    if n == 0:
        return np.zeros(0, dtype=np.uint8)
    A = cs.A.toarray()
    n_lo = min(n, 16)
    n_hi = n - n_lo
    A_hi, A_lo = A[:, :n_hi], A[:, n_hi:]
    lower, upper = cs.lower - 1e-9, cs.upper + 1e-9
    only_lo = ~A_hi.any(axis=1)
    only_hi = ~A_lo.any(axis=1) & ~only_lo
    mixed = ~(only_lo | only_hi)
    # vector index j is bit (n-1-j) of the enumeration key, so increasing
    # keys walk the vectors in lexicographic order
    low = np.arange(2 ** n_lo, dtype=np.int64)
    y_lo = ((low[:, None] >> np.arange(n_lo - 1, -1, -1)) & 1).astype(float)
    act = y_lo @ A_lo[only_lo].T
    low = low[np.all((act >= lower[only_lo]) & (act <= upper[only_lo]), axis=1)]
    y_lo = y_lo[low]
    a_lo = y_lo @ A_lo[mixed].T
    c_lo = y_lo @ c[n_hi:]
    keys, vals = [], []
    for high in range(2 ** n_hi):
        y_hi = ((high >> np.arange(n_hi - 1, -1, -1)) & 1).astype(float)
        act_hi = A_hi @ y_hi
        if np.any((act_hi[only_hi] < lower[only_hi]) | (act_hi[only_hi] > upper[only_hi])):
            continue
        act = a_lo + act_hi[mixed]
        ok = np.all((act >= lower[mixed]) & (act <= upper[mixed]), axis=1)
        keys.append((high << n_lo) + low[ok])
        vals.append(c_lo[ok] + float(c[:n_hi] @ y_hi))
    keys = np.concatenate(keys)
    vals = np.concatenate(vals)
    best = vals.min()
    key = keys[np.flatnonzero(vals <= best + _tie_tol(best))].min()
    return ((key >> np.arange(n - 1, -1, -1)) & 1).astype(np.uint8)


def brute_force_solve(
    graph: CandidateGraph, S, w: Sequence[float], constraints: ConstraintSystem
) -> SolveReport:
    """Exhaustive oracle for :func:`solve` (at most 24 indicators)."""
    t0 = time.perf_counter()
    w = as_weights(w)
    _check_dims(graph, S, constraints)
    y = brute_force_argmin(np.asarray(S @ w, dtype=float), constraints)
    return _report(graph, S, w, y, t0)


# --------------------------------------------------------------------------
# Block-wise solving


def _block_windows(frames: np.ndarray, block_len: int, overlap: int) -> list[tuple[int, int]]:
    if frames.size == 0:
        return []
    first, last = int(frames.min()), int(frames.max())
    windows = []
    start = first
    while True:
        end = start + block_len  # exclusive
        windows.append((start, end))
        if end > last:
            return windows
        start = end - overlap


def solve_blockwise(
    graph: CandidateGraph,
    S,
    w: Sequence[float],
    constraints: ConstraintSystem,
    block_len: int,
    overlap: int,
    *,
    compare_global: bool = False,
    time_limit: float | None = None,
) -> SolveReport:
    """Solve consecutive temporal windows, freezing each overlap to the earlier block's choice.

    Indicators of frames after the current window are held at 0 while it is
    solved; indicators already decided by earlier windows are held at their
    values. With ``compare_global`` the report also carries the global
    optimum so the stitching gap can be inspected.
    """
    if not block_len > overlap >= 1:
        raise ValueError("need block_len > overlap >= 1")
    t0 = time.perf_counter()
    w = as_weights(w)
    _check_dims(graph, S, constraints)
    c = np.asarray(S @ w, dtype=float)
    node_frame = graph.frames
    # frame of each indicator; edges belong to their target's frame, sources to the one before
    ind_frame = np.concatenate([np.tile(node_frame, 5), node_frame[graph.edge_dst]])
    ind_first = np.concatenate([np.tile(node_frame, 5), node_frame[graph.edge_src]])

    decided = np.full(graph.n_indicators, -1, dtype=np.int8)
    windows = _block_windows(node_frame, block_len, overlap)
    for start, end in windows:
        inside = (ind_first >= start) & (ind_frame < end)
        fixed = {}
        for j in np.flatnonzero(decided >= 0):
            fixed[int(j)] = int(decided[j])
        for j in np.flatnonzero((decided < 0) & ~inside):
            fixed[int(j)] = 0
        y_block = solve_linear(c, constraints, fixed=fixed, time_limit=time_limit)
        new = inside & (decided < 0)
        decided[new] = y_block[new]
    y = np.where(decided < 0, 0, decided).astype(np.uint8)

    bad = constraints.violated(y)
    if len(bad):
        raise StitchingError("stitched assignment is infeasible: " + constraints.describe(int(bad[0])))
    report = _report(graph, S, w, y, t0)
    report.n_blocks = len(windows)
    if compare_global:
        report.global_objective = solve(graph, S, w, constraints, time_limit=time_limit).objective
        report.wall_time = time.perf_counter() - t0
    return report
