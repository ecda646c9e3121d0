"""Bit-width allocation as a multiple-choice knapsack ILP.

Each layer picks exactly one (weight-bit, activation-bit) combination. The
objective is the summed importance ``s_a[l][j] + alpha * s_w[l][i]`` of the
chosen combinations, minimized (routine) or maximized (reversed ablation),
subject to a total BitOps limit and/or a weight-size limit.

:func:`solve_exact` is a depth-first branch and bound. Complete policies are
ordered by the key ``(objective, total BitOps, per-layer (i, j) sequence)``;
the objective is an exactly rounded sum (``math.fsum``) so the order does not
depend on summation order. :func:`brute_force_oracle` enumerates every
assignment and applies the same key.
"""

from __future__ import annotations

import bisect
import hashlib
import itertools
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .costs import Budget, LayerCostStats
from .indicators import IndicatorReport, importance_table

MINIMIZE = "min"
MAXIMIZE = "max"


class Infeasible(Exception):
    """No assignment satisfies the budget."""

    def __init__(self, message: str, min_bitops: Optional[int] = None, min_size_bits: Optional[int] = None):
        super().__init__(message)
        self.min_bitops = min_bitops
        self.min_size_bits = min_size_bits


class InstanceTooLarge(ValueError):
    pass


@dataclass
class IlpInstance:
    layer_names: tuple
    bits: tuple
    importance: np.ndarray  # (L, n, n) float, [l, i, j] with i = weight-bit index
    bitops: np.ndarray  # (L, n, n) int64
    size_bits: np.ndarray  # (L, n) int64, depends on the weight bit only
    budget: Budget
    allowed: Optional[np.ndarray] = None  # (L, n, n) bool; None means every combo

    def __post_init__(self):
        self.layer_names = tuple(self.layer_names)
        self.bits = tuple(int(b) for b in self.bits)
        L, n = len(self.layer_names), len(self.bits)
        self.importance = np.asarray(self.importance, dtype=np.float64)
        self.bitops = np.asarray(self.bitops, dtype=np.int64)
        self.size_bits = np.asarray(self.size_bits, dtype=np.int64)
        if self.allowed is None:
            self.allowed = np.ones((L, n, n), dtype=bool)
        self.allowed = np.asarray(self.allowed, dtype=bool)
        for label, arr, shape in (("importance", self.importance, (L, n, n)),
                                  ("bitops", self.bitops, (L, n, n)),
                                  ("size_bits", self.size_bits, (L, n)),
                                  ("allowed", self.allowed, (L, n, n))):
            if arr.shape != shape:
                raise ValueError(f"{label} has shape {arr.shape}, expected {shape}")
        if not np.all(np.isfinite(self.importance)) or np.any(self.importance < 0):
            raise ValueError("importance values must be finite and non-negative")
        if np.any(self.bitops < 0) or np.any(self.size_bits < 0):
            raise ValueError("costs must be non-negative")
        if not self.allowed.reshape(L, -1).any(axis=1).all():
            raise ValueError("every layer needs at least one allowed combination")

    @property
    def num_layers(self) -> int:
        return len(self.layer_names)

    @property
    def num_options(self) -> int:
        return len(self.bits)

    @property
    def num_variables(self) -> int:
        return int(self.allowed.sum())

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(repr(self.layer_names).encode())
        h.update(repr(self.bits).encode())
        h.update(" ".join(float(x).hex() for x in self.importance.ravel()).encode())
        h.update(self.bitops.astype("<i8").tobytes())
        h.update(self.size_bits.astype("<i8").tobytes())
        h.update(repr((self.budget.bitops, self.budget.size_bits)).encode())
        h.update(self.allowed.tobytes())
        return h.hexdigest()


@dataclass
class Policy:
    layer_names: tuple
    choices: tuple  # per layer (weight-bit index, activation-bit index)
    bits: tuple  # per layer (b_w, b_a)
    objective: float
    total_bitops: int
    total_size_bits: int
    sense: str = MINIMIZE
    nodes: int = 0
    wall_time: float = field(default=0.0, compare=False)
    instance_digest: str = ""

    @property
    def weight_bits(self) -> list[int]:
        return [bw for bw, _ in self.bits]

    def check(self, inst: IlpInstance) -> None:
        """Raise if the policy is not a feasible one-hot solution of ``inst``."""
        if len(self.choices) != inst.num_layers:
            raise ValueError("policy does not cover every layer")
        objective, bo, sz = _evaluate(inst, self.choices)
        if (objective, bo, sz) != (self.objective, self.total_bitops, self.total_size_bits):
            raise ValueError("stored totals do not match the instance")
        for l, (i, j) in enumerate(self.choices):
            if not inst.allowed[l, i, j]:
                raise ValueError(f"layer {l}: combination ({i}, {j}) is not allowed")
        if inst.budget.bitops is not None and bo > inst.budget.bitops:
            raise ValueError("BitOps budget exceeded")
        if inst.budget.size_bits is not None and sz > inst.budget.size_bits:
            raise ValueError("size budget exceeded")

    def to_text(self) -> str:
        lines = [
            "# mpq-forge policy v1",
            f"sense = {self.sense}",
            f"objective = {self.objective!r}",
            f"total_bitops = {self.total_bitops}",
            f"total_size_bits = {self.total_size_bits}",
            f"nodes = {self.nodes}",
            f"instance_digest = {self.instance_digest}",
            "layer\tname\tw_index\ta_index\tb_w\tb_a",
        ]
        for l, (name, (i, j), (bw, ba)) in enumerate(zip(self.layer_names, self.choices, self.bits)):
            lines.append(f"{l}\t{name}\t{i}\t{j}\t{bw}\t{ba}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "Policy":
        meta, rows = {}, []
        in_table = False
        for ln in Path(path).read_text().splitlines():
            if not ln or ln.startswith("#"):
                continue
            if ln.startswith("layer\t"):
                in_table = True
            elif in_table:
                rows.append(ln.split("\t"))
            else:
                key, _, value = ln.partition(" = ")
                meta[key] = value
        return cls(
            layer_names=tuple(r[1] for r in rows),
            choices=tuple((int(r[2]), int(r[3])) for r in rows),
            bits=tuple((int(r[4]), int(r[5])) for r in rows),
            objective=float(meta["objective"]),
            total_bitops=int(meta["total_bitops"]),
            total_size_bits=int(meta["total_size_bits"]),
            sense=meta["sense"],
            nodes=int(meta["nodes"]),
            instance_digest=meta["instance_digest"],
        )


def uniform_policy(layer_names: Sequence[str], stats: Sequence[LayerCostStats], b_w: int, b_a: int,
                   overrides: Optional[dict] = None) -> Policy:
    """A fixed policy (no search). ``overrides`` maps layer index to a (b_w, b_a) pair."""
    bits = [(b_w, b_a)] * len(layer_names)
    for l, pair in (overrides or {}).items():
        bits[l] = tuple(pair)
    bo = sum(s.macs * bw * ba for s, (bw, ba) in zip(stats, bits))
    sz = sum(s.params * bw for s, (bw, _) in zip(stats, bits))
    return Policy(tuple(layer_names), tuple((-1, -1) for _ in bits), tuple(bits), 0.0, bo, sz, "fixed")


def build_instance(report: IndicatorReport, stats: Sequence[LayerCostStats], alpha: float,
                   budget: Budget, pinned: Optional[dict] = None) -> IlpInstance:
    """Assemble the ILP. ``pinned`` maps layer index to the only allowed (i, j)."""
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    names = tuple(s.name for s in stats)
    if tuple(report.layer_names) != names:
        raise ValueError(f"indicator layers {report.layer_names} do not match cost layers {names}")
    if min(min(r) for r in report.weight) < 0 or min(min(r) for r in report.act) < 0:
        raise ValueError("negative importance indicator (scale clamping failed upstream)")
    bits = np.array(report.bits, dtype=np.int64)
    L, n = len(names), len(bits)
    macs = np.array([s.macs for s in stats], dtype=np.int64)
    params = np.array([s.params for s in stats], dtype=np.int64)
    allowed = np.ones((L, n, n), dtype=bool)
    for l, (i, j) in (pinned or {}).items():
        allowed[l] = False
        allowed[l, i, j] = True
    return IlpInstance(
        layer_names=names,
        bits=tuple(report.bits),
        importance=importance_table(report, alpha),
        bitops=macs[:, None, None] * bits[None, :, None] * bits[None, None, :],
        size_bits=params[:, None] * bits[None, :],
        budget=budget,
        allowed=allowed,
    )


def _evaluate(inst: IlpInstance, choices):
    vals = [float(inst.importance[l, i, j]) for l, (i, j) in enumerate(choices)]
    bo = int(sum(int(inst.bitops[l, i, j]) for l, (i, j) in enumerate(choices)))
    sz = int(sum(int(inst.size_bits[l, i]) for l, (i, _) in enumerate(choices)))
    return math.fsum(vals), bo, sz


def _make_policy(inst: IlpInstance, choices, sense: str, nodes: int, wall: float) -> Policy:
    objective, bo, sz = _evaluate(inst, choices)
    return Policy(
        layer_names=inst.layer_names,
        choices=tuple((int(i), int(j)) for i, j in choices),
        bits=tuple((inst.bits[i], inst.bits[j]) for i, j in choices),
        objective=objective,
        total_bitops=bo,
        total_size_bits=sz,
        sense=sense,
        nodes=nodes,
        wall_time=wall,
        instance_digest=inst.digest(),
    )


# ---------------------------------------------------------------------------
# branch and bound
# ---------------------------------------------------------------------------

def _budgets(inst: IlpInstance) -> list[tuple[int, str]]:
    out = []
    if inst.budget.bitops is not None:
        out.append((int(inst.budget.bitops), "bitops"))
    if inst.budget.size_bits is not None:
        out.append((int(inst.budget.size_bits), "size"))
    return out


def _candidates(inst: IlpInstance, l: int, sign: float) -> list[tuple]:
    """Allowed combos of layer ``l`` as (w, bitops, size, i, j), dominated ones removed."""
    n = inst.num_options
    cands = [
        (sign * float(inst.importance[l, i, j]), int(inst.bitops[l, i, j]), int(inst.size_bits[l, i]), i, j)
        for i in range(n) for j in range(n) if inst.allowed[l, i, j]
    ]
    kept = []
    for c in cands:
        dominated = any(
            d[0] <= c[0] and d[1] <= c[1] and d[2] <= c[2]
            and (d[1] < c[1] or (d[1] == c[1] and (d[3], d[4]) < (c[3], c[4])))
            for d in cands if d is not c
        )
        if not dominated:
            kept.append(c)
    kept.sort()
    return kept


def _hull_segments(points: list[tuple[int, float]]) -> tuple[float, list[tuple[int, float]]]:
    """Start value and (d_cost, d_w) segments of the lower-left convex hull of (cost, w)."""
    points = sorted(points)
    frontier = [points[0]]
    for c, w in points[1:]:
        if w < frontier[-1][1] and c > frontier[-1][0]:
            frontier.append((c, w))
    hull: list[tuple[int, float]] = []
    for p in frontier:
        while len(hull) >= 2:
            (c1, w1), (c2, w2) = hull[-2], hull[-1]
            # drop hull[-1] if it lies on or above the chord hull[-2] -> p
            if (w2 - w1) * (p[0] - c1) >= (p[1] - w1) * (c2 - c1):
                hull.pop()
            else:
                break
        hull.append(p)
    segs = [(hull[k + 1][0] - hull[k][0], hull[k + 1][1] - hull[k][1]) for k in range(len(hull) - 1)]
    return hull[0][1], segs


class _LpBound:
    """LP relaxation of the remaining layers under a single budget."""

    def __init__(self, layer_points: list[list[tuple[int, float]]]):
        base = 0.0
        segs = []
        for pts in layer_points:
            start, s = _hull_segments(pts)
            base += start
            segs.extend(s)
        segs.sort(key=lambda s: s[1] / s[0])
        self.base = base
        self.slopes = [dw / dc for dc, dw in segs]
        self.cum_cost = list(itertools.accumulate(dc for dc, _ in segs))
        self.cum_gain = list(itertools.accumulate(dw for _, dw in segs))

    def __call__(self, slack: int) -> float:
        k = bisect.bisect_right(self.cum_cost, slack)
        gain = self.cum_gain[k - 1] if k else 0.0
        if k < len(self.cum_cost):
            used = self.cum_cost[k - 1] if k else 0
            gain += (slack - used) * self.slopes[k]
        return self.base + gain


def _solve(inst: IlpInstance, sense: str) -> Policy:
    start = time.perf_counter()
    sign = 1.0 if sense == MINIMIZE else -1.0
    L = inst.num_layers
    budgets = _budgets(inst)
    nb = len(budgets)
    cands = [_candidates(inst, l, sign) for l in range(L)]
    cost_of = [lambda c: c[1], lambda c: c[2]]
    cost_fns = [cost_of[0] if kind == "bitops" else cost_of[1] for _, kind in budgets]

    min_cost = [[min(f(c) for c in cands[l]) for l in range(L)] for f in cost_fns]
    for k, (limit, kind) in enumerate(budgets):
        need = sum(min_cost[k])
        if need > limit:
            raise Infeasible(
                f"{kind} budget {limit} is below the minimal achievable {need}",
                min_bitops=need if kind == "bitops" else None,
                min_size_bits=need if kind == "size" else None,
            )

    spread = []
    for l in range(L):
        s = 0.0
        for k, (limit, _) in enumerate(budgets):
            s += (max(cost_fns[k](c) for c in cands[l]) - min_cost[k][l]) / limit
        spread.append(s)
    order = sorted(range(L), key=lambda l: (-spread[l], l))

    # suffix data for depth d covers layers order[d:]
    suffix_min = [[sum(min_cost[k][l] for l in order[d:]) for d in range(L + 1)] for k in range(nb)]
    lp = [
        [_LpBound([[(cost_fns[k](c), c[0]) for c in cands[l]] for l in order[d:]]) for d in range(L + 1)]
        for k in range(nb)
    ]
    scale = sum(max(abs(c[0]) for c in cands[l]) for l in range(L))
    tol = 1e-9 * (1.0 + scale)

    costs = [[tuple(f(c) for f in cost_fns) for c in cands[l]] for l in range(L)]
    # single budget: cheapest-affordable lookup via (excess cost, running min w) tables
    afford_tables = None
    if nb == 1:
        afford_tables = []
        for l in range(L):
            pts = sorted((cs[0] - min_cost[0][l], c[0]) for c, cs in zip(cands[l], costs[l]))
            xs, ws, run = [], [], math.inf
            for x, w in pts:
                run = min(run, w)
                xs.append(x)
                ws.append(run)
            afford_tables.append((xs, ws))

    best_key = None
    best_choice = None
    chosen: list = [None] * L
    nodes = 0

    def affordable_bound(d: int, slacks: list[int]) -> float:
        total = 0.0
        if afford_tables is not None:
            slack = slacks[0]
            for l in order[d:]:
                xs, ws = afford_tables[l]
                total += ws[bisect.bisect_right(xs, slack) - 1]
            return total
        for l in order[d:]:
            for c, cs in zip(cands[l], costs[l]):
                if all(cs[k] - min_cost[k][l] <= slacks[k] for k in range(nb)):
                    total += c[0]
                    break
            else:
                return math.inf
        return total

    def leaf() -> None:
        nonlocal best_key, best_choice
        obj = math.fsum(c[0] for c in chosen)
        key = (obj, sum(c[1] for c in chosen), tuple((c[3], c[4]) for c in chosen))
        if best_key is None or key < best_key:
            best_key = key
            best_choice = list(chosen)

    def dfs(d: int, partial: float, remaining: list[int]) -> None:
        nonlocal nodes
        nodes += 1
        if d == L:
            leaf()
            return
        l = order[d]
        last = d + 1 == L
        children = []
        for c, cs in zip(cands[l], costs[l]):
            rem = [remaining[k] - cs[k] for k in range(nb)]
            slacks = [rem[k] - suffix_min[k][d + 1] for k in range(nb)]
            if min(slacks) < 0:
                continue
            p = partial + c[0]
            bound = p if last else p + max(lp[k][d + 1](slacks[k]) for k in range(nb))
            children.append((bound, len(children), c, p, rem, slacks))
        children.sort(key=lambda t: (t[0], t[1]))
        for bound, _, c, p, rem, slacks in children:
            if best_key is not None:
                incumbent = best_key[0] + tol
                if bound > incumbent:
                    break
                if not last and p + affordable_bound(d + 1, slacks) > incumbent:
                    continue
            chosen[l] = c
            dfs(d + 1, p, rem)
        chosen[l] = None

    dfs(0, 0.0, [limit for limit, _ in budgets])
    if best_choice is None:
        raise Infeasible("no assignment satisfies all budgets simultaneously")
    wall = time.perf_counter() - start
    return _make_policy(inst, [(c[3], c[4]) for c in best_choice], sense, nodes, wall)


def solve_exact(inst: IlpInstance) -> Policy:
    """Provably optimal minimum-importance policy."""
    return _solve(inst, MINIMIZE)


def solve_reversed(inst: IlpInstance) -> Policy:
    """Maximum-importance policy under the same constraints (ablation)."""
    return _solve(inst, MAXIMIZE)


# ---------------------------------------------------------------------------
# exhaustive oracle
# ---------------------------------------------------------------------------

def brute_force_oracle(inst: IlpInstance, sense: str = MINIMIZE, limit: int = 10 ** 7) -> Policy:
    """Enumerate every assignment. Vectorized; exact tie-breaking on near-best candidates."""
    start = time.perf_counter()
    L = inst.num_layers
    combos = [np.argwhere(inst.allowed[l]) for l in range(L)]
    count = math.prod(len(c) for c in combos)
    if count > limit:
        raise InstanceTooLarge(f"{count} assignments exceed the oracle limit {limit}")

    obj = np.zeros(1)
    bo = np.zeros(1, dtype=np.int64)
    sz = np.zeros(1, dtype=np.int64)
    for l, cl in enumerate(combos):
        i, j = cl[:, 0], cl[:, 1]
        obj = (obj[:, None] + inst.importance[l, i, j][None, :]).ravel()
        bo = (bo[:, None] + inst.bitops[l, i, j][None, :]).ravel()
        sz = (sz[:, None] + inst.size_bits[l, i][None, :]).ravel()
    feasible = np.ones(count, dtype=bool)
    if inst.budget.bitops is not None:
        feasible &= bo <= inst.budget.bitops
    if inst.budget.size_bits is not None:
        feasible &= sz <= inst.budget.size_bits
    if not feasible.any():
        raise Infeasible("no assignment satisfies the budget",
                         min_bitops=int(bo.min()), min_size_bits=int(sz.min()))

    tol = 1e-9 * (1.0 + float(np.abs(inst.importance).max()) * L)
    if sense == MINIMIZE:
        best = obj[feasible].min()
        near = np.flatnonzero(feasible & (obj <= best + tol))
    else:
        best = obj[feasible].max()
        near = np.flatnonzero(feasible & (obj >= best - tol))

    sign = 1.0 if sense == MINIMIZE else -1.0
    best_key, best_choice = None, None
    for flat in near:
        idx = np.unravel_index(flat, [len(c) for c in combos])
        choice = [tuple(int(x) for x in combos[l][k]) for l, k in enumerate(idx)]
        key = (
            math.fsum(sign * float(inst.importance[l, i, j]) for l, (i, j) in enumerate(choice)),
            int(bo[flat]),
            tuple(choice),
        )
        if best_key is None or key < best_key:
            best_key, best_choice = key, choice
    return _make_policy(inst, best_choice, sense, count, time.perf_counter() - start)
