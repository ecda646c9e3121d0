"""Search stage: indicator report + layer stats -> policy file.

Deliberately imports nothing that reads datasets; the search works from the
two text artifacts alone.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

from .allocator import Policy, build_instance, solve_exact, solve_reversed
from .costs import Budget, LayerCostStats, load_stats_file
from .indicators import IndicatorReport


def pinned_combos(exempt: Sequence[int], n: int) -> dict[int, tuple[int, int]]:
    """Exempt layers are held at the highest bit option for weights and activations."""
    return {int(l): (n - 1, n - 1) for l in exempt}


def level_budget(stats: Sequence[LayerCostStats], bits: Sequence[int], pinned: dict,
                 bitops_level: float = 0.0, size_level: float = 0.0) -> Budget:
    """Budget equal to running every searched layer at a uniform ``level``-bit setting.

    Pinned layers contribute their fixed cost. A level of 0 leaves that limit off.
    """
    def pinned_bits(l):
        i, j = pinned[l]
        return bits[i], bits[j]

    bitops = size = None
    if bitops_level:
        total = 0.0
        for s in stats:
            bw, ba = pinned_bits(s.layer) if s.layer in pinned else (bitops_level, bitops_level)
            total += s.macs * bw * ba
        bitops = int(round(total))
    if size_level:
        total = 0.0
        for s in stats:
            bw = pinned_bits(s.layer)[0] if s.layer in pinned else size_level
            total += s.params * bw
        size = int(round(total))
    return Budget(bitops=bitops, size_bits=size)


def resolve_budget(stats, bits, pinned, budget_bitops: int = 0, budget_size_bits: int = 0,
                   bitops_level: float = 0.0, size_level: float = 0.0) -> Budget:
    """Absolute limits win over level-style limits of the same kind."""
    level = None
    if bitops_level or size_level:
        level = level_budget(stats, bits, pinned, bitops_level, size_level)
    bitops = budget_bitops or (level.bitops if level else None)
    size = budget_size_bits or (level.size_bits if level else None)
    return Budget(bitops=bitops or None, size_bits=size or None)


def run_search(report: IndicatorReport, stats: Sequence[LayerCostStats], alpha: float, budget: Budget,
               reversed: bool = False, exempt: Sequence[int] = ()) -> Policy:
    inst = build_instance(report, stats, alpha, budget, pinned_combos(exempt, len(report.bits)))
    return solve_reversed(inst) if reversed else solve_exact(inst)


def search_files(indicators_path, stats_path, alpha: float, out_path=None, reversed: bool = False,
                 budget_bitops: int = 0, budget_size_bits: int = 0, bitops_level: float = 0.0,
                 size_level: float = 0.0, exempt: Optional[Sequence[int]] = None) -> Policy:
    """Search from artifacts on disk. ``exempt`` defaults to what the stats file records."""
    report = IndicatorReport.load(indicators_path)
    stats, recorded = load_stats_file(stats_path)
    exempt = recorded if exempt is None else exempt
    pinned = pinned_combos(exempt, len(report.bits))
    budget = resolve_budget(stats, report.bits, pinned, budget_bitops, budget_size_bits,
                            bitops_level, size_level)
    policy = run_search(report, stats, alpha, budget, reversed, exempt)
    if out_path is not None:
        policy.save(Path(out_path))
    return policy
