"""Exhaustive interleaving exploration of the credit protocol.

Drives ``consumer_step``/``producer_step`` over every schedule of a small
scope (P produces, C consumes) with state memoization, and reports any
violated safety or liveness property.
"""

from __future__ import annotations

import dataclasses
import random
from dataclasses import dataclass, field

from mksv.ikc.flow import CPc, PPc, PageCells, consumer_enabled, consumer_step, producer_step


@dataclass
class ExploreResult:
    states: int = 0
    terminal_states: int = 0
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def _key(cells: PageCells, cpc: CPc, cdone: int, ppc: PPc, pdone: int) -> tuple:
    return (dataclasses.astuple(cells), cpc, cdone, ppc, pdone)


def check_invariants(cells: PageCells) -> list[str]:
    bad = []
    if cells.credits < 0:
        bad.append(f"negative credits {cells.credits}")
    if cells.consumed > cells.produced:
        bad.append(f"consumed {cells.consumed} > produced {cells.produced}")
    if cells.wakes > cells.halt_transitions:
        bad.append(f"wakes {cells.wakes} > halt transitions {cells.halt_transitions}")
    return bad


def explore(produces: int, consumes: int) -> ExploreResult:
    """Enumerate all interleavings of ``produces`` producer and ``consumes``
    consumer operations (each operation restarts its machine from the top)."""
    result = ExploreResult()
    seen: set[tuple] = set()
    start = (PageCells(), CPc.TAKE if consumes else CPc.DONE, 0,
             PPc.ADD if produces else PPc.DONE, 0)
    stack = [start]
    while stack:
        cells, cpc, cdone, ppc, pdone = stack.pop()
        key = _key(cells, cpc, cdone, ppc, pdone)
        if key in seen:
            continue
        seen.add(key)
        result.states += 1
        for msg in check_invariants(cells):
            result.violations.append(f"{msg} at {key}")

        successors = []
        if consumer_enabled(cells, cpc):
            c = dataclasses.replace(cells)
            npc = consumer_step(c, cpc)
            ndone = cdone
            if npc is CPc.DONE:
                ndone += 1
                npc = CPc.TAKE if ndone < consumes else CPc.DONE
            successors.append((c, npc, ndone, ppc, pdone))
        if ppc is not PPc.DONE:
            c = dataclasses.replace(cells)
            npc = producer_step(c, ppc)
            ndone = pdone
            if npc is PPc.DONE:
                ndone += 1
                npc = PPc.ADD if ndone < produces else PPc.DONE
            successors.append((c, cpc, cdone, npc, ndone))

        if not successors:
            result.terminal_states += 1
            # every enabled move exhausted: the consumer either finished or
            # is legitimately starved of credits
            expected = min(produces, consumes)
            if cdone != expected:
                result.violations.append(
                    f"lost wake: {cdone}/{consumes} consumes done with "
                    f"{cells.credits} credits left at {key}")
            if cpc is CPc.WAIT and cells.credits > 0:
                result.violations.append(f"blocked with credits at {key}")
        stack.extend(successors)
    return result


@dataclass
class WalkResult:
    steps: int = 0
    produces: int = 0
    consumes: int = 0
    halts: int = 0
    wakes: int = 0
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def random_walk(operations: int, seed: int = 0, *, produce_bias: float = 0.5) -> WalkResult:
    """One random schedule of ``operations`` produce/consume operations (half each),
    checking the same invariants as ``explore`` after every step."""
    rng = random.Random(seed)
    produces = operations // 2
    consumes = operations - produces
    cells = PageCells()
    cpc, cdone = (CPc.TAKE if consumes else CPc.DONE), 0
    ppc, pdone = (PPc.ADD if produces else PPc.DONE), 0
    out = WalkResult()
    while True:
        can_c = consumer_enabled(cells, cpc)
        can_p = ppc is not PPc.DONE
        if not (can_c or can_p):
            break
        if can_c and (not can_p or rng.random() >= produce_bias):
            cpc = consumer_step(cells, cpc)
            if cpc is CPc.DONE:
                cdone += 1
                cpc = CPc.TAKE if cdone < consumes else CPc.DONE
        else:
            ppc = producer_step(cells, ppc)
            if ppc is PPc.DONE:
                pdone += 1
                ppc = PPc.ADD if pdone < produces else PPc.DONE
        out.steps += 1
        if cells.credits < 0 or cells.consumed > cells.produced \
                or cells.wakes > cells.halt_transitions:
            out.violations += check_invariants(cells)
            break
    if cdone != min(produces, consumes):
        out.violations.append(f"lost wake: {cdone} of {consumes} consumes completed")
    if cpc is CPc.WAIT and cells.credits > 0:
        out.violations.append("consumer blocked with credits available")
    out.produces, out.consumes = pdone, cdone
    out.halts, out.wakes = cells.halt_transitions, cells.wakes
    return out
