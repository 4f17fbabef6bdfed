"""Precomputed per-pair score contributions and exhaustive constrained top-k.

Every task prediction is a bias plus one scalar contribution per (R-group,
synthon) pair, so a full scan over the product space is a handful of adds per
compound. Two scan variants are provided: a streaming bounded priority queue
and a chain-of-batches selection; they are required (and tested) to produce
identical results.

Reproducibility contract: contributions are stored as 4-byte floats and
accumulated in 8-byte floats in R-group declaration order, and ties are broken
by lower global index, so retrievals are total-ordered and bit-stable across
variants.
"""

from __future__ import annotations

import heapq
import time
from dataclasses import dataclass, field

import numpy as np

from .blobio import load_blob, save_blob
from .csl import CslLibrary, MultiIndex, decode_index, library_fingerprint, product_count
from .factorizer import HierarchyCache
from .surrogate import SurrogateModel

TABLE_VERSION = 1


class EngineError(RuntimeError):
    pass


@dataclass
class ContributionTable:
    values: np.ndarray        # float32, (n_tasks, n_pairs), pair-row order
    biases: np.ndarray        # float64, (n_tasks,)
    task_names: list[str]
    member_ids: np.ndarray    # synthon id per pair row
    rg_offsets: np.ndarray    # (n_rg+1,) pair-row offsets per positional R-group
    rg_ids: np.ndarray        # rgroup_id per positional R-group
    fingerprint: str          # library the table was built from

    _rg_pos: dict[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self._rg_pos = {int(r): i for i, r in enumerate(self.rg_ids)}

    @property
    def n_tasks(self) -> int:
        return len(self.task_names)

    @property
    def n_pairs(self) -> int:
        return self.values.shape[1]

    def task_index(self, name: str) -> int:
        try:
            return self.task_names.index(name)
        except ValueError:
            raise EngineError(f"unknown task {name!r}") from None

    def pair_row(self, library: CslLibrary, rgroup_id: int, synthon_id: int) -> int:
        j = self._rg_pos.get(rgroup_id)
        if j is None:
            raise EngineError(f"R-group {rgroup_id} not in table")
        return int(self.rg_offsets[j]) + library.synthon_digit(rgroup_id, synthon_id)

    def check_library(self, library: CslLibrary) -> None:
        if self.fingerprint != library_fingerprint(library):
            raise EngineError("library fingerprint does not match the contribution table")


def precompute_flops_per_task(n_pairs: int, d: int) -> int:
    # one dot product per pair: d multiplies + d-1 adds
    return 2 * n_pairs * d - n_pairs


def precompute_contributions(cache: HierarchyCache, surrogate: SurrogateModel) -> ContributionTable:
    """Dot each task head with every cached associative embedding."""
    values = (surrogate.head_w @ cache.u.T).astype(np.float32)
    rg_ids = np.asarray(sorted(cache.rg_pos, key=cache.rg_pos.get))
    return ContributionTable(
        values=values,
        biases=surrogate.head_b.astype(np.float64).copy(),
        task_names=list(surrogate.task_names),
        member_ids=cache.member_ids.copy(),
        rg_offsets=cache.rg_offsets.copy(),
        rg_ids=rg_ids,
        fingerprint=cache.fingerprint,
    )


def apex_score(table: ContributionTable, library: CslLibrary, chi: MultiIndex, task: str) -> float:
    """Sum of the assignment's contributions plus the task bias (c adds for c components)."""
    i = table.task_index(task)
    acc = 0.0
    for rgroup_id, synthon_id in chi.assignment:
        acc += float(table.values[i, table.pair_row(library, rgroup_id, synthon_id)])
    return acc + float(table.biases[i])


@dataclass(frozen=True)
class Constraint:
    task: str
    lower: float = float("-inf")
    upper: float = float("inf")

    def __post_init__(self):
        if not self.lower < self.upper:
            raise EngineError(f"constraint bounds must satisfy lower < upper: {self}")


@dataclass(frozen=True)
class QuerySpec:
    objective: str
    direction: str  # "maximize" or "minimize"
    constraints: tuple[Constraint, ...] = ()
    k: int = 10

    def __post_init__(self):
        if self.direction not in ("maximize", "minimize"):
            raise EngineError(f"direction must be maximize or minimize, got {self.direction!r}")
        if self.k < 0:
            raise EngineError("k must be >= 0")

    def validate_tasks(self, table: ContributionTable) -> None:
        table.task_index(self.objective)
        for c in self.constraints:
            table.task_index(c.task)


def violation(values, constraints: tuple[Constraint, ...]):
    """Non-positive hinge penalty; zero iff every value is inside its closed interval.

    `values` holds one predicted value per constraint, in constraint order.
    Accepts scalars or aligned arrays (for vectorized block scans).
    """
    c = 0.0
    for v, con in zip(values, constraints):
        c = c - np.maximum(0.0, con.lower - v)
        c = c - np.maximum(0.0, v - con.upper)
    return c


@dataclass
class ScoredCompound:
    global_index: int
    chi: MultiIndex
    objective: float        # raw value in the user's direction convention
    violation: float
    constraint_values: tuple[float, ...]


@dataclass
class TopKResult:
    entries: list[ScoredCompound]
    scanned: int
    retained: int
    discarded_for_violation: int
    timing: dict[str, float]


# ---------------------------------------------------------------------------
# block decomposition and vectorized block scoring
# ---------------------------------------------------------------------------

def iter_blocks(library: CslLibrary, start: int, end: int):
    """Yield (reaction positional index, first digit, block global start, lo, hi).

    Blocks are (reaction, first-R-group digit) slabs; lo/hi clip the block's
    flat range to [start, end).
    """
    for ti, rx in enumerate(library.reactions):
        r_off = library.reaction_offset(ti)
        r_size = library.reaction_size(ti)
        if r_off + r_size <= start or r_off >= end:
            continue
        n_first = len(rx.rgroups[0].synthon_ids)
        inner = r_size // n_first
        first_lo = max(0, (start - r_off) // inner) if start > r_off else 0
        first_hi = min(n_first, -(-(end - r_off) // inner))
        for j in range(int(first_lo), int(first_hi)):
            g0 = r_off + j * inner
            lo = max(start, g0) - g0
            hi = min(end, g0 + inner) - g0
            if lo < hi:
                yield ti, j, g0, int(lo), int(hi)


class _ReactionView:
    """Per-reaction float64 digit-contribution arrays for the needed tasks."""

    def __init__(self, table: ContributionTable, library: CslLibrary, reaction_id: int, tasks: list[str]):
        rx = library.reaction(reaction_id)
        self.per_task: list[list[np.ndarray]] = []
        for name in tasks:
            i = table.task_index(name)
            arrs = []
            for rg in rx.rgroups:
                j = table._rg_pos[rg.rgroup_id]
                lo, hi = int(table.rg_offsets[j]), int(table.rg_offsets[j + 1])
                if hi - lo != len(rg.synthon_ids):
                    raise EngineError(f"table rows for R-group {rg.rgroup_id} do not match library")
                arrs.append(table.values[i, lo:hi].astype(np.float64))
            self.per_task.append(arrs)
        self.biases = [float(table.biases[table.task_index(name)]) for name in tasks]

    def block_values(self, task_pos: int, first_digit: int) -> np.ndarray:
        """Flat float64 task values over one block, summed in R-group order."""
        arrs = self.per_task[task_pos]
        c = len(arrs)
        val = np.float64(arrs[0][first_digit])
        for j in range(1, c):
            shape = [1] * (c - 1)
            shape[j - 1] = len(arrs[j])
            val = val + arrs[j].reshape(shape)
        val = val + self.biases[task_pos]
        if c == 1:
            return np.atleast_1d(np.asarray(val))
        return np.ascontiguousarray(np.broadcast_to(val, [len(a) for a in arrs[1:]])).reshape(-1)


def _block_key_arrays(view: _ReactionView, query: QuerySpec, first_digit: int):
    """(violation, signed objective) arrays for one block."""
    obj = view.block_values(0, first_digit)
    s = obj if query.direction == "maximize" else -obj
    if query.constraints:
        cons_vals = [view.block_values(1 + i, first_digit) for i in range(len(query.constraints))]
        c = violation(cons_vals, query.constraints)
        c = np.broadcast_to(c, obj.shape) if np.ndim(c) == 0 else c
    else:
        c = np.zeros_like(obj)
    return c, s


def _result_from_selection(
    library: CslLibrary,
    table: ContributionTable,
    query: QuerySpec,
    kept: list[tuple[float, float, int]],  # (violation, signed objective, global index)
    scanned: int,
    timing: dict[str, float],
) -> TopKResult:
    kept_sorted = sorted(kept, key=lambda e: (-e[0], -e[1], e[2]))
    discarded = sum(1 for c, _, _ in kept_sorted if c < 0.0)
    entries = []
    for c, s, g in kept_sorted:
        if c < 0.0:
            continue
        chi = decode_index(library, g)
        cons_vals = tuple(apex_score(table, library, chi, con.task) for con in query.constraints)
        obj = s if query.direction == "maximize" else -s
        entries.append(ScoredCompound(g, chi, obj, c, cons_vals))
    return TopKResult(
        entries=entries,
        scanned=scanned,
        retained=len(entries),
        discarded_for_violation=discarded,
        timing=timing,
    )


def search_topk_stream(
    library: CslLibrary,
    table: ContributionTable,
    query: QuerySpec,
    index_range: tuple[int, int] | None = None,
) -> TopKResult:
    """Single pass over the index range, streaming into a bounded priority queue.

    The queue is keyed lexicographically on (violation, signed objective,
    -global index); predicted violators are kept during the scan and filtered
    at the end, so fewer than k entries may be returned.
    """
    table.check_library(library)
    query.validate_tasks(table)
    total = product_count(library)
    start, end = index_range if index_range is not None else (0, total)
    if not 0 <= start <= end <= total:
        raise EngineError(f"index range [{start}, {end}) invalid")
    t0 = time.perf_counter()
    tasks = [query.objective] + [c.task for c in query.constraints]
    views = {ti: _ReactionView(table, library, ti, tasks) for ti in range(len(library.reactions))}

    k = query.k
    heap: list[tuple[float, float, int]] = []  # (c, s, -g); root is the worst kept
    if k > 0:
        for ti, j, g0, lo, hi in iter_blocks(library, start, end):
            c_arr, s_arr = _block_key_arrays(views[ti], query, j)
            if lo > 0 or hi < len(c_arr):
                c_arr, s_arr = c_arr[lo:hi], s_arr[lo:hi]
            if len(heap) == k:
                tc, ts, tg = heap[0]
                mask = (c_arr > tc) | (
                    (c_arr == tc) & ((s_arr > ts) | ((s_arr == ts) & (np.arange(g0 + lo, g0 + hi) < -tg)))
                )
                cand = np.nonzero(mask)[0]
            else:
                cand = np.arange(len(c_arr))
            for i in cand:
                item = (float(c_arr[i]), float(s_arr[i]), -(g0 + lo + int(i)))
                if len(heap) < k:
                    heapq.heappush(heap, item)
                elif item > heap[0]:
                    heapq.heapreplace(heap, item)
    scan_time = time.perf_counter() - t0
    kept = [(c, s, -ng) for c, s, ng in heap]
    timing = {"scan_seconds": scan_time, "scanned": float(end - start)}
    if scan_time > 0:
        timing["products_per_second"] = (end - start) / scan_time
    return _result_from_selection(library, table, query, kept, end - start, timing)


def make_batches(library: CslLibrary, chunk_size: int, start: int = 0, end: int | None = None):
    """Group whole (reaction, first-digit) blocks into batches of <= chunk_size.

    A single block larger than chunk_size forms its own batch.
    """
    if end is None:
        end = product_count(library)
    batches: list[list[tuple[int, int, int, int, int]]] = []
    current: list[tuple[int, int, int, int, int]] = []
    current_size = 0
    for blk in iter_blocks(library, start, end):
        size = blk[4] - blk[3]
        if current and current_size + size > chunk_size:
            batches.append(current)
            current, current_size = [], 0
        current.append(blk)
        current_size += size
    if current:
        batches.append(current)
    return batches


@dataclass
class BatchTrace:
    batch_sizes: list[int]
    new_elements: list[int]      # per batch: selected entries that came from the batch
    carried_elements: list[int]  # per batch: selected entries carried from earlier batches


def search_topk_batched(
    library: CslLibrary,
    table: ContributionTable,
    query: QuerySpec,
    chunk_size: int,
    index_range: tuple[int, int] | None = None,
    trace: BatchTrace | None = None,
) -> TopKResult:
    """Chain-of-batches top-k: per batch, the running winners are prepended to
    the batch's score arrays before selection, and selected positions at or
    beyond the carry length are new elements from the batch."""
    table.check_library(library)
    query.validate_tasks(table)
    if chunk_size < 1:
        raise EngineError("chunk size must be >= 1")
    total = product_count(library)
    start, end = index_range if index_range is not None else (0, total)
    if not 0 <= start <= end <= total:
        raise EngineError(f"index range [{start}, {end}) invalid")
    t0 = time.perf_counter()
    tasks = [query.objective] + [c.task for c in query.constraints]
    views = {ti: _ReactionView(table, library, ti, tasks) for ti in range(len(library.reactions))}

    k = query.k
    carry_c = np.empty(0)
    carry_s = np.empty(0)
    carry_g = np.empty(0, dtype=np.int64)
    if k > 0:
        for batch in make_batches(library, chunk_size, start, end):
            cs, ss, gs = [carry_c], [carry_s], [carry_g]
            for ti, j, g0, lo, hi in batch:
                c_arr, s_arr = _block_key_arrays(views[ti], query, j)
                if lo > 0 or hi < len(c_arr):
                    c_arr, s_arr = c_arr[lo:hi], s_arr[lo:hi]
                cs.append(c_arr)
                ss.append(s_arr)
                gs.append(np.arange(g0 + lo, g0 + hi, dtype=np.int64))
            c_all = np.concatenate(cs)
            s_all = np.concatenate(ss)
            g_all = np.concatenate(gs)
            order = np.lexsort((g_all, -s_all, -c_all))
            sel = order[:k]
            if trace is not None:
                n_carry = len(carry_g)
                trace.batch_sizes.append(len(g_all) - n_carry)
                trace.new_elements.append(int(np.sum(sel >= n_carry)))
                trace.carried_elements.append(int(np.sum(sel < n_carry)))
            carry_c, carry_s, carry_g = c_all[sel], s_all[sel], g_all[sel]
    scan_time = time.perf_counter() - t0
    kept = [(float(c), float(s), int(g)) for c, s, g in zip(carry_c, carry_s, carry_g)]
    timing = {"scan_seconds": scan_time, "scanned": float(end - start)}
    if scan_time > 0:
        timing["products_per_second"] = (end - start) / scan_time
    return _result_from_selection(library, table, query, kept, end - start, timing)


def cost_estimate(library: CslLibrary, d: int, k: int) -> dict[str, int]:
    """Closed-form accounting, reported under both the no-sharing assumption
    (one pair row per synthon) and the actual per-(R-group, synthon) row count."""
    n_synthons = len(library.synthons)
    pairs_actual = sum(len(rg.synthon_ids) for rg in library.iter_rgroups())
    scoring_flops = 0
    for ti, rx in enumerate(library.reactions):
        # c contributions summed plus the bias: c adds per product
        scoring_flops += library.reaction_size(ti) * len(rx.rgroups)
    out = {
        "synthon_encoder_evals": n_synthons,
        "pair_rows_no_sharing": n_synthons,
        "pair_rows_actual": pairs_actual,
        "cache_bytes_no_sharing": n_synthons * d * 4,
        "cache_bytes_actual": pairs_actual * d * 4,
        "precompute_flops_per_task_no_sharing": precompute_flops_per_task(n_synthons, d) if n_synthons else 0,
        "precompute_flops_per_task_actual": precompute_flops_per_task(pairs_actual, d) if pairs_actual else 0,
        "scoring_flops_total": scoring_flops,
        "k": k,
    }
    return out


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_table(table: ContributionTable, path) -> None:
    meta = {
        "kind": "contribution_table",
        "version": TABLE_VERSION,
        "task_names": table.task_names,
        "fingerprint": table.fingerprint,
    }
    save_blob(
        path,
        meta,
        {
            "values": table.values,
            "biases": table.biases,
            "member_ids": table.member_ids,
            "rg_offsets": table.rg_offsets,
            "rg_ids": table.rg_ids,
        },
    )


def load_table(path) -> ContributionTable:
    meta, arrays = load_blob(path)
    if meta.get("kind") != "contribution_table" or meta.get("version") != TABLE_VERSION:
        raise EngineError(f"{path}: not a version-{TABLE_VERSION} contribution table")
    return ContributionTable(
        values=arrays["values"],
        biases=arrays["biases"],
        task_names=list(meta["task_names"]),
        member_ids=arrays["member_ids"],
        rg_offsets=arrays["rg_offsets"],
        rg_ids=arrays["rg_ids"],
        fingerprint=meta["fingerprint"],
    )


RESULT_HEADER_PREFIX = "rank\tglobal_index\treaction_id\tsynthon_ids\tobjective\tviolation"


def save_result(
    result: TopKResult,
    query: QuerySpec,
    path,
    library: CslLibrary | None = None,
) -> None:
    """Delimited text export; pass the library to add an assembled token column."""
    from .csl import assemble

    cols = RESULT_HEADER_PREFIX
    for con in query.constraints:
        cols += f"\t{con.task}"
    if library is not None:
        cols += "\tassembled"
    with open(path, "w") as fh:
        fh.write(cols + "\n")
        for rank, e in enumerate(result.entries):
            sids = ",".join(map(str, e.chi.synthon_ids()))
            row = f"{rank}\t{e.global_index}\t{e.chi.reaction_id}\t{sids}\t{e.objective!r}\t{e.violation!r}"
            for v in e.constraint_values:
                row += f"\t{v!r}"
            if library is not None:
                row += f"\t{assemble(library, e.chi)}"
            fh.write(row + "\n")
