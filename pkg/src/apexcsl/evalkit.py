"""Ground-truth evaluation: exhaustive oracle top-k, recall and satisfaction
metrics, score CDF export, and a Thompson sampling baseline."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .csl import CslLibrary, MultiIndex, decode_index, product_count
from .engine import (
    Constraint,
    ContributionTable,
    QuerySpec,
    TopKResult,
    iter_blocks,
    search_topk_stream,
    violation,
)
from .props import GroundTruthOracle, ground_truth, oracle_block_values

ORACLE_ENUMERATION_GUARD = 10**8


class EvalError(RuntimeError):
    pass


@dataclass
class OracleEntry:
    global_index: int
    chi: MultiIndex
    objective: float


@dataclass
class OracleTopK:
    """True top-j feasible set under exhaustive oracle evaluation, best first."""

    entries: list[OracleEntry]
    query: QuerySpec
    j: int

    def global_indices(self) -> set[int]:
        return {e.global_index for e in self.entries}


def oracle_topk(
    library: CslLibrary,
    oracle: GroundTruthOracle,
    query: QuerySpec,
    j: int,
    index_range: tuple[int, int] | None = None,
) -> OracleTopK:
    """Exhaustive scan of oracle values with the engine's tie-break (lower
    global index wins); only oracle-feasible compounds are eligible."""
    total = product_count(library)
    start, end = index_range if index_range is not None else (0, total)
    if end - start > ORACLE_ENUMERATION_GUARD:
        raise EvalError(
            f"range of {end - start} products exceeds the exhaustive-evaluation guard "
            f"({ORACLE_ENUMERATION_GUARD}); downsample the library first"
        )
    heap: list[tuple[float, int]] = []  # (signed objective, -g); root is the worst kept
    for ti, fd, g0, lo, hi in iter_blocks(library, start, end):
        obj = oracle_block_values(oracle, library, query.objective, ti, fd)[lo:hi]
        s = obj if query.direction == "maximize" else -obj
        if query.constraints:
            cons = [
                oracle_block_values(oracle, library, con.task, ti, fd)[lo:hi]
                for con in query.constraints
            ]
            feasible = np.asarray(violation(cons, query.constraints)) == 0.0
        else:
            feasible = np.ones(len(obj), dtype=bool)
        cand = np.nonzero(feasible)[0]
        for i in cand:
            item = (float(s[i]), -(g0 + lo + int(i)))
            if len(heap) < j:
                heapq.heappush(heap, item)
            elif item > heap[0]:
                heapq.heapreplace(heap, item)
    ordered = sorted(heap, key=lambda e: (-e[0], -e[1]))
    entries = []
    for s, ng in ordered:
        g = -ng
        obj = s if query.direction == "maximize" else -s
        entries.append(OracleEntry(g, decode_index(library, g), obj))
    return OracleTopK(entries=entries, query=query, j=j)


def recall_j_at_k(truth: OracleTopK, retrieved: TopKResult) -> float | None:
    """|truth ∩ retrieved| / |truth| over multi-index identity; None if truth is empty."""
    if not truth.entries:
        return None
    truth_idx = truth.global_indices()
    got = {e.global_index for e in retrieved.entries}
    return len(truth_idx & got) / len(truth_idx)


def satisfaction_rate(
    retrieved: TopKResult,
    oracle: GroundTruthOracle,
    library: CslLibrary,
    constraints: tuple[Constraint, ...],
    base_rate_sample: int = 10000,
    seed: int = 0,
) -> dict[str, float]:
    """Fraction of retrieved compounds whose *oracle* values satisfy all bounds,
    plus the library base rate estimated on a seeded uniform sample."""
    def satisfied(chi: MultiIndex) -> bool:
        vals = [ground_truth(oracle, library, chi, con.task) for con in constraints]
        return violation(vals, constraints) == 0.0

    if not constraints or not retrieved.entries:
        rate = 1.0  # no constraints to violate (or nothing retrieved)
    else:
        rate = sum(satisfied(e.chi) for e in retrieved.entries) / len(retrieved.entries)

    total = product_count(library)
    rng = np.random.default_rng(seed)
    n = min(base_rate_sample, total)
    if constraints and n > 0:
        gidxs = rng.choice(total, size=n, replace=False) if total <= 10**7 else rng.integers(0, total, size=n)
        base = sum(satisfied(decode_index(library, int(g))) for g in gidxs) / n
    else:
        base = 1.0
    return {"rate": rate, "base_rate": base}


def score_cdf_export(score_sets: dict[str, np.ndarray]) -> list[tuple[str, float, float]]:
    """(label, score, cumulative fraction) rows; monotone in score per label."""
    rows = []
    for label, scores in score_sets.items():
        scores = np.sort(np.asarray(scores, dtype=np.float64))
        if len(scores) == 0:
            raise EvalError(f"empty score set {label!r}")
        n = len(scores)
        for i, s in enumerate(scores):
            rows.append((label, float(s), (i + 1) / n))
    return rows


# ---------------------------------------------------------------------------
# Thompson sampling baseline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TsConfig:
    warmup: int = 3              # warmup evaluations per synthon
    iterations: int = 100
    prior_mean: float = 0.0
    prior_var: float = 1.0
    obs_var: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.warmup < 1 or self.iterations < 1:
            raise ValueError("warmup and iterations must be >= 1")


def default_warmup(n_components: int) -> int:
    """3 warmup steps for two-component reactions, 10 for three-component ones."""
    return 3 if n_components == 2 else 10


@dataclass
class TsResult:
    evaluated: list[tuple[int, float]]      # (global index, oracle objective value)
    best_trajectory: list[float]            # running best objective after each evaluation
    oracle_calls: int

    def evaluated_indices(self) -> set[int]:
        return {g for g, _ in self.evaluated}


class _CountingOracle:
    def __init__(self, oracle: GroundTruthOracle):
        self.oracle = oracle
        self.calls = 0

    def value(self, library: CslLibrary, chi: MultiIndex, task: str) -> float:
        self.calls += 1
        return ground_truth(self.oracle, library, chi, task)


def thompson_sampling(
    library: CslLibrary,
    oracle: GroundTruthOracle,
    objective: str,
    direction: str,
    config: TsConfig,
    reaction_id: int | None = None,
) -> TsResult:
    """Gaussian-arm Thompson sampling over one reaction's synthons.

    Independent normal arms per synthon with additive reward decomposition:
    every evaluated compound's (sign-adjusted) value updates the posteriors of
    all its constituent synthons. Warmup evaluates each synthon `warmup` times
    in uniformly random completions; each iteration assembles the per-R-group
    argmax of posterior samples. Total evaluations are exactly
    |S_reaction| * warmup + iterations.
    """
    if reaction_id is None:
        if len(library.reactions) != 1:
            raise EvalError("thompson_sampling needs a single reaction (or an explicit reaction_id)")
        reaction_id = 0
    rx = library.reaction(reaction_id)
    rng = np.random.default_rng(config.seed)
    counted = _CountingOracle(oracle)
    sign = 1.0 if direction == "maximize" else -1.0

    arms: dict[int, tuple[float, float]] = {}  # synthon -> (posterior mean, precision)
    prior_prec = 1.0 / config.prior_var
    obs_prec = 1.0 / config.obs_var
    for rg in rx.rgroups:
        for s in rg.synthon_ids:
            arms.setdefault(s, (config.prior_mean, prior_prec))

    evaluated: list[tuple[int, float]] = []
    best_traj: list[float] = []
    best = -np.inf

    def evaluate(assignment: tuple[tuple[int, int], ...]) -> None:
        nonlocal best
        chi = MultiIndex(reaction_id, assignment)
        value = counted.value(library, chi, objective)
        reward = sign * value
        from .csl import encode_index

        evaluated.append((encode_index(library, chi), value))
        best = max(best, reward)
        best_traj.append(sign * best)
        for _, s in assignment:
            mean, prec = arms[s]
            new_prec = prec + obs_prec
            arms[s] = ((mean * prec + reward * obs_prec) / new_prec, new_prec)

    # warmup: each synthon of each R-group, `warmup` times, random completions
    for focus_idx, rg in enumerate(rx.rgroups):
        for s in rg.synthon_ids:
            for _ in range(config.warmup):
                assignment = []
                for j, other in enumerate(rx.rgroups):
                    if j == focus_idx:
                        assignment.append((other.rgroup_id, s))
                    else:
                        pick = other.synthon_ids[int(rng.integers(0, len(other.synthon_ids)))]
                        assignment.append((other.rgroup_id, pick))
                evaluate(tuple(assignment))

    for _ in range(config.iterations):
        assignment = []
        for rg in rx.rgroups:
            samples = np.asarray(
                [
                    arms[s][0] + rng.standard_normal() / np.sqrt(arms[s][1])
                    for s in rg.synthon_ids
                ]
            )
            assignment.append((rg.rgroup_id, rg.synthon_ids[int(np.argmax(samples))]))
        evaluate(tuple(assignment))

    return TsResult(evaluated=evaluated, best_trajectory=best_traj, oracle_calls=counted.calls)


def reaction_synthon_count(library: CslLibrary, reaction_id: int) -> int:
    return sum(len(rg.synthon_ids) for rg in library.reaction(reaction_id).rgroups)


def compare_apex_vs_ts(
    library: CslLibrary,
    oracle: GroundTruthOracle,
    table: ContributionTable,
    objective: str,
    direction: str,
    budgets: tuple[int, ...] = (100, 1000, 10000),
    seeds: tuple[int, ...] = tuple(range(20)),
    j_values: tuple[int, ...] = (10, 100),
    n_reactions: int = 5,
) -> list[dict]:
    """Per (reaction, TS iteration budget, j): APEX recall at k = total TS
    evaluations vs the TS recall over its evaluated set, within the reaction."""
    order = sorted(
        range(len(library.reactions)),
        key=lambda t: (-library.reaction_size(t), t),
    )[:n_reactions]
    rows: list[dict] = []
    for t in order:
        rx = library.reaction(t)
        start = library.reaction_offset(t)
        end = start + library.reaction_size(t)
        w = default_warmup(len(rx.rgroups))
        n_syn = reaction_synthon_count(library, t)
        for iters in budgets:
            total_evals = n_syn * w + iters
            query = QuerySpec(objective=objective, direction=direction, k=total_evals)
            apex = search_topk_stream(library, table, query, index_range=(start, end))
            apex_idx = {e.global_index for e in apex.entries}
            ts_runs = [
                thompson_sampling(
                    library, oracle, objective, direction,
                    TsConfig(warmup=w, iterations=iters, seed=seed),
                    reaction_id=t,
                )
                for seed in seeds
            ]
            for j in j_values:
                truth = oracle_topk(
                    library, oracle, QuerySpec(objective=objective, direction=direction, k=j),
                    j, index_range=(start, end),
                )
                truth_idx = truth.global_indices()
                if not truth_idx:
                    continue
                apex_recall = len(truth_idx & apex_idx) / len(truth_idx)
                ts_recalls = [
                    len(truth_idx & run.evaluated_indices()) / len(truth_idx) for run in ts_runs
                ]
                rows.append(
                    {
                        "reaction_id": t,
                        "iterations": iters,
                        "total_evals": total_evals,
                        "j": j,
                        "apex_recall": apex_recall,
                        "ts_recalls": ts_recalls,
                        "ts_recall_median": float(np.median(ts_recalls)),
                        "seeds": list(seeds),
                    }
                )
    return rows
