import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from apexcsl import csl, engine, props
from conftest import f32_round_latents, perfect_additive_table


@pytest.fixture(scope="module")
def exact_setup(small_library):
    oracle = f32_round_latents(props.make_additive_oracle(small_library, seed=9, task_names=["obj", "c1", "c2"]))
    table = perfect_additive_table(oracle, small_library, ["obj", "c1", "c2"])
    return small_library, oracle, table


def brute_force_topk(library, table, query):
    rows = []
    total = csl.product_count(library)
    for g, chi in enumerate(csl.enumerate_products(library, 0, total)):
        obj = engine.apex_score(table, library, chi, query.objective)
        s = obj if query.direction == "maximize" else -obj
        cons = [engine.apex_score(table, library, chi, c.task) for c in query.constraints]
        c = float(engine.violation(cons, query.constraints))
        rows.append((c, s, g))
    rows.sort(key=lambda e: (-e[0], -e[1], e[2]))
    top = rows[: query.k]
    return [(c, s, g) for c, s, g in top if c >= 0.0]


def result_keys(result, direction):
    sign = 1.0 if direction == "maximize" else -1.0
    return [(e.violation, sign * e.objective, e.global_index) for e in result.entries]


class TestApexScore:
    def test_matches_oracle_on_additive_tasks(self, exact_setup):
        library, oracle, table = exact_setup
        for g in range(0, csl.product_count(library), 3):
            chi = csl.decode_index(library, g)
            for task in ("obj", "c1"):
                assert engine.apex_score(table, library, chi, task) == props.ground_truth(
                    oracle, library, chi, task
                )

    def test_unknown_task(self, exact_setup):
        library, _, table = exact_setup
        with pytest.raises(engine.EngineError, match="unknown task"):
            engine.apex_score(table, library, csl.decode_index(library, 0), "nope")

    def test_fingerprint_mismatch(self, exact_setup, medium_library):
        _, _, table = exact_setup
        with pytest.raises(engine.EngineError, match="fingerprint"):
            table.check_library(medium_library)


class TestViolation:
    def test_inside_is_zero(self):
        cons = (engine.Constraint("a", 0.0, 10.0),)
        assert engine.violation([5.0], cons) == 0.0

    def test_boundary_is_zero(self):
        cons = (engine.Constraint("a", 0.0, 10.0),)
        assert engine.violation([0.0], cons) == 0.0
        assert engine.violation([10.0], cons) == 0.0

    def test_excess_is_negative_distance(self):
        cons = (engine.Constraint("a", 0.0, 10.0),)
        assert engine.violation([12.5], cons) == -2.5
        assert engine.violation([-4.0], cons) == -4.0

    def test_multiple_constraints_add(self):
        cons = (engine.Constraint("a", 0.0, 1.0), engine.Constraint("b", upper=0.0))
        assert engine.violation([2.0, 3.0], cons) == -4.0

    def test_vectorized_matches_scalar(self):
        cons = (engine.Constraint("a", -1.0, 1.0), engine.Constraint("b", 0.0, 2.0))
        a = np.array([-2.0, 0.0, 3.0])
        b = np.array([1.0, -1.0, 1.0])
        vec = engine.violation([a, b], cons)
        for i in range(3):
            assert vec[i] == engine.violation([a[i], b[i]], cons)

    @given(
        v=st.floats(-100, 100),
        lo=st.floats(-50, 49),
        width=st.floats(0.5, 50),
    )
    @settings(max_examples=200, deadline=None)
    def test_nonpositive_and_zero_iff_feasible(self, v, lo, width):
        cons = (engine.Constraint("a", lo, lo + width),)
        c = engine.violation([v], cons)
        assert c <= 0.0
        assert (c == 0.0) == (lo <= v <= lo + width)

    def test_bad_bounds_rejected(self):
        with pytest.raises(engine.EngineError, match="lower < upper"):
            engine.Constraint("a", 1.0, 1.0)


class TestQuerySpec:
    def test_bad_direction(self):
        with pytest.raises(engine.EngineError, match="direction"):
            engine.QuerySpec("obj", "up")

    def test_negative_k(self):
        with pytest.raises(engine.EngineError, match="k"):
            engine.QuerySpec("obj", "maximize", k=-1)

    def test_validate_unknown_constraint_task(self, exact_setup):
        _, _, table = exact_setup
        q = engine.QuerySpec("obj", "maximize", (engine.Constraint("nope"),))
        with pytest.raises(engine.EngineError, match="unknown task"):
            q.validate_tasks(table)


QUERIES = [
    engine.QuerySpec("obj", "maximize", (), k=10),
    engine.QuerySpec("obj", "minimize", (), k=7),
    engine.QuerySpec("obj", "maximize", (engine.Constraint("c1", upper=0.5),), k=10),
    engine.QuerySpec(
        "obj",
        "minimize",
        (engine.Constraint("c1", -0.5, 0.5), engine.Constraint("c2", lower=-1.0)),
        k=25,
    ),
]


class TestSearchAgreement:
    @pytest.mark.parametrize("qi", range(len(QUERIES)))
    def test_stream_matches_brute_force(self, exact_setup, qi):
        library, _, table = exact_setup
        q = QUERIES[qi]
        expected = brute_force_topk(library, table, q)
        got = engine.search_topk_stream(library, table, q)
        assert result_keys(got, q.direction) == expected

    @pytest.mark.parametrize("qi", range(len(QUERIES)))
    @pytest.mark.parametrize("chunk_size", [1, 7, 64, 10**6])
    def test_batched_matches_stream(self, exact_setup, qi, chunk_size):
        library, _, table = exact_setup
        q = QUERIES[qi]
        a = engine.search_topk_stream(library, table, q)
        b = engine.search_topk_batched(library, table, q, chunk_size)
        assert result_keys(a, q.direction) == result_keys(b, q.direction)

    def test_tied_scores_break_on_index(self, small_library):
        # all-zero table: every product ties; top-k must be the smallest indices
        n_pairs = sum(len(rg.synthon_ids) for rg in small_library.iter_rgroups())
        member_ids, rg_offsets, rg_ids = [], [0], []
        for rg in small_library.iter_rgroups():
            rg_ids.append(rg.rgroup_id)
            member_ids.extend(rg.synthon_ids)
            rg_offsets.append(len(member_ids))
        table = engine.ContributionTable(
            values=np.zeros((1, n_pairs), dtype=np.float32),
            biases=np.zeros(1),
            task_names=["obj"],
            member_ids=np.asarray(member_ids),
            rg_offsets=np.asarray(rg_offsets),
            rg_ids=np.asarray(rg_ids),
            fingerprint=csl.library_fingerprint(small_library),
        )
        q = engine.QuerySpec("obj", "maximize", (), k=5)
        for res in (
            engine.search_topk_stream(small_library, table, q),
            engine.search_topk_batched(small_library, table, q, chunk_size=13),
        ):
            assert [e.global_index for e in res.entries] == [0, 1, 2, 3, 4]

    def test_index_range_restriction(self, exact_setup):
        library, _, table = exact_setup
        q = engine.QuerySpec("obj", "maximize", (), k=5)
        lo, hi = 40, 120
        got = engine.search_topk_stream(library, table, q, index_range=(lo, hi))
        rows = []
        for g in range(lo, hi):
            chi = csl.decode_index(library, g)
            rows.append((engine.apex_score(table, library, chi, "obj"), -g))
        rows.sort(reverse=True)
        assert [-g for _, g in rows[:5]] == [e.global_index for e in got.entries]
        assert got.scanned == hi - lo

    def test_bad_index_range(self, exact_setup):
        library, _, table = exact_setup
        q = engine.QuerySpec("obj", "maximize", (), k=1)
        with pytest.raises(engine.EngineError, match="index range"):
            engine.search_topk_stream(library, table, q, index_range=(10, 5))


class TestSearchEdges:
    def test_k_zero(self, exact_setup):
        library, _, table = exact_setup
        q = engine.QuerySpec("obj", "maximize", (), k=0)
        res = engine.search_topk_stream(library, table, q)
        assert res.entries == [] and res.retained == 0
        res_b = engine.search_topk_batched(library, table, q, 16)
        assert res_b.entries == []

    def test_k_exceeds_library(self, exact_setup):
        library, _, table = exact_setup
        total = csl.product_count(library)
        q = engine.QuerySpec("obj", "maximize", (), k=total + 50)
        res = engine.search_topk_stream(library, table, q)
        assert res.retained == total
        assert sorted(e.global_index for e in res.entries) == list(range(total))

    def test_infeasible_entries_filtered_and_counted(self, exact_setup):
        library, _, table = exact_setup
        # impossible band: nothing satisfies c1 in [1e6, 1e6+1]
        q = engine.QuerySpec(
            "obj", "maximize", (engine.Constraint("c1", 1e6, 1e6 + 1),), k=8
        )
        res = engine.search_topk_stream(library, table, q)
        assert res.entries == []
        assert res.discarded_for_violation == 8

    def test_chunk_size_validation(self, exact_setup):
        library, _, table = exact_setup
        q = engine.QuerySpec("obj", "maximize", (), k=1)
        with pytest.raises(engine.EngineError, match="chunk size"):
            engine.search_topk_batched(library, table, q, 0)

    def test_entries_report_constraint_values(self, exact_setup):
        library, oracle, table = exact_setup
        q = engine.QuerySpec("obj", "maximize", (engine.Constraint("c1", upper=10.0),), k=3)
        res = engine.search_topk_stream(library, table, q)
        for e in res.entries:
            assert e.constraint_values == (
                props.ground_truth(oracle, library, e.chi, "c1"),
            )


class TestBatches:
    def test_batches_cover_range_with_whole_blocks(self, medium_library):
        total = csl.product_count(medium_library)
        batches = engine.make_batches(medium_library, 500)
        covered = []
        for batch in batches:
            for ti, j, g0, lo, hi in batch:
                covered.extend(range(g0 + lo, g0 + hi))
        assert covered == list(range(total))

    def test_batch_size_limit(self, medium_library):
        chunk = 500
        block_sizes = []
        for ti in range(len(medium_library.reactions)):
            rx = medium_library.reactions[ti]
            inner = medium_library.reaction_size(ti) // len(rx.rgroups[0].synthon_ids)
            block_sizes.append(inner)
        for batch in engine.make_batches(medium_library, chunk):
            size = sum(hi - lo for _, _, _, lo, hi in batch)
            assert size <= chunk or len(batch) == 1

    def test_trace_accounting(self, exact_setup):
        library, _, table = exact_setup
        q = engine.QuerySpec("obj", "maximize", (), k=6)
        trace = engine.BatchTrace([], [], [])
        engine.search_topk_batched(library, table, q, 20, trace=trace)
        assert sum(trace.batch_sizes) == csl.product_count(library)
        for new, carried in zip(trace.new_elements, trace.carried_elements):
            assert 0 <= new + carried <= q.k
        # the first batch carries nothing
        assert trace.carried_elements[0] == 0
        # every selected element after batch 1 is either new or carried
        assert all(
            n + c == min(q.k, sum(trace.batch_sizes[: i + 1]))
            for i, (n, c) in enumerate(zip(trace.new_elements, trace.carried_elements))
        )


class TestCost:
    def test_flops_formula(self):
        assert engine.precompute_flops_per_task(10, 4) == 2 * 10 * 4 - 10

    def test_small_library_accounting(self):
        lib = csl.generate_synthetic(
            csl.SyntheticConfig(n_reactions=1, components=(3,), synthons_per_rgroup=4), seed=0
        )
        out = engine.cost_estimate(lib, d=8, k=5)
        assert out["synthon_encoder_evals"] == 12
        assert out["pair_rows_no_sharing"] == 12
        assert out["cache_bytes_no_sharing"] == 12 * 8 * 4
        assert out["precompute_flops_per_task_no_sharing"] == 2 * 12 * 8 - 12
        assert out["scoring_flops_total"] == 64 * 3
        assert out["k"] == 5


class TestTableIO:
    def test_roundtrip(self, exact_setup, tmp_path):
        library, _, table = exact_setup
        path = tmp_path / "table.blob"
        engine.save_table(table, path)
        loaded = engine.load_table(path)
        np.testing.assert_array_equal(loaded.values, table.values)
        np.testing.assert_array_equal(loaded.biases, table.biases)
        assert loaded.task_names == table.task_names
        assert loaded.fingerprint == table.fingerprint
        loaded.check_library(library)

    def test_save_is_byte_deterministic(self, exact_setup, tmp_path):
        _, _, table = exact_setup
        p1, p2 = tmp_path / "a.blob", tmp_path / "b.blob"
        engine.save_table(table, p1)
        engine.save_table(table, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_save_result_tsv(self, exact_setup, tmp_path):
        library, _, table = exact_setup
        q = engine.QuerySpec("obj", "maximize", (engine.Constraint("c1", upper=10.0),), k=4)
        res = engine.search_topk_stream(library, table, q)
        path = tmp_path / "hits.tsv"
        engine.save_result(res, q, path, library)
        lines = path.read_text().strip().split("\n")
        assert len(lines) == 1 + len(res.entries)
        header = lines[0].split("\t")
        assert "rank" in header and "global_index" in header and "objective" in header
        first = lines[1].split("\t")
        assert int(first[header.index("global_index")]) == res.entries[0].global_index
