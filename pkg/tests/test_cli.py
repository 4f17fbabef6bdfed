import json

import pytest

from apexcsl import cli


def run(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run the whole pipeline once with fast settings and hand back the paths."""
    d = tmp_path_factory.mktemp("pipeline")
    paths = {
        "library": d / "library.csl",
        "labels": d / "labels.tsv",
        "oracle": d / "oracle.json",
        "surrogate": d / "surrogate.blob",
        "factorizer": d / "factorizer.blob",
        "table": d / "table.blob",
        "query": d / "query.json",
        "hits": d / "hits.tsv",
        "dir": d,
    }
    assert run(
        "generate", "--out", str(paths["library"]),
        "--reactions", "2", "--components", "2,3", "--synthons", "4", "--seed", "5",
    ) == 0
    assert run(
        "label", "--library", str(paths["library"]), "--out", str(paths["labels"]),
        "--oracle-out", str(paths["oracle"]), "--seed", "5",
    ) == 0
    assert run(
        "train-surrogate", "--library", str(paths["library"]), "--labels", str(paths["labels"]),
        "--out", str(paths["surrogate"]), "--epochs", "2", "--embedding-dim", "16",
    ) == 0
    assert run(
        "train-factorizer", "--library", str(paths["library"]),
        "--surrogate", str(paths["surrogate"]), "--out", str(paths["factorizer"]),
        "--steps", "5", "--gap-sample", "32",
    ) == 0
    assert run(
        "precompute", "--library", str(paths["library"]), "--surrogate", str(paths["surrogate"]),
        "--factorizer", str(paths["factorizer"]), "--out", str(paths["table"]),
    ) == 0
    paths["query"].write_text(json.dumps({
        "objective": {"task": "dock_a", "direction": "maximize"},
        "constraints": [{"task": "mw", "upper": 5.0}],
        "k": 8,
    }))
    assert run(
        "search", "--library", str(paths["library"]), "--table", str(paths["table"]),
        "--query", str(paths["query"]), "--out", str(paths["hits"]),
    ) == 0
    return paths


class TestPipeline:
    def test_artifacts_exist(self, pipeline):
        for key in ("library", "labels", "oracle", "surrogate", "factorizer", "table", "hits"):
            assert pipeline[key].exists() and pipeline[key].stat().st_size > 0

    def test_search_prints_summary(self, pipeline, capsys):
        out = pipeline["dir"] / "hits2.tsv"
        run(
            "search", "--library", str(pipeline["library"]), "--table", str(pipeline["table"]),
            "--query", str(pipeline["query"]), "--out", str(out),
        )
        captured = capsys.readouterr().out
        assert "k=8" in captured and "scanned=80" in captured

    def test_rerun_is_byte_identical(self, pipeline):
        d = pipeline["dir"]
        lib2 = d / "library2.csl"
        run("generate", "--out", str(lib2), "--reactions", "2", "--components", "2,3",
            "--synthons", "4", "--seed", "5")
        assert lib2.read_bytes() == pipeline["library"].read_bytes()

        table2 = d / "table2.blob"
        run("precompute", "--library", str(pipeline["library"]),
            "--surrogate", str(pipeline["surrogate"]),
            "--factorizer", str(pipeline["factorizer"]), "--out", str(table2))
        assert table2.read_bytes() == pipeline["table"].read_bytes()

        hits2 = d / "hits_rerun.tsv"
        run("search", "--library", str(pipeline["library"]), "--table", str(pipeline["table"]),
            "--query", str(pipeline["query"]), "--out", str(hits2))
        assert hits2.read_bytes() == pipeline["hits"].read_bytes()

    def test_stream_and_batched_agree(self, pipeline):
        d = pipeline["dir"]
        a = d / "hits_stream.tsv"
        b = d / "hits_batched.tsv"
        run("search", "--library", str(pipeline["library"]), "--table", str(pipeline["table"]),
            "--query", str(pipeline["query"]), "--out", str(a), "--variant", "stream")
        run("search", "--library", str(pipeline["library"]), "--table", str(pipeline["table"]),
            "--query", str(pipeline["query"]), "--out", str(b), "--variant", "batched",
            "--chunk-size", "7")
        assert a.read_bytes() == b.read_bytes()

    def test_assemble_adds_column(self, pipeline):
        out = pipeline["dir"] / "hits_assembled.tsv"
        run("search", "--library", str(pipeline["library"]), "--table", str(pipeline["table"]),
            "--query", str(pipeline["query"]), "--out", str(out), "--assemble")
        header = out.read_text().splitlines()[0]
        assert "assembled" in header
        assert "assembled" not in pipeline["hits"].read_text().splitlines()[0]

    def test_evaluate_writes_report(self, pipeline):
        out = pipeline["dir"] / "eval.tsv"
        assert run(
            "evaluate", "--library", str(pipeline["library"]), "--table", str(pipeline["table"]),
            "--oracle", str(pipeline["oracle"]), "--query", str(pipeline["query"]),
            "--out", str(out), "--j", "5,10",
        ) == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0].startswith("j\trecall")
        assert len(lines) == 3

    def test_compare_ts(self, pipeline):
        out = pipeline["dir"] / "ts.tsv"
        assert run(
            "compare-ts", "--library", str(pipeline["library"]), "--table", str(pipeline["table"]),
            "--oracle", str(pipeline["oracle"]), "--objective", "dock_a",
            "--budgets", "5", "--n-seeds", "2", "--out", str(out),
        ) == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0].startswith("reaction_id")
        assert len(lines) > 1

    def test_cost_prints_json(self, pipeline, capsys):
        assert run("cost", "--library", str(pipeline["library"]), "--d", "8", "--k", "3") == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["k"] == 3
        assert doc["synthon_encoder_evals"] == 20
        assert doc["cache_bytes_no_sharing"] == 20 * 8 * 4


class TestQueries:
    def test_preset_expansion(self, pipeline):
        q = pipeline["dir"] / "query_preset.json"
        q.write_text(json.dumps({
            "objective": {"task": "dock_a"},
            "constraints": [{"preset": "lipinski"}],
            "k": 4,
        }))
        out = pipeline["dir"] / "hits_preset.tsv"
        assert run("search", "--library", str(pipeline["library"]),
                   "--table", str(pipeline["table"]), "--query", str(q),
                   "--out", str(out)) == 0
        header = out.read_text().splitlines()[0]
        for task in ("mw", "logp", "hbd", "hba"):
            assert task in header

    def test_unknown_preset(self, pipeline, capsys):
        q = pipeline["dir"] / "query_bad_preset.json"
        q.write_text(json.dumps({
            "objective": {"task": "dock_a"},
            "constraints": [{"preset": "nope"}],
        }))
        assert run("search", "--library", str(pipeline["library"]),
                   "--table", str(pipeline["table"]), "--query", str(q),
                   "--out", str(pipeline["dir"] / "x.tsv")) == 1
        assert "unknown preset" in capsys.readouterr().err

    def test_unknown_task(self, pipeline, capsys):
        q = pipeline["dir"] / "query_bad_task.json"
        q.write_text(json.dumps({"objective": {"task": "phantom"}}))
        assert run("search", "--library", str(pipeline["library"]),
                   "--table", str(pipeline["table"]), "--query", str(q),
                   "--out", str(pipeline["dir"] / "x.tsv")) == 1
        assert "unknown task" in capsys.readouterr().err

    def test_k_zero_header_only(self, pipeline):
        q = pipeline["dir"] / "query_k0.json"
        q.write_text(json.dumps({"objective": {"task": "dock_a"}, "k": 0}))
        out = pipeline["dir"] / "hits_k0.tsv"
        assert run("search", "--library", str(pipeline["library"]),
                   "--table", str(pipeline["table"]), "--query", str(q),
                   "--out", str(out)) == 0
        assert len(out.read_text().strip().splitlines()) == 1

    def test_malformed_json(self, pipeline, capsys):
        q = pipeline["dir"] / "query_broken.json"
        q.write_text("{not json")
        assert run("search", "--library", str(pipeline["library"]),
                   "--table", str(pipeline["table"]), "--query", str(q),
                   "--out", str(pipeline["dir"] / "x.tsv")) == 1
        assert "error:" in capsys.readouterr().err


class TestErrors:
    def test_missing_library(self, pipeline, capsys):
        assert run("cost", "--library", str(pipeline["dir"] / "absent.csl")) == 1
        assert "error:" in capsys.readouterr().err

    def test_from_library_requires_downsample(self, pipeline, capsys):
        assert run("generate", "--out", str(pipeline["dir"] / "x.csl"),
                   "--from-library", str(pipeline["library"])) == 1
        assert "--downsample" in capsys.readouterr().err

    def test_downsample_from_library(self, pipeline):
        from apexcsl import csl

        out = pipeline["dir"] / "down.csl"
        assert run("generate", "--out", str(out), "--from-library", str(pipeline["library"]),
                   "--downsample", "0.5") == 0
        lib = csl.load_library(out)
        full = csl.load_library(pipeline["library"])
        assert 0 < csl.product_count(lib) < csl.product_count(full)
