import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hgmnet.cli import checkpoint, main
from hgmnet.cli.bench import BenchConfig, bench
from hgmnet.cli.checkpoint import Checkpoint
from hgmnet.cli.dataset import PhrasePairRecord, ingest, score_histogram, stats
from hgmnet.cli.model import SimilarityModel, TrainConfig, train
from hgmnet.errors import ParseError, ValidationError

FIXTURES = Path(__file__).parent / "fixtures"
TOY = FIXTURES / "toy_pairs.csv"
TOY_CK = FIXTURES / "toy_checkpoint.hgm"
HEADER = "id,anchor,target,context,score\n"


def write_csv(tmp_path, body, header=HEADER):
    p = tmp_path / "pairs.csv"
    p.write_text(header + body)
    return p


@pytest.fixture(scope="module")
def toy_model():
    return SimilarityModel.from_checkpoint(checkpoint.load(TOY_CK))


# ------------------------------------------------------------------- ingest


def test_ingest_toy_fixture():
    res = ingest(TOY)
    assert len(res.records) == 64 and not res.problems
    assert res.summary() == "64 records ingested, 0 rows skipped"
    assert res.records == ingest(TOY).records


def test_ingest_examples(tmp_path):
    assert ingest(write_csv(tmp_path, "")).records == []
    res = ingest(write_csv(tmp_path, "a,pump,valve,F04B,0.5\nb,pump,valve,F04B,1.5\nc,pump,valve,F04B,0.25\n"))
    assert [r.id for r in res.records] == ["a", "c"]
    assert res.problems[0][0] == 3 and "outside" in res.problems[0][1]


def test_ingest_rejects_bad_rows(tmp_path):
    rows = ("a,pump,valve,F04B,0.5,x\n"
            "a,pump,valve,F04B,0.5,x\n"
            "b,pump,valve,ZZZ,0.5,x\n"
            "c,,valve,F04B,0.5,x\n"
            "d,pump,valve,F04B,high,x\n")
    res = ingest(write_csv(tmp_path, rows, HEADER.replace("\n", ",extra\n")))
    assert len(res.records) == 1
    assert [line for line, _ in res.problems] == [3, 4, 5, 6]


def test_ingest_missing_column_and_missing_file(tmp_path):
    with pytest.raises(ValidationError):
        ingest(write_csv(tmp_path, "", "id,anchor,target,score\n"))
    with pytest.raises(OSError):
        ingest(tmp_path / "absent.csv")


# -------------------------------------------------------------------- stats


def test_stats_examples():
    zeros = [PhrasePairRecord(str(i), "pump", "valve", "F04B", 0.0) for i in range(10)]
    assert stats(zeros).histogram.zero_share == 100.0
    h = score_histogram([s for s in (0.0, 0.25, 0.5, 0.75, 1.0) for _ in range(100)])
    masses = {k: p for k, p in enumerate(h.percentages) if p}
    assert masses == {0: 20.0, 5: 20.0, 10: 20.0, 15: 20.0, 19: 20.0}
    assert h.zero_share == 20.0


def test_stats_terms_and_sections():
    st_ = stats(ingest(TOY).records, top=3)
    assert dict(st_.sections) == {"A": 16, "B": 16, "C": 16, "H": 16}
    assert len(st_.anchor_terms) == 3
    assert st_.anchor_terms == sorted(st_.anchor_terms, key=lambda kv: (-kv[1], kv[0]))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=200))
def test_histogram_percentages_sum_to_100(scores):
    h = score_histogram(scores)
    assert sum(h.counts) == len(scores)
    assert abs(sum(h.percentages) - 100.0) <= 0.01


# --------------------------------------------------------------- checkpoint


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_checkpoint_roundtrip_bit_exact(arr):
    ck = Checkpoint({"dim": 4}, {"w": arr, "b": arr.T.copy()}, {"tokens": ["pump", "valve"]}, {"pump": 2}, 3)
    back = checkpoint.loads(checkpoint.dumps(ck))
    for name in ck.tensors:
        assert back.tensors[name].tobytes() == np.ascontiguousarray(ck.tensors[name]).tobytes()
    assert back.vocabs == ck.vocabs and back.df == ck.df and back.n_docs == 3 and back.config == ck.config


def test_checkpoint_rejects_bad_input():
    with pytest.raises(ValidationError):
        checkpoint.loads("HGMNET2\n#config\n{}\n#end\n")
    with pytest.raises(ValidationError):
        checkpoint.loads("HGMNET1\n#config\n{}\n#weights x 1 1\n0\n#end\n")
    with pytest.raises(ValidationError):
        checkpoint.loads("HGMNET1\n#config\n{}\n#tensor x 2 1\n0\n")
    with pytest.raises(ValidationError):
        checkpoint.dumps(Checkpoint({}, {"x": np.array([[np.nan]])}))


def test_model_checkpoint_roundtrip(toy_model, tmp_path):
    path = checkpoint.save(toy_model.to_checkpoint(), tmp_path / "again.hgm")
    assert path.read_text() == TOY_CK.read_text()


def test_checkpoint_config_mismatch(toy_model):
    ck = toy_model.to_checkpoint()
    ck.config["dim"] = 8
    with pytest.raises(ValidationError, match="does not match"):
        SimilarityModel.from_checkpoint(ck)
    ck = toy_model.to_checkpoint()
    ck.config["colour"] = "red"
    with pytest.raises(ValidationError):
        SimilarityModel.from_checkpoint(ck)


# ------------------------------------------------------------------ scoring


def test_score_matches_golden(toy_model):
    golden = float((FIXTURES / "toy_checkpoint.golden.txt").read_text().splitlines()[-1])
    assert toy_model.score("tillage soil", "plough soil", "A01B") == pytest.approx(golden, abs=1e-12)


WORDS = ["soil", "plough", "tillage", "engine", "gear", "pyridine", "ring", "packet", "router", "zebra", "the"]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(WORDS), min_size=1, max_size=4), st.lists(st.sampled_from(WORDS), min_size=1,
       max_size=4), st.sampled_from(["A01B", "B60K", "C07D", "H04L", "G06F", "A47"]))
def test_score_bounded_deterministic_and_self_dominant(toy_model, a, t, ctx):
    anchor, target = " ".join(a), " ".join(t)
    s = toy_model.score(anchor, target, ctx)
    assert 0.0 <= s <= 1.0
    assert s == toy_model.score(anchor, target, ctx)
    assert toy_model.score(anchor, anchor, ctx) >= s


def test_score_rejects_bad_context(toy_model):
    with pytest.raises(ParseError):
        toy_model.score("pump", "valve", "not a code")


# ----------------------------------------------------------------- training


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig.from_dict({"steps": 5, "learning_rate": 0.1})
    with pytest.raises(ValidationError):
        TrainConfig(components=["hcl", "rnn"])
    with pytest.raises(ValidationError):
        TrainConfig(dim=10)
    with pytest.raises(ValidationError):
        train([])


def test_zero_learning_rate_keeps_curve_constant():
    records = ingest(TOY).records[:16]
    res = train(records, TrainConfig(components=["mgat", "msa"], lr=0.0, steps=5), seed=3)
    totals = [row["total"] for row in res.curve]
    assert len(totals) == 5 and len(set(totals)) == 1


def test_train_is_deterministic():
    records = ingest(TOY).records[:24]
    cfg = TrainConfig(steps=6)
    a, b = train(records, cfg, seed=11), train(records, cfg, seed=11)
    assert checkpoint.dumps(a.checkpoint()) == checkpoint.dumps(b.checkpoint())
    assert a.curve_csv() == b.curve_csv()
    c = train(records, cfg, seed=12)
    assert checkpoint.dumps(c.checkpoint()) != checkpoint.dumps(a.checkpoint())


@pytest.mark.parametrize("components", [[], ["hcl"], ["mgat"], ["msa"], ["hcl", "msa"]])
def test_component_subsets_train(components):
    records = ingest(TOY).records[:12]
    res = train(records, TrainConfig(components=components, steps=3), seed=0)
    assert len(res.curve) == 3 and not res.diverged
    assert all(math.isfinite(r["total"]) for r in res.curve)
    assert (res.curve[0].get("hcl") is not None) == ("hcl" in components)


def test_batch_negatives_and_literal_form_train():
    records = ingest(TOY).records[:12]
    for extra in ({"negatives": "batch"}, {"literal_form": True}):
        res = train(records, TrainConfig.from_dict({"steps": 3, **extra}), seed=0)
        assert not res.diverged and len(res.curve) == 3


def test_divergence_keeps_last_finite_parameters():
    records = ingest(TOY).records[:12]
    res = train(records, TrainConfig(steps=40, lr=1e12), seed=0)
    assert res.diverged and "step" in res.message
    assert all(np.all(np.isfinite(v)) for v in res.model.params.values())
    checkpoint.dumps(res.checkpoint())


# -------------------------------------------------------------------- bench


def test_bench_examples():
    rows = bench(BenchConfig(ns=[64, 128], dense=True, repeats=1))
    assert rows[1].pairs / rows[0].pairs == 4.0
    (row,) = bench(BenchConfig(ns=[4096], repeats=1))
    assert row.pairs < 0.05 * 4096 ** 2
    with pytest.raises(ValidationError):
        BenchConfig.from_dict({"ns": [1]})


# ---------------------------------------------------------------- CLI verbs


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_cli_ingest_and_stats(capsys, tmp_path):
    code, out, _ = run(capsys, "ingest", "--data", str(TOY))
    assert code == 0 and "64 records ingested" in out
    code, out, _ = run(capsys, "stats", "--data", str(TOY), "--out", str(tmp_path), "--top", "5")
    assert code == 0 and "exact-zero share" in out
    hist = (tmp_path / "score_histogram.csv").read_text().splitlines()
    assert hist[0] == "bucket_lo,bucket_hi,count,percent" and hist[-1].startswith("zero,zero,")
    assert (tmp_path / "context_sections.csv").read_text() == "section,count\nA,16\nB,16\nC,16\nH,16\n"


def test_cli_exit_codes(capsys, tmp_path):
    assert run(capsys, "ingest", "--data", str(tmp_path / "absent.csv"))[0] == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("id,anchor\n")
    code, _, err = run(capsys, "ingest", "--data", str(bad))
    assert code == 1 and "missing required column" in err
    cfg = tmp_path / "cfg.json"
    cfg.write_text("{not json")
    assert run(capsys, "train", "--data", str(TOY), "--config", str(cfg))[0] == 1
    assert run(capsys, "score", "--anchor", "pump")[0] == 1
    assert run(capsys, "score", "--checkpoint", str(TOY_CK), "--anchor", "pump")[0] == 1
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def test_cli_train_score_graph(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"steps": 3}))
    out_dir = tmp_path / "run"
    code, out, _ = run(capsys, "train", "--data", str(TOY), "--config", str(cfg), "--seed", "1", "--out", str(out_dir))
    assert code == 0 and "initial loss" in out
    curve = (out_dir / "loss_curve.csv").read_text().splitlines()
    assert curve[0] == "step,total,mse,hcl,word,sentence,paragraph" and len(curve) == 4
    ck = str(out_dir / "checkpoint.hgm")

    code, out, _ = run(capsys, "score", "--checkpoint", ck, "--anchor", "soil plough", "--target", "soil plough",
                       "--context", "A01B")
    assert code == 0 and 0.0 <= float(out) <= 1.0
    code, out, _ = run(capsys, "score", "--checkpoint", ck, "--data", str(TOY))
    lines = out.splitlines()
    assert code == 0 and lines[0] == "id,score" and len(lines) == 65

    code, out, _ = run(capsys, "graph", "--data", str(TOY), "--checkpoint", ck, "--out", str(tmp_path / "g"))
    assert code == 0 and "wrote" in out
    nodes = (tmp_path / "g" / "graph.nodes.tsv").read_text().splitlines()
    assert len(nodes) == 64 * 2 + 4


def test_cli_bench(capsys, tmp_path):
    code, out, _ = run(capsys, "bench", "--ns", "64,128", "--out", str(tmp_path))
    assert code == 0 and "pairs/(n log2 n)" in out
    rows = (tmp_path / "complexity.csv").read_text().splitlines()
    assert len(rows) == 3 and rows[0].startswith("n,pairs,pairs_per_nlogn")
    code, _, _ = run(capsys, "bench", "--ns", "32", "--dense", "--out", str(tmp_path))
    assert code == 0 and (tmp_path / "complexity_dense.csv").exists()
