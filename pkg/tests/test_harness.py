import json

import numpy as np
import pytest
import yaml

from msattn.errors import InvalidConfig, InvalidInput
from msattn.harness import cli
from msattn.harness.bench import bench, loglog_slope
from msattn.harness.data import (
    CopyCorpus,
    MixtureCorpus,
    PasskeyCorpus,
    PasskeySpec,
    StreamCorpus,
    Vocab,
    gen_passkey,
    load_text,
    zipf_ngram_stream,
)
from msattn.harness.evaluate import eval_passkey, eval_ppl, inference_encoding
from msattn.harness.results import ResultLog, config_hash, read_records, strip_wall_time
from msattn.harness.runconfig import RunConfig, leaf_keys
from msattn.model import ModelConfig, TransformerLM
from msattn.ms_attention import MsConfig
from msattn.positional import PosEncoding


# -- data ------------------------------------------------------------------------


def test_passkey_roundtrip_over_many_specs():
    vocab = Vocab(64)
    r = np.random.default_rng(0)
    for i in range(1000):
        key_len = int(r.integers(1, 8))
        spec = PasskeySpec(int(r.integers(40 + 3 * key_len, 300)), key_len,
                           None if i % 3 else float(r.random()), ["landmark", "zipf", "uniform"][i % 3])
        s = gen_passkey(spec, i, vocab)
        assert len(s.tokens) == spec.length
        assert np.array_equal(s.tokens[s.answer_span], s.answer)
        assert np.array_equal(s.tokens[s.key_start:s.key_start + key_len], s.answer)
        prompt = vocab.decode(s.tokens[:s.prompt_len])
        assert prompt.endswith("what is the pass key ? the pass key is")
        assert prompt.count("the pass key is") == 2


def test_passkey_determinism_and_edge_cases():
    a = gen_passkey(PasskeySpec(100), 5)
    assert np.array_equal(a.tokens, gen_passkey(PasskeySpec(100), 5).tokens)
    empty = gen_passkey(PasskeySpec(30, key_len=0), 1)
    assert len(empty.answer) == 0 and len(empty.tokens) == 30
    start = gen_passkey(PasskeySpec(100, position=0.0), 2)
    assert start.key_start == 5
    with pytest.raises(InvalidConfig):
        PasskeySpec(10)
    with pytest.raises(InvalidConfig):
        PasskeySpec(100, position=1.5)
    with pytest.raises(InvalidConfig):
        PasskeySpec(100, filler="lorem")
    with pytest.raises(InvalidConfig):
        Vocab(20)


def test_corpora_shapes_and_weights(rng):
    vocab = Vocab(64)
    x, y, w = PasskeyCorpus(vocab).sample(rng, 3, 80)
    assert x.shape == y.shape == w.shape == (3, 80)
    assert np.array_equal(w.sum(1), [5, 5, 5])
    assert np.array_equal(x[:, 1:], y[:, :-1])
    x, y, w = CopyCorpus(vocab).sample(rng, 2, 64)
    for row, wr in zip(np.concatenate([x, y[:, -1:]], 1), w):
        period = int(np.argmax(wr)) + 1
        assert np.array_equal(row[period:], row[:-period])
    x, _, _ = MixtureCorpus([CopyCorpus(vocab), PasskeyCorpus(vocab)], [0.5, 0.5]).sample(rng, 2, 64)
    assert x.shape == (2, 64)
    with pytest.raises(InvalidInput):
        StreamCorpus(np.array([1]))


def test_zipf_table_is_shared_across_seeds():
    vocab = Vocab(512)
    a = zipf_ngram_stream(vocab, 5000, seed=1)
    b = zipf_ngram_stream(vocab, 5000, seed=2)
    assert not np.array_equal(a, b)
    follow = lambda s: {(int(p), int(q)) for p, q in zip(s[:-1], s[1:])}
    # same table: successor sets overlap far more than for an independent table
    c = zipf_ngram_stream(vocab, 5000, seed=2, table_seed=9)
    assert len(follow(a) & follow(b)) > 1.5 * len(follow(a) & follow(c))
    assert np.array_equal(a, zipf_ngram_stream(vocab, 5000, seed=1))


def test_load_text(tmp_path):
    vocab = Vocab(64)
    p = tmp_path / "t.txt"
    p.write_text("the pass key is 7 zebra\nzebra")
    ids = load_text(p, vocab)
    assert vocab.decode(ids[:5]) == "the pass key is 7"
    assert ids[5] == ids[6] and ids[5] >= vocab.filler_start
    (tmp_path / "e.txt").write_text("  \n")
    with pytest.raises(InvalidInput):
        load_text(tmp_path / "e.txt", vocab)


# -- evaluation ------------------------------------------------------------------


def toy_model(vocab=64, attention="ms", topk=4):
    cfg = ModelConfig(layers=1, heads=2, head_dim=8, vocab=vocab, max_seq=128, attention=attention,
                      ms=MsConfig(s_q=8, s_k=8, topk=topk, merges=1, topn=topk), pos=PosEncoding("rope", dim=8))
    return TransformerLM(cfg, seed=0)


def test_untrained_model_is_near_chance():
    res = eval_passkey(toy_model(), [64, 96], trials=10, key_len=3)
    assert [r["length"] for r in res] == [64, 96]
    assert all(r["accuracy"] <= 0.1 and not r["skipped"] for r in res)


def test_passkey_budget_skip():
    res = eval_passkey(toy_model(), [64, 200], trials=2, memory_budget=100)
    assert res[1] == {"length": 200, "accuracy": None, "trials": 0, "skipped": True}


def test_zero_logit_model_has_vocab_perplexity(rng):
    model = toy_model()
    model.params["lm_head"][:] = 0
    res = eval_ppl(model, rng.integers(0, 64, 500), [32, 64], windows=3)
    for r in res:
        assert r["ppl"] == pytest.approx(64.0, rel=1e-6)
        assert r["windows"] == 3


def test_exhaustive_ms_perplexity_equals_dense(rng):
    stream = rng.integers(0, 64, 300)
    ms = eval_ppl(toy_model(topk=16), stream, [128])[0]["ppl"]
    dense = eval_ppl(toy_model(topk=16), stream, [128], attention="dense")[0]["ppl"]
    assert abs(ms - dense) / dense < 1e-3


def test_perplexity_truncation_and_empty(rng):
    res = eval_ppl(toy_model(), rng.integers(0, 64, 50), [128])[0]
    assert res["length"] == 49 and res["requested"] == 128
    with pytest.raises(InvalidInput):
        eval_ppl(toy_model(), np.array([3]), [8])


def test_inference_encoding_zeroes_shift():
    enc = PosEncoding("crd_ntk", dim=8, modulus=64, randomp=7)
    out = inference_encoding(enc, scale=4, modulus=128)
    assert (out.randomp, out.ntk_scale, out.modulus) == (0, 4.0, 128)
    assert inference_encoding(None) is None


# -- config and results ------------------------------------------------------------


def test_runconfig_defaults_and_overrides(tmp_path):
    rc = RunConfig()
    assert rc.raw["ms"]["topk"] == 8 and rc.model.layers == rc.raw["model"]["layers"]
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"train": {"steps": 7}, "ms": {"s_q": 8}}))
    rc = RunConfig.from_file(p, {"train.steps": "9", "eval.lengths": "128,256"})
    assert rc.raw["train"]["steps"] == 9 and rc.raw["ms"]["s_q"] == 8
    assert rc.raw["eval"]["lengths"] == [128, 256]
    j = tmp_path / "c.json"
    j.write_text(json.dumps({"seed": 3}))
    assert RunConfig.from_file(j).raw["seed"] == 3


@pytest.mark.parametrize("data,overrides", [
    ({"train": {"stpes": 1}}, None),
    (None, {"model.colour": 1}),
    (None, {"train.steps": "many"}),
    (None, {"ms.s_q": 0}),
    (None, {"train.seq_len": 100000}),
    (None, {"train.corpus": "wiki"}),
    (None, {"backend": "gpu"}),
    ({"model": 3}, None),
])
def test_runconfig_rejects_bad_input(data, overrides):
    with pytest.raises(InvalidConfig):
        RunConfig(data, overrides)


def test_every_key_is_documented():
    for key, (tag, _default, doc) in leaf_keys():
        assert doc and tag, key


def test_config_hash_binds_results():
    a, b = RunConfig(), RunConfig(None, {"seed": 1})
    assert config_hash(a.hashed_view("train")) != config_hash(b.hashed_view("train"))
    assert config_hash(a.hashed_view("train")) != config_hash(a.hashed_view("bench"))
    c = RunConfig(None, {"out_dir": "elsewhere"})
    assert config_hash(a.hashed_view("train")) == config_hash(c.hashed_view("train"))


def test_result_log_roundtrip(tmp_path):
    rl = ResultLog(tmp_path / "r" / "results.jsonl", "x-1", "abc", "train", 7)
    rl.add("loss", 1.5, 256, step=1, wall_time=0.2)
    rl.add("skip", None, 512, note="budget")
    recs = read_records(rl.path)
    assert [r["metric"] for r in recs] == ["loss", "skip"]
    assert recs[1]["value"] is None and recs[0]["seed"] == 7
    csv_text = rl.export_csv().read_text()
    assert csv_text.splitlines()[0].startswith("run_id,config_hash")
    assert "wall_time" not in strip_wall_time(recs)[0]


# -- benchmark and CLI -------------------------------------------------------------


def test_bench_counts_match_closed_form():
    cfg = MsConfig(s_q=16, s_k=16, topk=4, merges=2, topn=4)
    rows = bench(cfg, [256, 512], d=8, backends=("python",), dense_max=512)
    for r in rows:
        assert r["counted_attention"] == r["predicted_attention"]
        assert r["counted_selection"] == r["predicted_selection"]
        assert r["counted_gathered_bytes"] == r["predicted_gathered_bytes"]
        assert r["dense_counted"] == r["dense_predicted"]
    assert loglog_slope([256, 512], [r["counted_attention"] for r in rows]) == pytest.approx(1.0, abs=1e-9)
    assert loglog_slope([1, 2, 4], [1, 4, 16]) == pytest.approx(2.0)


def test_attention_work_doubles_with_length():
    cfg = MsConfig(s_q=16, s_k=16, topk=4, merges=1, topn=4)
    rows = bench(cfg, [8192, 16384], d=4, backends=("python",), dense_max=0)
    assert rows[1]["counted_attention"] / rows[0]["counted_attention"] == 2.0


SMALL = ["--model.layers", "1", "--model.heads", "2", "--model.head_dim", "8", "--model.vocab", "64",
         "--model.max_seq", "128", "--ms.s_q", "8", "--ms.s_k", "8", "--ms.topk", "4", "--ms.topn", "4", "--train.seq_len", "64",
         "--quiet"]


def run_cli(tmp_path, *args):
    return cli.main([args[0], "--out_dir", str(tmp_path), *SMALL, *args[1:]])


def test_cli_train_then_evaluate(tmp_path):
    assert run_cli(tmp_path, "train", "--train.steps", "3", "--train.seq_len", "64") == 0
    assert (tmp_path / "checkpoint" / "manifest.json").exists()
    assert run_cli(tmp_path, "eval-passkey", "--eval.lengths", "64", "--eval.trials", "2") == 0
    assert run_cli(tmp_path, "eval-ppl", "--eval.lengths", "64", "--eval.chunk", "32", "--recursive") == 0
    recs = read_records(tmp_path / "results.jsonl")
    metrics = {r["metric"] for r in recs}
    assert {"train_loss", "final_loss", "passkey_accuracy", "ppl_recursive"} <= metrics
    assert (tmp_path / "results.csv").exists() and (tmp_path / "train.config.yaml").exists()


def test_cli_determinism(tmp_path):
    for sub in ("a", "b"):
        assert run_cli(tmp_path / sub, "train", "--seed", "7", "--train.steps", "4", "--train.seq_len", "32") == 0
    a, b = (strip_wall_time(read_records(tmp_path / s / "results.jsonl")) for s in "ab")
    assert a == b and len(a) == 5


def test_cli_exit_codes(tmp_path, capsys):
    assert run_cli(tmp_path, "train", "--ms.s_q", "0") == 2
    assert run_cli(tmp_path, "eval-ppl", "--eval.checkpoint", str(tmp_path / "missing")) == 2
    assert run_cli(tmp_path, "bench", "--bench.lengths", "256,512", "--bench.backends", "python",
                   "--bench.head_dim", "4") == 0
    assert run_cli(tmp_path, "oracle-check") == 0
    assert cli.main([]) == 2
    assert cli.main(["--list-keys"]) == 0
    assert "train.steps" in capsys.readouterr().out


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_non_finite_loss_exit_code(tmp_path):
    assert run_cli(tmp_path, "train", "--train.steps", "2", "--train.seq_len", "32", "--optim.lr", "1e30",
                   "--optim.grad_clip", "0") == 3
    assert any(r["metric"] == "non_finite_loss" for r in read_records(tmp_path / "results.jsonl"))
