"""``msattn`` command line: train, eval-ppl, eval-passkey, bench, oracle-check.

Every run resolves a RunConfig (defaults < ``--config`` file < dotted flags
such as ``--train.steps 50``), writes records to ``<out_dir>/results.jsonl``
and re-exports ``results.csv``. Exit codes: 0 success, 1 invariant or check
violation, 2 invalid configuration or input, 3 non-finite training loss.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from .. import kernels
from ..errors import InvalidConfig, InvalidInput, NonFiniteLoss
from ..model import TransformerLM
from ..training import TrainState, current_scale, load_checkpoint, save_checkpoint, train
from . import checks
from .bench import bench, loglog_slope, write_csv
from .data import MixtureCorpus, PasskeyCorpus, RepeatCorpus, StreamCorpus, Vocab, ZipfCorpus, load_text
from .evaluate import eval_passkey, eval_ppl, inference_encoding
from .results import ResultLog, config_hash, run_id
from .runconfig import RunConfig, documented_keys, leaf_keys

log = logging.getLogger("msattn")

COMMANDS = ("train", "eval-ppl", "eval-passkey", "bench", "oracle-check")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msattn", description="MS attention experiment harness")
    parser.add_argument("--list-keys", action="store_true", help="print every config key and exit")
    sub = parser.add_subparsers(dest="command")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None, help="YAML or JSON run config")
        p.add_argument("--quiet", action="store_true")
        if name == "eval-ppl":
            p.add_argument("--recursive", action="store_true", help="shorthand for --eval.recursive true")
        for key, (tag, _default, doc) in leaf_keys():
            p.add_argument(f"--{key}", dest=f"set:{key}", default=argparse.SUPPRESS, metavar=tag.upper(), help=doc)
    return parser


def resolve(args) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("set:")}
    if getattr(args, "recursive", False):
        overrides["eval.recursive"] = True
    if args.config:
        return RunConfig.from_file(args.config, overrides)
    return RunConfig(None, overrides)


# --------------------------------------------------------------------------
# helpers


def build_corpus(rc: RunConfig, vocab: Vocab, seed: int, held_out: bool = False):
    t, pk = rc.raw["train"], rc.raw["passkey"]
    kind = t["corpus"]
    if kind == "text":
        stream = load_text(t["text_path"], vocab)
        cut = max(1, int(0.9 * stream.size))
        part = stream[cut:] if held_out else stream[:cut]
        return StreamCorpus(part if part.size >= 2 else stream)
    if kind == "repeat":
        pattern = np.random.default_rng(seed).integers(vocab.filler_start, vocab.size, 64)
        return RepeatCorpus(pattern)
    zipf = ZipfCorpus(vocab, t["corpus_tokens"], seed=seed)
    passkey = PasskeyCorpus(vocab, pk["key_len"], pk["filler"], t["answer_only"], pk["position"])
    if kind == "zipf":
        return zipf
    if kind == "passkey":
        return passkey
    w = t["passkey_weight"]
    return MixtureCorpus([zipf, passkey], [1.0 - w, w])


def _checkpoint_dir(rc: RunConfig) -> Path:
    return Path(rc.raw["eval"]["checkpoint"] or Path(rc.raw["out_dir"]) / "checkpoint")


def _load_for_eval(rc: RunConfig):
    """Model plus the NTK scale it finished training at (``init`` = untrained)."""
    ck = rc.raw["eval"]["checkpoint"]
    if ck == "init":
        return TransformerLM(rc.model, seed=rc.raw["seed"]), None
    path = _checkpoint_dir(rc)
    if not (path / "manifest.json").exists():
        raise InvalidInput(f"no checkpoint at {path}")
    model, _state, extra = load_checkpoint(path)
    return model, extra.get("ntk_scale")


def _eval_encoding(rc: RunConfig, model, trained_scale):
    e = rc.raw["eval"]
    scale = e["scale"] if e["scale"] is not None else trained_scale
    return inference_encoding(model.cfg.pos, scale, e["modulus"])


def _logger(rc: RunConfig, command: str) -> ResultLog:
    chash = config_hash(rc.hashed_view(command))
    out = Path(rc.raw["out_dir"])
    return ResultLog(out / "results.jsonl", run_id(command, chash), chash, command, rc.raw["seed"])


# --------------------------------------------------------------------------
# subcommands


def cmd_train(rc: RunConfig, rl: ResultLog) -> int:
    seed, t = rc.raw["seed"], rc.raw["train"]
    vocab = Vocab(rc.model.vocab)
    if t["init_checkpoint"]:
        model, _, _ = load_checkpoint(t["init_checkpoint"])
        if t["finetune"]:
            model.attach_lora(t["finetune"], t["lora_rank"], seed)
    else:
        model = TransformerLM(rc.model, seed=seed)
    corpus = build_corpus(rc, vocab, seed)
    state = TrainState(seed=seed)
    t0 = time.perf_counter()

    def on_step(st, loss, gnorm, scale):
        if st.step % t["log_every"] == 0 or st.step == t["steps"]:
            rl.add("train_loss", loss, t["seq_len"], step=st.step, wall_time=time.perf_counter() - t0)
            log.info("step %d loss %.4f grad-norm %.3f scale %s", st.step, loss, gnorm, scale)

    try:
        curve = train(model, corpus, state, t["steps"], rc.optim, t["batch"], t["seq_len"], on_step)
    except NonFiniteLoss as exc:
        rl.add("non_finite_loss", None, t["seq_len"], step=exc.diagnostics.get("step"), note=repr(exc.diagnostics))
        log.error("%s: %s", exc, exc.diagnostics)
        return 3
    scale = current_scale(model, state.tokens_seen)
    extra = {"run_id": rl.run_id, "ntk_scale": scale}
    save_checkpoint(Path(rc.raw["out_dir"]) / "checkpoint", model, state, extra)
    if curve:
        rl.add("final_loss", curve[-1], t["seq_len"], step=state.step, wall_time=time.perf_counter() - t0)
    return 0


def cmd_eval_passkey(rc: RunConfig, rl: ResultLog) -> int:
    e, pk = rc.raw["eval"], rc.raw["passkey"]
    model, trained_scale = _load_for_eval(rc)
    enc = _eval_encoding(rc, model, trained_scale)
    t0 = time.perf_counter()
    res = eval_passkey(model, e["lengths"], e["trials"], pk["key_len"], pk["filler"], pk["position"],
                       seed=rc.raw["seed"], enc=enc, memory_budget=e["memory_budget"], backend=rc.raw["backend"],
                       attention=e["attention"])
    for r in res:
        if r["skipped"]:
            rl.add("passkey_skipped", None, r["length"], note="length exceeds eval.memory_budget")
        else:
            rl.add("passkey_accuracy", r["accuracy"], r["length"], note=f"trials={r['trials']}",
                   wall_time=time.perf_counter() - t0)
            log.info("passkey length %d accuracy %.3f", r["length"], r["accuracy"])
    return 0


def cmd_eval_ppl(rc: RunConfig, rl: ResultLog) -> int:
    e = rc.raw["eval"]
    model, trained_scale = _load_for_eval(rc)
    enc = _eval_encoding(rc, model, trained_scale)
    vocab = Vocab(model.cfg.vocab)
    need = max(e["lengths"]) * e["windows"] + 1
    if rc.raw["train"]["corpus"] == "text":
        stream = build_corpus(rc, vocab, e["corpus_seed"], held_out=True).stream
    else:
        stream = ZipfCorpus(vocab, need, seed=e["corpus_seed"]).stream
    t0 = time.perf_counter()
    res = eval_ppl(model, stream, e["lengths"], e["windows"], enc=enc, backend=rc.raw["backend"],
                   attention=e["attention"], recursive=e["recursive"], chunk=e["chunk"], scales=rc.scales,
                   max_range=e["max_range"], memory_budget=e["memory_budget"])
    metric = "ppl_recursive" if e["recursive"] else "ppl"
    for r in res:
        if r["skipped"]:
            rl.add(metric + "_skipped", None, r["length"], note="length exceeds eval.memory_budget")
        else:
            note = "" if r["length"] == r["requested"] else f"truncated from {r['requested']}"
            rl.add(metric, r["ppl"], r["length"], note=note, wall_time=time.perf_counter() - t0)
            log.info("%s length %d: %.4f", metric, r["length"], r["ppl"])
    return 0


def cmd_bench(rc: RunConfig, rl: ResultLog) -> int:
    b = rc.raw["bench"]
    rows = bench(rc.ms, b["lengths"], b["head_dim"], b["heads"], b["backends"], b["dense_max"], b["repeats"],
                 rc.raw["seed"])
    write_csv(rows, Path(rc.raw["out_dir"]) / "bench.csv")
    status = 0
    for r in rows:
        tag = f"backend={r['backend']}"
        for what in ("selection", "attention"):
            rl.add(f"ms_{what}_macs", r[f"counted_{what}"], r["n"], note=tag)
            if r[f"counted_{what}"] != r[f"predicted_{what}"]:
                log.error("n=%d %s: counted %d != predicted %d", r["n"], what, r[f"counted_{what}"],
                          r[f"predicted_{what}"])
                status = 1
        rl.add("gathered_kv_bytes", r["counted_gathered_bytes"], r["n"], note=tag)
        rl.add("ms_seconds", None, r["n"], note=tag, wall_time=r["ms_seconds"])
        if r["dense_counted"] is not None:
            rl.add("dense_macs", r["dense_counted"], r["n"])
            rl.add("dense_seconds", None, r["n"], wall_time=r["dense_seconds"])
    first = [r for r in rows if r["backend"] == rows[0]["backend"]] if rows else []
    if len(first) >= 2:
        ns = [r["n"] for r in first]
        rl.add("loglog_slope_ms_attention", loglog_slope(ns, [r["counted_attention"] for r in first]))
        rl.add("loglog_slope_dense", loglog_slope(ns, [r["dense_predicted"] for r in first]))
    return status


def cmd_oracle_check(rc: RunConfig, rl: ResultLog) -> int:
    status = 0
    for name, ok, detail in checks.run_all(seed=rc.raw["seed"], backend=rc.raw["backend"]):
        rl.add(f"check:{name}", 1.0 if ok else 0.0, note=detail)
        log.info("%-28s %s  %s", name, "pass" if ok else "FAIL", detail)
        if not ok:
            status = 1
    return status


HANDLERS = {
    "train": cmd_train,
    "eval-ppl": cmd_eval_ppl,
    "eval-passkey": cmd_eval_passkey,
    "bench": cmd_bench,
    "oracle-check": cmd_oracle_check,
}


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.list_keys:
        print(documented_keys())
        return 0
    if args.command is None:
        parser.print_help()
        return 2
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        rc = resolve(args)
        if rc.raw["backend"] == "compiled" and not kernels.available():
            raise InvalidConfig("compiled backend requested but the extension is not built")
        rl = _logger(rc, args.command)
        Path(rc.raw["out_dir"]).mkdir(parents=True, exist_ok=True)
        (Path(rc.raw["out_dir"]) / f"{args.command}.config.yaml").write_text(rc.to_yaml())
        code = HANDLERS[args.command](rc, rl)
        rl.export_csv()
    except (InvalidConfig, InvalidInput) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return code


if __name__ == "__main__":
    sys.exit(main())
