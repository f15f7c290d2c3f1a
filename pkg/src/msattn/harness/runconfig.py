"""Run configuration: one YAML (or JSON) file, overridable from the command line.

Every key lives in ``SCHEMA`` with its type and default; unknown keys,
wrong types and invalid combinations are rejected before any compute.
Command-line flags are the dotted key paths, e.g. ``--ms.topk 4``.
"""
from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Optional

import yaml

from ..errors import InvalidConfig
from ..ms_attention import MsConfig
from ..model import ModelConfig, OptimConfig
from ..positional import GrowthSchedule, PosEncoding
from ..recursion import ScaleSpec

# key -> (type tag, default, help)
SCHEMA: dict = {
    "seed": ("int", 0, "global seed (init, data, shifts)"),
    "out_dir": ("str", "runs/default", "directory for results.jsonl, results.csv and checkpoints"),
    "backend": ("opt_str", None, "attention kernel: compiled or python (default: best available)"),
    "model": {
        "layers": ("int", 4, "transformer blocks"),
        "heads": ("int", 4, "attention heads"),
        "head_dim": ("int", 32, "per-head dim (model dim = heads * head_dim)"),
        "vocab": ("int", 512, "vocabulary size"),
        "max_seq": ("int", 4096, "longest accepted sequence"),
        "mlp_ratio": ("int", 4, "MLP hidden / model dim"),
        "attention": ("str", "ms", "ms or dense (dense is evaluation-only)"),
        "dtype": ("str", "float32", "float32 or float64"),
        "init_std": ("float", 0.02, "normal init std"),
    },
    "ms": {
        "s_q": ("int", 16, "query region size"),
        "s_k": ("int", 16, "key/value region size"),
        "topk": ("int", 8, "regions selected per query region"),
        "merges": ("int", 1, "query regions merged per group"),
        "topn": ("int", 8, "regions kept per merged group"),
        "force_local": ("bool", True, "always attend the local region"),
        "permute": ("bool", False, "reorder query regions by selection score before merging"),
        "perm_base": ("float", 5.0, "permutation score base"),
        "perm_width": ("int", 8, "selections used in the permutation score"),
        "repr_mode": ("str", "mean", "region representative: mean or semantic"),
    },
    "pos": {
        "kind": ("str", "crd_ntk", "rope, pi, ntk or crd_ntk"),
        "base": ("float", 10000.0, "rotary base"),
        "pi_scale": ("float", 1.0, "position interpolation factor"),
        "ntk_scale": ("float", 1.0, "NTK scale (starting value when growth is on)"),
        "modulus": ("opt_int", 1024, "cyclic modulus for crd_ntk"),
        "growth": {
            "enabled": ("bool", True, "grow the NTK scale with tokens seen"),
            "initial_scale": ("float", 1.0, "scale at tokens_seen = 0"),
            "factor": ("float", 2.0, "multiplier per growth step"),
            "tokens_per_step": ("int", 409600, "tokens between growth steps"),
        },
    },
    "optim": {
        "lr": ("float", 1e-3, "peak learning rate"),
        "beta1": ("float", 0.9, "AdamW beta1"),
        "beta2": ("float", 0.95, "AdamW beta2"),
        "eps": ("float", 1e-8, "AdamW epsilon"),
        "weight_decay": ("float", 0.1, "decoupled decay on matrices"),
        "grad_clip": ("float", 1.0, "global gradient-norm clip (0 disables)"),
        "warmup": ("int", 100, "linear warmup steps"),
        "decay_steps": ("int", 0, "cosine decay horizon in steps after which lr stays at the floor (0 = constant)"),
        "min_lr_ratio": ("float", 0.1, "lr floor as a fraction of the peak"),
    },
    "train": {
        "steps": ("int", 100, "optimizer steps"),
        "batch": ("int", 1, "sequences per step"),
        "seq_len": ("int", 256, "training context length"),
        "corpus": ("str", "zipf", "zipf, passkey, mixture, repeat or text"),
        "corpus_tokens": ("int", 200000, "length of the synthetic stream"),
        "text_path": ("opt_str", None, "UTF-8 file for corpus=text"),
        "passkey_weight": ("float", 0.5, "share of passkey rows for corpus=mixture"),
        "answer_only": ("bool", True, "passkey rows: loss on the answer digits only"),
        "finetune": ("opt_str", None, "LoRA variant ko, qk, q_only or qkvo (needs init_checkpoint)"),
        "lora_rank": ("int", 8, "LoRA rank"),
        "init_checkpoint": ("opt_str", None, "start from this checkpoint"),
        "log_every": ("int", 1, "record the loss every N steps"),
    },
    "passkey": {
        "key_len": ("int", 5, "digits in the key"),
        "position": ("opt_float", None, "key position as a fraction (null: random)"),
        "filler": ("str", "landmark", "landmark, zipf or uniform"),
    },
    "eval": {
        "checkpoint": ("opt_str", None, "checkpoint to evaluate (default: <out_dir>/checkpoint)"),
        "lengths": ("int_list", [256, 512, 1024], "context lengths"),
        "trials": ("int", 20, "passkey trials per length"),
        "scale": ("opt_float", None, "inference NTK scale (default: the scale reached in training)"),
        "modulus": ("opt_int", None, "inference crd_ntk modulus (default: training modulus)"),
        "attention": ("opt_str", None, "override the attention path: ms or dense"),
        "recursive": ("bool", False, "chunked recursive evaluation"),
        "chunk": ("int", 256, "chunk size for recursive evaluation"),
        "scales": ("scales", [[1, 64], [4, 256]], "recursive history scales as [ratio, range] pairs"),
        "max_range": ("opt_int", None, "history width cap (default: largest range)"),
        "memory_budget": ("int", 8192, "longest length evaluated; longer ones are skipped"),
        "windows": ("int", 4, "perplexity windows per length"),
        "corpus_seed": ("int", 1, "seed of the held-out synthetic stream"),
    },
    "bench": {
        "lengths": ("int_list", [1024, 2048, 4096, 8192], "sequence lengths"),
        "heads": ("int", 1, "heads"),
        "head_dim": ("int", 32, "head dim"),
        "backends": ("str_list", ["compiled", "python"], "kernels to time"),
        "dense_max": ("int", 4096, "skip timing the dense oracle above this length"),
        "repeats": ("int", 1, "timing repeats (minimum reported)"),
    },
}


def _defaults(schema):
    return {k: (_defaults(v) if isinstance(v, dict) else copy.deepcopy(v[1])) for k, v in schema.items()}


def leaf_keys(schema=SCHEMA, prefix=""):
    for k, v in schema.items():
        if isinstance(v, dict):
            yield from leaf_keys(v, prefix + k + ".")
        else:
            yield prefix + k, v


def _coerce(tag: str, value: Any, key: str):
    def bad():
        return InvalidConfig(f"{key}: expected {tag}, got {value!r}")

    if tag.startswith("opt_"):
        if value is None or (isinstance(value, str) and value.lower() in ("null", "none", "")):
            return None
        tag = tag[4:]
    if tag == "int":
        if isinstance(value, bool):
            raise bad()
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                raise bad() from None
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if not isinstance(value, int):
            raise bad()
        return value
    if tag == "float":
        if isinstance(value, bool):
            raise bad()
        try:
            return float(value)
        except (TypeError, ValueError):
            raise bad() from None
    if tag == "bool":
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise bad()
    if tag == "str":
        if not isinstance(value, str):
            raise bad()
        return value
    if tag in ("int_list", "str_list"):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            raise bad()
        return [_coerce(tag[:-5], v.strip() if isinstance(v, str) else v, key) for v in value]
    if tag == "scales":
        if isinstance(value, str):
            value = [p.split(":") for p in value.split(",") if p.strip()]
        try:
            return [[int(r), int(g)] for r, g in value]
        except (TypeError, ValueError):
            raise bad() from None
    raise InvalidConfig(f"{key}: unknown type tag {tag}")


def _merge(base: dict, over: dict, schema: dict, prefix=""):
    if not isinstance(over, dict):
        raise InvalidConfig(f"{prefix or 'config'} must be a mapping")
    for k, v in over.items():
        key = prefix + str(k)
        if k not in schema:
            raise InvalidConfig(f"unknown config key {key!r}")
        if isinstance(schema[k], dict):
            _merge(base[k], v, schema[k], key + ".")
        else:
            base[k] = _coerce(schema[k][0], v, key)


def set_path(cfg: dict, dotted: str, value):
    parts = dotted.split(".")
    node, sch = cfg, SCHEMA
    for p in parts[:-1]:
        if p not in sch or not isinstance(sch[p], dict):
            raise InvalidConfig(f"unknown config key {dotted!r}")
        node, sch = node[p], sch[p]
    leaf = parts[-1]
    if leaf not in sch or isinstance(sch[leaf], dict):
        raise InvalidConfig(f"unknown config key {dotted!r}")
    node[leaf] = _coerce(sch[leaf][0], value, dotted)


def load_file(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    return data or {}


class RunConfig:
    """Resolved, validated configuration plus the library objects it describes."""

    def __init__(self, data: Optional[dict] = None, overrides: Optional[dict] = None):
        raw = _defaults(SCHEMA)
        if data:
            _merge(raw, data, SCHEMA)
        for k, v in (overrides or {}).items():
            set_path(raw, k, v)
        self.raw = raw
        self._build()

    @classmethod
    def from_file(cls, path, overrides=None):
        return cls(load_file(path), overrides)

    def _build(self):
        r = self.raw
        try:
            self.ms = MsConfig(**r["ms"])
            p = dict(r["pos"])
            g = p.pop("growth")
            growth = None
            if g["enabled"] and p["kind"] in ("ntk", "crd_ntk"):
                growth = GrowthSchedule(g["initial_scale"], g["factor"], g["tokens_per_step"])
            if p["kind"] != "crd_ntk":
                p["modulus"] = None
            self.pos = PosEncoding(dim=r["model"]["head_dim"], growth=growth, **p)
            self.model = ModelConfig(ms=self.ms, pos=self.pos, **r["model"])
            self.optim = OptimConfig(**r["optim"])
            self.scales = [ScaleSpec(a, b) for a, b in r["eval"]["scales"]]
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from None
        t, e = r["train"], r["eval"]
        if r["backend"] not in (None, "compiled", "python"):
            raise InvalidConfig("backend must be compiled or python")
        if t["steps"] < 0 or t["batch"] < 1 or t["seq_len"] < 2:
            raise InvalidConfig("train.steps >= 0, train.batch >= 1 and train.seq_len >= 2 required")
        if t["seq_len"] > self.model.max_seq:
            raise InvalidConfig("train.seq_len exceeds model.max_seq")
        if t["corpus"] not in ("zipf", "passkey", "mixture", "repeat", "text"):
            raise InvalidConfig(f"unknown corpus {t['corpus']!r}")
        if t["corpus"] == "text" and not t["text_path"]:
            raise InvalidConfig("corpus=text needs train.text_path")
        if t["finetune"] is not None and not t["init_checkpoint"]:
            raise InvalidConfig("train.finetune needs train.init_checkpoint")
        if not 0.0 <= t["passkey_weight"] <= 1.0:
            raise InvalidConfig("train.passkey_weight must lie in [0, 1]")
        if t["log_every"] < 1:
            raise InvalidConfig("train.log_every must be >= 1")
        if e["trials"] < 1 or e["windows"] < 1 or e["chunk"] < 1 or e["memory_budget"] < 1:
            raise InvalidConfig("eval.trials, windows, chunk and memory_budget must be positive")
        if not e["lengths"] or min(e["lengths"]) < 2:
            raise InvalidConfig("eval.lengths must be non-empty and >= 2")
        if e["attention"] not in (None, "ms", "dense"):
            raise InvalidConfig("eval.attention must be ms or dense")
        if e["scale"] is not None and e["scale"] < 1:
            raise InvalidConfig("eval.scale must be >= 1")
        if e["modulus"] is not None and e["modulus"] < 1:
            raise InvalidConfig("eval.modulus must be positive")
        b = r["bench"]
        if not b["lengths"] or min(b["lengths"]) < 1 or b["heads"] < 1 or b["head_dim"] < 1 or b["repeats"] < 1:
            raise InvalidConfig("bench lengths, heads, head_dim and repeats must be positive")
        for name in b["backends"]:
            if name not in ("compiled", "python"):
                raise InvalidConfig(f"unknown bench backend {name!r}")
        pk = r["passkey"]
        if pk["filler"] not in ("landmark", "zipf", "uniform") or pk["key_len"] < 0:
            raise InvalidConfig("passkey.filler must be landmark, zipf or uniform and key_len >= 0")
        if self.model.vocab < 42:
            raise InvalidConfig("model.vocab must be >= 42 for the toy vocabulary")

    def hashed_view(self, command: str) -> dict:
        """The parts of the config that determine a command's results."""
        r = copy.deepcopy(self.raw)
        r.pop("out_dir")
        r["command"] = command
        return r

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=False)


def documented_keys() -> str:
    return "\n".join(f"{k:28s} {tag:10s} default={dflt!r:24s} {doc}" for k, (tag, dflt, doc) in leaf_keys())
