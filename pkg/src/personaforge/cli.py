"""Command-line surface: corpus generation, training phases, evaluation, chat.

Every run writes a ``config.resolved`` key=value file next to its outputs so
the run is reproducible from that file plus the inputs. Exit codes: 0 success,
1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
import time
from pathlib import Path

from . import data as D
from . import metrics as M
from . import training as tr
from .models import LMConfig, LengthError, decode, serialize_instance
from .synthetic import SyntheticError, SyntheticSpec, write_synthetic_corpus


class UsageError(Exception):
    """Bad flags, bad config keys, or invalid configuration values."""


_RUNTIME_ERRORS = (
    OSError,
    ValueError,
    D.CorpusError,
    SyntheticError,
    LengthError,
    tr.DivergenceError,
    tr.CheckpointFormatError,
    tr.CheckpointIntegrityError,
)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise UsageError(f"expected a boolean, got '{text}'")


def load_config_file(path) -> dict[str, str]:
    """Plain-text ``key=value`` lines; '#' starts a comment; blanks ignored."""
    out: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key=value, got '{raw.strip()}'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _resolve(args, keys: dict[str, tuple], extra_paths: dict[str, str | None] = None) -> dict:
    """Merge CLI flags over config-file values over defaults.

    ``keys`` maps config key -> (caster, default). Flag values live on ``args``
    under the same (underscored) name with None meaning "not given". Unknown
    keys in the config file are errors.
    """
    file_cfg = load_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = set(file_cfg) - set(keys)
    if unknown:
        raise UsageError(f"unknown config key '{sorted(unknown)[0]}'")
    resolved = {}
    for key, (cast, default) in keys.items():
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
        elif key in file_cfg:
            try:
                resolved[key] = cast(file_cfg[key])
            except (TypeError, ValueError) as exc:
                raise UsageError(f"config key '{key}': {exc}") from None
        else:
            resolved[key] = default
    for key, value in (extra_paths or {}).items():
        resolved[key] = value
    return resolved


def _write_resolved(out_dir: Path, command: str, resolved: dict) -> None:
    lines = [f"command={command}"]
    for key in sorted(resolved):
        value = resolved[key]
        if value is None:
            value = ""
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    (out_dir / "config.resolved").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _log_header(log_path: Path, record: dict) -> None:
    with open(log_path, "w", encoding="utf-8") as f:
        f.write(json.dumps(record) + "\n")


def _print_history(history) -> None:
    for rec in history:
        parts = [f"{k}={rec[k]:.4f}" if isinstance(rec[k], float) else f"{k}={rec[k]}" for k in rec]
        print("  ".join(parts))


_MODEL_KEYS = {
    "d_model": (int, 32),
    "n_layers": (int, 2),
    "n_heads": (int, 2),
    "d_ff": (int, 128),
    "max_len": (int, 192),
}


def _model_config(resolved, vocab, seed) -> LMConfig:
    return LMConfig(
        vocab_size=len(vocab),
        d_model=resolved["d_model"],
        n_layers=resolved["n_layers"],
        n_heads=resolved["n_heads"],
        d_ff=resolved["d_ff"],
        max_len=resolved["max_len"],
        seed=seed,
    )


def _add_model_flags(p) -> None:
    p.add_argument("--d-model", type=int)
    p.add_argument("--n-layers", type=int)
    p.add_argument("--n-heads", type=int)
    p.add_argument("--d-ff", type=int)
    p.add_argument("--max-len", type=int)


def _load_lm(path, expect_kind="conditional_lm"):
    ckpt = tr.load_checkpoint(path)
    if ckpt.kind != expect_kind:
        raise ValueError(f"checkpoint {path} holds a '{ckpt.kind}' model, expected '{expect_kind}'")
    return ckpt


# ---------------------------------------------------------------------------
# gen-corpus


def cmd_gen_corpus(args) -> int:
    keys = {
        "train": (int, 2000),
        "valid": (int, 200),
        "test": (int, 200),
        "seed": (int, 7),
        "utterances_min": (int, 5),
        "utterances_max": (int, 7),
    }
    resolved = _resolve(args, keys)
    for split in ("train", "valid", "test"):
        if resolved[split] < 1:
            raise UsageError(f"--{split} must be at least 1, got {resolved[split]}")
    out = _out_dir(args)
    spec = SyntheticSpec(
        n_train=resolved["train"],
        n_valid=resolved["valid"],
        n_test=resolved["test"],
        utterances_per_context=(resolved["utterances_min"], resolved["utterances_max"]),
        seed=resolved["seed"],
    )
    try:
        spec.validate()
    except (ValueError, SyntheticError) as exc:
        raise UsageError(str(exc)) from None
    _write_resolved(out, "gen-corpus", resolved)
    t0 = time.monotonic()
    paths = write_synthetic_corpus(spec, out)
    print(f"generation took {time.monotonic() - t0:.1f}s", file=sys.stderr)
    for name in ("train", "valid", "test"):
        print(f"{name}: {paths[name]}")
    return 0


# ---------------------------------------------------------------------------
# train


_SL_KEYS = {
    "eta": (float, 5e-4),
    "epochs": (int, 2),
    "batch_size": (int, 4),
    "seed": (int, 0),
    **_MODEL_KEYS,
}


def _sl_config(resolved) -> tr.SLConfig:
    cfg = tr.SLConfig(
        eta=resolved["eta"],
        epochs=resolved["epochs"],
        batch_size=resolved["batch_size"],
        seed=resolved["seed"],
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg


def _load_split(path):
    insts = D.load_corpus(path)
    if not insts:
        raise ValueError(f"corpus {path} is empty")
    return insts


def cmd_train_sl(args) -> int:
    keys = dict(_SL_KEYS)
    keys["role"] = (str, None)
    resolved = _resolve(args, keys, {"train": args.train, "valid": args.valid, "from": getattr(args, "from_ckpt", None)})
    role = resolved["role"]
    if role not in tr.ROLE_MODES:
        raise UsageError(f"--role must be one of {sorted(tr.ROLE_MODES)}, got '{role}'")
    out = _out_dir(args)
    _write_resolved(out, "train sl", resolved)
    train = _load_split(args.train)
    valid = _load_split(args.valid)
    vocab = D.build_vocab(train)
    cfg = _sl_config(resolved)
    warm = _load_lm(args.from_ckpt) if getattr(args, "from_ckpt", None) else None
    log_path = out / "train.log.jsonl"
    _log_header(log_path, {"event": "header", "command": "train sl", "role": role, "seed": cfg.seed})
    t0 = time.monotonic()
    ckpt = tr.train_supervised(
        role, train, valid, vocab, cfg,
        model_config=None if warm else _model_config(resolved, vocab, cfg.seed),
        log_path=log_path, warm_start=warm,
    )
    print(f"training took {time.monotonic() - t0:.1f}s", file=sys.stderr)
    tr.save_checkpoint(ckpt, out / "model.ckpt")
    _print_history(ckpt.history)
    print(out / "model.ckpt")
    return 0


def cmd_train_multitask(args) -> int:
    keys = dict(_SL_KEYS)
    keys["alpha"] = (float, 1.0)
    resolved = _resolve(args, keys, {"train": args.train, "valid": args.valid, "from": getattr(args, "from_ckpt", None)})
    if resolved["alpha"] <= 0:
        raise UsageError("alpha must be positive")
    out = _out_dir(args)
    _write_resolved(out, "train multitask", resolved)
    train = _load_split(args.train)
    valid = _load_split(args.valid)
    vocab = D.build_vocab(train)
    cfg = _sl_config(resolved)
    warm = _load_lm(args.from_ckpt) if getattr(args, "from_ckpt", None) else None
    log_path = out / "train.log.jsonl"
    _log_header(log_path, {"event": "header", "command": "train multitask", "alpha": resolved["alpha"], "seed": cfg.seed})
    t0 = time.monotonic()
    ckpt = tr.train_multitask(
        resolved["alpha"], train, valid, vocab, cfg,
        model_config=None if warm else _model_config(resolved, vocab, cfg.seed),
        log_path=log_path, warm_start=warm,
    )
    print(f"training took {time.monotonic() - t0:.1f}s", file=sys.stderr)
    tr.save_checkpoint(ckpt, out / "model.ckpt")
    _print_history(ckpt.history)
    print(out / "model.ckpt")
    return 0


def cmd_train_critic(args) -> int:
    keys = dict(_SL_KEYS)
    keys["holdout_frac"] = (float, 0.1)
    keys["pair_seed"] = (int, 0)
    keys["n_layers"] = (int, 1)  # single encoder layer unless asked otherwise
    resolved = _resolve(args, keys, {"train": args.train, "from": getattr(args, "from_ckpt", None)})
    out = _out_dir(args)
    _write_resolved(out, "train critic", resolved)
    train = _load_split(args.train)
    vocab = D.build_vocab(train)
    dataset = D.build_critic_dataset(train, seed=resolved["pair_seed"])
    cfg = _sl_config(resolved)
    warm = tr.load_checkpoint(args.from_ckpt) if getattr(args, "from_ckpt", None) else None
    if warm is not None and warm.kind != "critic":
        raise ValueError(f"checkpoint {args.from_ckpt} holds a '{warm.kind}' model, expected 'critic'")
    log_path = out / "train.log.jsonl"
    _log_header(log_path, {"event": "header", "command": "train critic", "pair_seed": resolved["pair_seed"], "seed": cfg.seed})
    t0 = time.monotonic()
    ckpt = tr.train_critic(
        dataset, vocab, cfg,
        model_config=None if warm else _model_config(resolved, vocab, cfg.seed),
        holdout_frac=resolved["holdout_frac"], log_path=log_path, warm_start=warm,
    )
    print(f"training took {time.monotonic() - t0:.1f}s", file=sys.stderr)
    tr.save_checkpoint(ckpt, out / "model.ckpt")
    _print_history(ckpt.history)
    print(out / "model.ckpt")
    return 0


_RL_KEYS = {
    "eta": (float, 5e-6),
    "accumulate_every": (int, 20),
    "validate_every": (int, 50),
    "max_updates": (int, 200),
    "seed": (int, 0),
    "reward_mode": (str, "thresholded"),
    "threshold": (float, 0.5),
    "reward_positive": (float, 1.0),
    "reward_negative": (float, -1.0),
    "temperature": (float, 1.0),
    "max_new_persona": (int, 48),
    "max_new_response": (int, 40),
    "valid_limit": (int, 0),
    "ppl_budget": (float, 1.10),
    "use_baseline": (_bool, False),
    "baseline_decay": (float, 0.9),
    "length_normalize": (_bool, False),
    "update_ppg": (_bool, True),
    "update_drg": (_bool, True),
}


def cmd_train_rl(args) -> int:
    keys = dict(_RL_KEYS)
    resolved = _resolve(
        args, keys,
        {"train": args.train, "valid": args.valid, "ppg": args.ppg, "drg": args.drg, "critic": args.critic},
    )
    # bare --update-ppg / --update-drg flags select exactly the named agents
    if args.update_ppg or args.update_drg:
        resolved["update_ppg"] = bool(args.update_ppg)
        resolved["update_drg"] = bool(args.update_drg)
    out = _out_dir(args)
    _write_resolved(out, "train rl", resolved)
    ppg_ckpt = _load_lm(args.ppg)
    drg_ckpt = _load_lm(args.drg)
    critic_ckpt = _load_lm(args.critic, expect_kind="critic")
    if not (ppg_ckpt.vocab_tokens == drg_ckpt.vocab_tokens == critic_ckpt.vocab_tokens):
        raise ValueError("the three checkpoints were trained with different vocabularies")
    vocab = ppg_ckpt.vocabulary()
    ppg, drg, critic = ppg_ckpt.build_model(), drg_ckpt.build_model(), critic_ckpt.build_model()
    train = _load_split(args.train)
    valid = _load_split(args.valid)
    cfg = tr.RLConfig(
        eta=resolved["eta"],
        accumulate_every=resolved["accumulate_every"],
        validate_every=resolved["validate_every"],
        reward_positive=resolved["reward_positive"],
        reward_negative=resolved["reward_negative"],
        reward_mode=resolved["reward_mode"],
        threshold=resolved["threshold"],
        update_ppg=resolved["update_ppg"],
        update_drg=resolved["update_drg"],
        max_updates=resolved["max_updates"],
        seed=resolved["seed"],
        temperature=resolved["temperature"],
        max_new_persona=resolved["max_new_persona"],
        max_new_response=resolved["max_new_response"],
        valid_limit=resolved["valid_limit"] or None,
        use_baseline=resolved["use_baseline"],
        baseline_decay=resolved["baseline_decay"],
        length_normalize=resolved["length_normalize"],
        ppl_budget=resolved["ppl_budget"],
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    log_path = out / "train.log.jsonl"
    _log_header(
        log_path,
        {"event": "header", "command": "train rl", "update_ppg": cfg.update_ppg, "update_drg": cfg.update_drg, "seed": cfg.seed},
    )
    t0 = time.monotonic()
    ckpt_ppg, ckpt_drg, history = tr.rl_train(ppg, drg, critic, train, valid, vocab, cfg, log_path=log_path)
    print(f"training took {time.monotonic() - t0:.1f}s", file=sys.stderr)
    # a frozen agent passes through untouched, so its artifact is the input file
    if cfg.update_ppg:
        tr.save_checkpoint(ckpt_ppg, out / "ppg.ckpt")
    else:
        shutil.copyfile(args.ppg, out / "ppg.ckpt")
    if cfg.update_drg:
        tr.save_checkpoint(ckpt_drg, out / "drg.ckpt")
    else:
        shutil.copyfile(args.drg, out / "drg.ckpt")
    _print_history(history)
    print(out / "ppg.ckpt")
    print(out / "drg.ckpt")
    return 0


# ---------------------------------------------------------------------------
# eval


_METRIC_ALIASES = {
    "ppl": ("perplexity",),
    "perplexity": ("perplexity",),
    "rouge": ("rouge_l",),
    "rouge_l": ("rouge_l",),
    "meteor": ("meteor",),
    "distinct": ("distinct_1", "distinct_2"),
    "distinct_1": ("distinct_1",),
    "distinct_2": ("distinct_2",),
}


def _parse_metrics(text: str | None):
    if not text:
        return None  # all metrics
    out = []
    for name in text.split(","):
        name = name.strip()
        if name not in _METRIC_ALIASES:
            raise UsageError(f"unknown metric '{name}' (choose from {sorted(_METRIC_ALIASES)})")
        out.extend(_METRIC_ALIASES[name])
    return set(out)


def _parse_system(spec_text: str, vocab_holder: list) -> M.System:
    """``NAME:TYPE:key=path[,key=path]`` with TYPE in pipeline|gold_partner|no_partner."""
    parts = spec_text.split(":", 2)
    if len(parts) != 3:
        raise UsageError(f"system '{spec_text}': expected NAME:TYPE:key=path[,key=path]")
    name, kind, rest = parts
    paths = {}
    for piece in rest.split(","):
        if "=" not in piece:
            raise UsageError(f"system '{name}': expected key=path, got '{piece}'")
        k, v = piece.split("=", 1)
        paths[k.strip()] = v.strip()
    needed = {"pipeline": {"ppg", "drg"}, "gold_partner": {"drg"}, "no_partner": {"drg"}}.get(kind)
    if needed is None:
        raise UsageError(f"system '{name}': unknown type '{kind}' (pipeline, gold_partner, no_partner)")
    if set(paths) != needed:
        raise UsageError(f"system '{name}': type '{kind}' needs exactly {sorted(needed)} checkpoints")

    def load(path):
        try:
            return _load_lm(path)
        except (OSError, tr.CheckpointFormatError, tr.CheckpointIntegrityError, ValueError) as exc:
            raise ValueError(f"system '{name}': {exc}") from None

    drg_ckpt = load(paths["drg"])
    vocab_holder.append((name, drg_ckpt.vocab_tokens))
    responder = drg_ckpt.build_model()
    if kind == "pipeline":
        ppg_ckpt = load(paths["ppg"])
        vocab_holder.append((name, ppg_ckpt.vocab_tokens))
        return M.System(name, responder, response_mode="drg_target", persona_model=ppg_ckpt.build_model())
    if kind == "gold_partner":
        return M.System(name, responder, response_mode="drg_target")
    return M.System(name, responder, response_mode="drg_no_partner")


def cmd_eval(args) -> int:
    keys = {
        "metrics": (str, None),
        "max_new_persona": (int, 48),
        "max_new_response": (int, 40),
    }
    specs = list(args.system)
    if args.systems:
        specs.extend(s for s in args.systems.split(";") if s.strip())
    resolved = _resolve(args, keys, {"test": args.test, "systems": ";".join(specs)})
    metric_set = _parse_metrics(resolved["metrics"])
    out = _out_dir(args)
    _write_resolved(out, "eval", resolved)
    vocab_holder: list = []
    systems = [_parse_system(s, vocab_holder) for s in specs]
    if not systems:
        raise UsageError("at least one --system is required")
    base_name, base_tokens = vocab_holder[0]
    for name, tokens in vocab_holder[1:]:
        if tokens != base_tokens:
            raise ValueError(f"system '{name}' uses a different vocabulary than system '{base_name}'")
    vocab = D.Vocabulary(base_tokens)
    test = _load_split(args.test)
    t0 = time.monotonic()
    report = M.evaluate_suite(
        systems, test, vocab,
        max_new_persona=resolved["max_new_persona"],
        max_new_response=resolved["max_new_response"],
    )
    print(f"evaluation took {time.monotonic() - t0:.1f}s", file=sys.stderr)
    try:
        text = report.to_text(metrics=metric_set)
        json_dict = report.to_json_dict(metrics=metric_set)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    (out / "report.txt").write_text(text, encoding="utf-8")
    with open(out / "report.json", "w", encoding="utf-8") as f:
        json.dump(json_dict, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(out / "generations.jsonl", "w", encoding="utf-8") as f:
        for rec in report.generations:
            f.write(json.dumps(rec) + "\n")
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# generate + chat


def _decode_persona(ppg, inst, vocab, max_new):
    prefix = serialize_instance(inst, vocab, "ppg_target", ppg.config.max_len, include_target=False)
    return decode(ppg, prefix, max_new).tokens


def _decode_response(drg, inst, vocab, persona_tokens, max_new):
    prefix = serialize_instance(
        inst, vocab, "drg_target", drg.config.max_len, partner_tokens=persona_tokens, include_target=False
    )
    return decode(drg, prefix, max_new).tokens


def _persona_sentences(tokens, vocab) -> list[str]:
    chunks = D.split_on_sep([t for t in tokens if t not in (D.PAD_ID, D.EOS_ID)])
    return [s for s in (vocab.decode(c) for c in chunks) if s]


def cmd_generate(args) -> int:
    keys = {
        "max_new_persona": (int, 48),
        "max_new_response": (int, 40),
        "limit": (int, 5),
    }
    resolved = _resolve(args, keys, {"test": args.test, "ppg": args.ppg, "drg": args.drg})
    ppg_ckpt = _load_lm(args.ppg)
    drg_ckpt = _load_lm(args.drg)
    if ppg_ckpt.vocab_tokens != drg_ckpt.vocab_tokens:
        raise ValueError("the two checkpoints were trained with different vocabularies")
    vocab = ppg_ckpt.vocabulary()
    ppg, drg = ppg_ckpt.build_model(), drg_ckpt.build_model()
    test = _load_split(args.test)[: resolved["limit"]]
    records = []
    for i, inst in enumerate(test):
        p_toks = _decode_persona(ppg, inst, vocab, resolved["max_new_persona"])
        r_toks = _decode_response(drg, inst, vocab, p_toks, resolved["max_new_response"])
        persona = " | ".join(_persona_sentences(p_toks, vocab))
        response = vocab.decode(r_toks)
        records.append({"instance": i, "persona": persona, "response": response, "gold": inst.response})
        print(f"# instance {i}")
        print(f"partner-persona: {persona}")
        print(f"response: {response}")
        print(f"gold: {inst.response}")
    if args.out:
        out = _out_dir(args)
        _write_resolved(out, "generate", resolved)
        with open(out / "generations.jsonl", "w", encoding="utf-8") as f:
            for rec in records:
                f.write(json.dumps(rec) + "\n")
    return 0


def cmd_chat(args) -> int:
    keys = {
        "max_new_persona": (int, 48),
        "max_new_response": (int, 40),
    }
    resolved = _resolve(args, keys, {"ppg": args.ppg, "drg": args.drg, "self_persona": args.self_persona})
    ppg_ckpt = _load_lm(args.ppg)
    drg_ckpt = _load_lm(args.drg)
    if ppg_ckpt.vocab_tokens != drg_ckpt.vocab_tokens:
        raise ValueError("the two checkpoints were trained with different vocabularies")
    vocab = ppg_ckpt.vocabulary()
    ppg, drg = ppg_ckpt.build_model(), drg_ckpt.build_model()
    self_personas = [ln.strip() for ln in Path(args.self_persona).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not self_personas:
        raise ValueError(f"self-persona file {args.self_persona} has no sentences")

    budget = max(8, drg.config.max_len // 2)
    context: list[str] = []
    prev_sentences: set[str] = set()
    print("type a message; /reset clears context, /quit exits")
    for raw in sys.stdin:
        line = raw.strip()
        if not line:
            continue
        if line == "/quit":
            break
        if line == "/reset":
            context = []
            prev_sentences = set()
            print("[context cleared]")
            continue
        words = D.split_text(line)
        if len(words) > budget:
            words = words[:budget]
            print(f"[input truncated to {budget} tokens]", file=sys.stderr)
        context.append(" ".join(words))
        # the partner's profile is never read at inference; it is inferred
        inst = D.DialogueInstance(
            self_personas=self_personas,
            partner_personas=[],
            context=list(context) if context else [""],
            response="",
        )
        p_toks = _decode_persona(ppg, inst, vocab, resolved["max_new_persona"])
        sentences = _persona_sentences(p_toks, vocab)
        if args.show_persona:
            for s in sentences:
                marker = "+" if s not in prev_sentences else " "
                print(f"persona> {marker} {s}")
        prev_sentences = set(sentences)
        r_toks = _decode_response(drg, inst, vocab, p_toks, resolved["max_new_response"])
        reply = vocab.decode(r_toks)
        print(f"reply> {reply}")
        context.append(reply)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="personaforge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="write a deterministic synthetic dialogue corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--train", type=int)
    p.add_argument("--valid", type=int)
    p.add_argument("--test", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--utterances-min", type=int)
    p.add_argument("--utterances-max", type=int)
    p.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("train", help="run a training phase")
    tsub = t.add_subparsers(dest="trainer", required=True)

    def common_sl(p):
        p.add_argument("--train", required=True)
        p.add_argument("--valid", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--config")
        p.add_argument("--from", dest="from_ckpt")
        p.add_argument("--eta", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--seed", type=int)
        _add_model_flags(p)

    p = tsub.add_parser("sl", help="maximum-likelihood training for one role")
    p.add_argument("--role", required=True)
    common_sl(p)
    p.set_defaults(func=cmd_train_sl)

    p = tsub.add_parser("multitask", help="shared model over persona and response losses")
    p.add_argument("--alpha", type=float)
    common_sl(p)
    p.set_defaults(func=cmd_train_multitask)

    p = tsub.add_parser("critic", help="binary persona/response relevance classifier")
    p.add_argument("--train", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--from", dest="from_ckpt")
    p.add_argument("--eta", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--holdout-frac", type=float)
    p.add_argument("--pair-seed", type=int)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train_critic)

    p = tsub.add_parser("rl", help="joint policy-gradient phase over both generators")
    p.add_argument("--ppg", required=True)
    p.add_argument("--drg", required=True)
    p.add_argument("--critic", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--update-ppg", action="store_true", default=None)
    p.add_argument("--update-drg", action="store_true", default=None)
    p.add_argument("--eta", type=float)
    p.add_argument("--accumulate-every", type=int)
    p.add_argument("--validate-every", type=int)
    p.add_argument("--max-updates", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--reward-mode", choices=("thresholded", "continuous"))
    p.add_argument("--threshold", type=float)
    p.add_argument("--reward-positive", type=float)
    p.add_argument("--reward-negative", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--max-new-persona", type=int)
    p.add_argument("--max-new-response", type=int)
    p.add_argument("--valid-limit", type=int)
    p.add_argument("--ppl-budget", type=float)
    p.add_argument("--use-baseline", action="store_true", default=None)
    p.add_argument("--baseline-decay", type=float)
    p.add_argument("--length-normalize", action="store_true", default=None)
    p.set_defaults(func=cmd_train_rl)

    p = sub.add_parser("eval", help="score systems on a test corpus")
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--system", action="append", default=[], help="NAME:TYPE:key=path[,key=path]")
    p.add_argument("--systems", help="semicolon-separated list of --system specs")
    p.add_argument("--metrics")
    p.add_argument("--config")
    p.add_argument("--max-new-persona", type=int)
    p.add_argument("--max-new-response", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="decode personas and responses for test instances")
    p.add_argument("--ppg", required=True)
    p.add_argument("--drg", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--limit", type=int)
    p.add_argument("--max-new-persona", type=int)
    p.add_argument("--max-new-response", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("chat", help="interactive REPL; the partner persona is inferred each turn")
    p.add_argument("--ppg", required=True)
    p.add_argument("--drg", required=True)
    p.add_argument("--self-persona", required=True)
    p.add_argument("--show-persona", action="store_true")
    p.add_argument("--config")
    p.add_argument("--max-new-persona", type=int)
    p.add_argument("--max-new-response", type=int)
    p.set_defaults(func=cmd_chat)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
