"""Supervised, multitask, critic, and policy-gradient training, plus checkpoints.

Training is two-staged: maximum-likelihood fits for the persona inferrer, the
responder, and the critic come first; the reinforcement phase then samples a
persona and a response per instance, scores the pair with the frozen critic,
and pushes both generators toward higher reward.
"""

from __future__ import annotations

import json
import math
import random
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import data as D
from . import metrics as M
from .autograd import AdamState, Tensor
from .models import (
    ConditionalLM,
    Critic,
    LMConfig,
    critic_score,
    decode,
    extend_with_target,
    sequence_nll,
    serialize_instance,
)


class DivergenceError(RuntimeError):
    """Raised when a training loss goes non-finite."""


class CheckpointFormatError(ValueError):
    """Unrecognized or unsupported checkpoint encoding."""


class CheckpointIntegrityError(ValueError):
    """Structurally valid encoding whose payload does not match its index."""


# serialization mode used for each trainable role
ROLE_MODES = {
    "ppg": "ppg_target",
    "drg": "drg_target",
    "e2e_with_partner": "drg_target",
    "e2e_no_partner": "drg_no_partner",
}


@dataclass
class SLConfig:
    eta: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 2
    batch_size: int = 4
    seed: int = 0

    def validate(self) -> None:
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class RLConfig:
    eta: float = 5e-6
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    accumulate_every: int = 20
    validate_every: int = 50
    reward_positive: float = 1.0
    reward_negative: float = -1.0
    reward_mode: str = "thresholded"
    threshold: float = 0.5
    update_ppg: bool = True
    update_drg: bool = True
    max_updates: int = 200
    seed: int = 0
    temperature: float = 1.0
    max_new_persona: int = 48
    max_new_response: int = 40
    valid_limit: int | None = None
    use_baseline: bool = False
    baseline_decay: float = 0.9
    length_normalize: bool = False
    ppl_budget: float = 1.10

    def validate(self) -> None:
        if not (self.update_ppg or self.update_drg):
            raise ValueError("at least one of update_ppg/update_drg must be true")
        if not (self.reward_positive > 0 > self.reward_negative):
            raise ValueError("need reward_positive > 0 > reward_negative")
        if self.reward_mode not in ("thresholded", "continuous"):
            raise ValueError(f"unknown reward_mode '{self.reward_mode}'")
        if self.eta <= 0 or self.temperature <= 0:
            raise ValueError("eta and temperature must be positive")
        if min(self.accumulate_every, self.validate_every, self.max_updates) < 1:
            raise ValueError("accumulate_every, validate_every, max_updates must be >= 1")
        if not (0.0 < self.threshold < 1.0):
            raise ValueError("threshold must lie in (0, 1)")
        if self.ppl_budget < 1.0:
            raise ValueError("ppl_budget must be >= 1")


# ---------------------------------------------------------------------------
# checkpoints


_MAGIC = b"PFCK"
_VERSION = 1
CHECKPOINT_KINDS = ("conditional_lm", "critic")


@dataclass
class Checkpoint:
    kind: str
    config: LMConfig
    vocab_tokens: list[str]
    params: dict[str, np.ndarray]  # f32 storage; models compute in f64
    metadata: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def vocabulary(self) -> D.Vocabulary:
        return D.Vocabulary(self.vocab_tokens)

    def build_model(self):
        if self.kind == "conditional_lm":
            model = ConditionalLM(self.config)
        elif self.kind == "critic":
            model = Critic(self.config)
        else:
            raise ValueError(f"unknown checkpoint kind '{self.kind}'")
        model.load_arrays({k: v.astype(np.float64) for k, v in self.params.items()})
        return model


def _f32_params(model) -> dict[str, np.ndarray]:
    return {name: p.data.astype("<f4") for name, p in model.params.items()}


def snapshot_checkpoint(model, kind: str, vocab: D.Vocabulary, metadata=None, history=None) -> Checkpoint:
    return Checkpoint(kind, model.config, vocab.to_list(), _f32_params(model), dict(metadata or {}), list(history or []))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    if ckpt.kind not in CHECKPOINT_KINDS:
        raise ValueError(f"unknown checkpoint kind '{ckpt.kind}'")
    index = []
    blobs = []
    offset = 0
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
        blob = arr.tobytes()
        index.append({"name": name, "dtype": "<f4", "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "kind": ckpt.kind,
        "config": ckpt.config.to_dict(),
        "vocab": list(ckpt.vocab_tokens),
        "metadata": ckpt.metadata,
        "history": ckpt.history,
        "tensors": index,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<Q", len(hb)))
        f.write(hb)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < 16:
        raise CheckpointFormatError("file too short to hold a checkpoint preamble")
    if blob[:4] != _MAGIC:
        raise CheckpointFormatError(f"bad magic bytes {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != _VERSION:
        raise CheckpointFormatError(f"unsupported format version {version}")
    (hlen,) = struct.unpack_from("<Q", blob, 8)
    if 16 + hlen > len(blob):
        raise CheckpointIntegrityError("truncated header")
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable header: {exc}") from None
    for key in ("kind", "config", "vocab", "metadata", "history", "tensors"):
        if key not in header:
            raise CheckpointFormatError(f"header missing key '{key}'")
    if header["kind"] not in CHECKPOINT_KINDS:
        raise CheckpointFormatError(f"unknown checkpoint kind '{header['kind']}'")

    payload = blob[16 + hlen :]
    params: dict[str, np.ndarray] = {}
    offset = 0
    prev = None
    for ent in header["tensors"]:
        name, shape = ent["name"], tuple(int(s) for s in ent["shape"])
        if ent["dtype"] != "<f4":
            raise CheckpointFormatError(f"unsupported tensor dtype '{ent['dtype']}'")
        if prev is not None and not name > prev:
            raise CheckpointIntegrityError("tensor index is not in canonical name order")
        if int(ent["offset"]) != offset:
            raise CheckpointIntegrityError(f"tensor index offset mismatch for '{name}'")
        count = math.prod(shape)
        nbytes = count * 4
        if offset + nbytes > len(payload):
            raise CheckpointIntegrityError(f"payload truncated inside tensor '{name}'")
        params[name] = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
        prev = name
    if offset != len(payload):
        raise CheckpointIntegrityError(f"payload size mismatch: index covers {offset} bytes, file holds {len(payload)}")
    return Checkpoint(
        kind=header["kind"],
        config=LMConfig.from_dict(header["config"]),
        vocab_tokens=list(header["vocab"]),
        params=params,
        metadata=header["metadata"],
        history=header["history"],
    )


# ---------------------------------------------------------------------------
# shared epoch loop


def _append_log(log_path, record) -> None:
    if log_path is None:
        return
    with open(log_path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record) + "\n")


def _run_epochs(model, train, cfg: SLConfig, instance_loss, validate, select, log_path):
    """Adam over shuffled batches; returns (best validation record, f32 snapshot, history)."""
    params = model.parameters()
    state = AdamState(eta=cfg.eta, beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.epsilon)
    step = 0
    history = []
    best_key = None
    best_record = None
    best_params = None
    for epoch in range(1, cfg.epochs + 1):
        order = list(range(len(train)))
        random.Random(cfg.seed * 1_000_003 + epoch).shuffle(order)
        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start : start + cfg.batch_size]
            ag.zero_grads(params)
            total = 0.0
            for idx in chunk:
                loss = instance_loss(train[idx], 1.0 / len(chunk))
                ag.backward(loss)
                total += loss.item()
            if not math.isfinite(total):
                raise DivergenceError(f"non-finite loss at update {step}")
            ag.adam_step(params, state)
            step += 1
        record = validate(step, epoch)
        history.append(record)
        _append_log(log_path, record)
        key = select(record)
        if best_key is None or key < best_key:
            best_key, best_record, best_params = key, record, _f32_params(model)
    return best_record, best_params, history


def supervised_batch_loss(model, batch, vocab: D.Vocabulary, mode: str, max_len: int | None = None) -> Tensor:
    """Mean over the batch of per-instance token-mean NLL, as one graph."""
    if not batch:
        raise ValueError("batch is empty")
    max_len = max_len or model.config.max_len
    total = None
    for inst in batch:
        seq = serialize_instance(inst, vocab, mode, max_len)
        nll, n = sequence_nll(model, seq)
        term = ag.mul(nll, Tensor(1.0 / (n * len(batch))))
        total = term if total is None else ag.add(total, term)
    return total


def multitask_batch_loss(model, batch, vocab: D.Vocabulary, alpha: float, max_len: int | None = None) -> Tensor:
    """Batch mean of alpha * persona-task NLL + response-task NLL per instance."""
    if not batch:
        raise ValueError("batch is empty")
    max_len = max_len or model.config.max_len
    total = None
    for inst in batch:
        seq_p = serialize_instance(inst, vocab, "multitask_ppg", max_len)
        seq_d = serialize_instance(inst, vocab, "multitask_drg", max_len)
        nll_p, n_p = sequence_nll(model, seq_p)
        nll_d, n_d = sequence_nll(model, seq_d)
        term = ag.add(ag.mul(nll_p, Tensor(alpha / n_p)), ag.mul(nll_d, Tensor(1.0 / n_d)))
        term = ag.mul(term, Tensor(1.0 / len(batch)))
        total = term if total is None else ag.add(total, term)
    return total


def _check_corpora(train, valid) -> None:
    if not train:
        raise ValueError("training corpus is empty")
    if not valid:
        raise ValueError("validation corpus is empty")


def _default_lm_config(vocab: D.Vocabulary, seed: int, **overrides) -> LMConfig:
    return LMConfig(vocab_size=len(vocab), seed=seed, **overrides)


def _warm_start(model, ckpt: "Checkpoint", vocab: D.Vocabulary) -> None:
    if ckpt.vocab_tokens != vocab.to_list():
        raise ValueError("warm-start checkpoint was trained with a different vocabulary")
    model.load_arrays({k: v.astype(np.float64) for k, v in ckpt.params.items()})


def train_supervised(
    role: str,
    train,
    valid,
    vocab: D.Vocabulary,
    cfg: SLConfig,
    model_config: LMConfig | None = None,
    log_path=None,
    warm_start: "Checkpoint | None" = None,
) -> Checkpoint:
    if role not in ROLE_MODES:
        raise ValueError(f"unknown role '{role}' (expected one of {sorted(ROLE_MODES)})")
    cfg.validate()
    _check_corpora(train, valid)
    mode = ROLE_MODES[role]
    if warm_start is not None:
        model_config = warm_start.config
    model_config = model_config or _default_lm_config(vocab, cfg.seed)
    if model_config.vocab_size != len(vocab):
        raise ValueError(f"model vocab_size {model_config.vocab_size} != vocabulary size {len(vocab)}")
    model = ConditionalLM(model_config)
    if warm_start is not None:
        _warm_start(model, warm_start, vocab)
    L = model_config.max_len

    def instance_loss(inst, scale):
        seq = serialize_instance(inst, vocab, mode, L)
        nll, n = sequence_nll(model, seq)
        return ag.mul(nll, Tensor(scale / n))

    def validate(step, epoch):
        return {"step": step, "epoch": epoch, "perplexity": M.perplexity(model, valid, mode, vocab)}

    best, snap, history = _run_epochs(model, train, cfg, instance_loss, validate, lambda r: r["perplexity"], log_path)
    meta = {
        "trainer": "supervised",
        "role": role,
        "mode": mode,
        "seed": cfg.seed,
        "eta": cfg.eta,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "best_step": best["step"],
        "best_perplexity": best["perplexity"],
    }
    return Checkpoint("conditional_lm", model_config, vocab.to_list(), snap, meta, history)


def train_multitask(
    alpha: float,
    train,
    valid,
    vocab: D.Vocabulary,
    cfg: SLConfig,
    model_config: LMConfig | None = None,
    log_path=None,
    warm_start: "Checkpoint | None" = None,
) -> Checkpoint:
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    cfg.validate()
    _check_corpora(train, valid)
    if warm_start is not None:
        model_config = warm_start.config
    model_config = model_config or _default_lm_config(vocab, cfg.seed)
    if model_config.vocab_size != len(vocab):
        raise ValueError(f"model vocab_size {model_config.vocab_size} != vocabulary size {len(vocab)}")
    model = ConditionalLM(model_config)
    if warm_start is not None:
        _warm_start(model, warm_start, vocab)
    L = model_config.max_len

    def instance_loss(inst, scale):
        seq_p = serialize_instance(inst, vocab, "multitask_ppg", L)
        seq_d = serialize_instance(inst, vocab, "multitask_drg", L)
        nll_p, n_p = sequence_nll(model, seq_p)
        nll_d, n_d = sequence_nll(model, seq_d)
        term = ag.add(ag.mul(nll_p, Tensor(alpha / n_p)), ag.mul(nll_d, Tensor(1.0 / n_d)))
        return ag.mul(term, Tensor(scale))

    def validate(step, epoch):
        return {
            "step": step,
            "epoch": epoch,
            "perplexity_ppg": M.perplexity(model, valid, "multitask_ppg", vocab),
            "perplexity_drg": M.perplexity(model, valid, "multitask_drg", vocab),
        }

    # selection favors the response task; the persona task is auxiliary here
    best, snap, history = _run_epochs(model, train, cfg, instance_loss, validate, lambda r: r["perplexity_drg"], log_path)
    meta = {
        "trainer": "multitask",
        "alpha": alpha,
        "seed": cfg.seed,
        "eta": cfg.eta,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "best_step": best["step"],
        "best_perplexity_drg": best["perplexity_drg"],
        "best_perplexity_ppg": best["perplexity_ppg"],
    }
    return Checkpoint("conditional_lm", model_config, vocab.to_list(), snap, meta, history)


# ---------------------------------------------------------------------------
# critic


def _encode_examples(examples, vocab: D.Vocabulary):
    return [(vocab.encode(ex.persona_text), vocab.encode(ex.response_text), float(ex.label)) for ex in examples]


def critic_accuracy(critic: Critic, examples, vocab: D.Vocabulary) -> float:
    if not examples:
        raise ValueError("no examples to score")
    hits = 0
    for p_ids, r_ids, label in _encode_examples(examples, vocab):
        pred = 1.0 if critic_score(critic, p_ids, r_ids) >= 0.5 else 0.0
        hits += pred == label
    return hits / len(examples)


def critic_bce(critic: Critic, examples, vocab: D.Vocabulary) -> float:
    """Mean binary cross-entropy in nats; no graph built."""
    if not examples:
        raise ValueError("no examples to score")
    total = 0.0
    with ag.no_grad():
        for p_ids, r_ids, label in _encode_examples(examples, vocab):
            x = float(critic.logit(p_ids, r_ids).data)
            total += max(x, 0.0) - x * label + math.log1p(math.exp(-abs(x)))
    return total / len(examples)


def train_critic(
    dataset,
    vocab: D.Vocabulary,
    cfg: SLConfig,
    model_config: LMConfig | None = None,
    holdout_frac: float = 0.1,
    log_path=None,
    warm_start: "Checkpoint | None" = None,
) -> Checkpoint:
    cfg.validate()
    if not dataset:
        raise ValueError("critic dataset is empty")
    pos = sum(1 for ex in dataset if ex.label == 1)
    neg = len(dataset) - pos
    if pos == 0 or neg == 0:
        raise ValueError("critic dataset is single-class")
    if abs(pos - neg) > 0.01 * len(dataset) + 1e-9:
        raise ValueError(f"critic dataset imbalanced: {pos} positive vs {neg} negative")
    if warm_start is not None:
        model_config = warm_start.config
    model_config = model_config or _default_lm_config(vocab, cfg.seed, n_layers=1)
    if model_config.vocab_size != len(vocab):
        raise ValueError(f"model vocab_size {model_config.vocab_size} != vocabulary size {len(vocab)}")

    n_hold = min(len(dataset) - 1, max(1, round(holdout_frac * len(dataset))))
    perm = np.random.default_rng(cfg.seed).permutation(len(dataset))
    holdout = [dataset[i] for i in perm[:n_hold]]
    trainset = [dataset[i] for i in perm[n_hold:]]
    enc = _encode_examples(trainset, vocab)

    model = Critic(model_config)
    if warm_start is not None:
        _warm_start(model, warm_start, vocab)

    def instance_loss(ex, scale):
        p_ids, r_ids, label = ex
        loss = ag.bce_with_logits(model.logit(p_ids, r_ids), np.float64(label))
        return ag.mul(loss, Tensor(scale))

    def validate(step, epoch):
        return {
            "step": step,
            "epoch": epoch,
            "holdout_accuracy": critic_accuracy(model, holdout, vocab),
            "holdout_bce": critic_bce(model, holdout, vocab),
        }

    best, snap, history = _run_epochs(model, enc, cfg, instance_loss, validate, lambda r: 1.0 - r["holdout_accuracy"], log_path)
    meta = {
        "trainer": "critic",
        "seed": cfg.seed,
        "eta": cfg.eta,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "holdout_size": n_hold,
        "best_step": best["step"],
        "best_holdout_accuracy": best["holdout_accuracy"],
    }
    return Checkpoint("critic", model_config, vocab.to_list(), snap, meta, history)


# ---------------------------------------------------------------------------
# reinforcement phase


@dataclass
class RolloutResult:
    persona_tokens: list[int]
    response_tokens: list[int]
    logp_ppg: float
    logp_drg: float
    score: float
    reward: float


def rollout_reward(score: float, cfg: RLConfig) -> float:
    if cfg.reward_mode == "continuous":
        return 2.0 * score - 1.0
    return cfg.reward_positive if score >= cfg.threshold else cfg.reward_negative


def rl_rollout(
    ppg: ConditionalLM,
    drg: ConditionalLM,
    critic: Critic,
    inst: D.DialogueInstance,
    vocab: D.Vocabulary,
    cfg: RLConfig,
    rng: np.random.Generator,
) -> RolloutResult:
    prefix_p = serialize_instance(inst, vocab, "ppg_target", ppg.config.max_len, include_target=False)
    dp = decode(ppg, prefix_p, cfg.max_new_persona, greedy=False, temperature=cfg.temperature, rng=rng)
    prefix_r = serialize_instance(
        inst, vocab, "drg_target", drg.config.max_len, partner_tokens=dp.tokens, include_target=False
    )
    dr = decode(drg, prefix_r, cfg.max_new_response, greedy=False, temperature=cfg.temperature, rng=rng)
    try:
        score = critic_score(critic, dp.tokens, dr.tokens)
    except ValueError:
        score = 0.0  # both sampled blocks degenerate (bare eos); count as mismatched
    return RolloutResult(dp.tokens, dr.tokens, dp.logp, dr.logp, score, rollout_reward(score, cfg))


def _ensure_grads(params) -> None:
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def rl_train(
    ppg: ConditionalLM,
    drg: ConditionalLM,
    critic: Critic,
    train,
    valid,
    vocab: D.Vocabulary,
    cfg: RLConfig,
    log_path=None,
):
    """Joint REINFORCE over both generators; returns (ppg ckpt, drg ckpt, history).

    The critic is never updated. Gradients of reward * sampled-sequence NLL sum
    over accumulate_every instances before each Adam step. The returned
    checkpoints hold the best-mean-validation-reward snapshot whose task
    perplexities stayed within cfg.ppl_budget of their starting values.
    """
    cfg.validate()
    _check_corpora(train, valid)
    params_ppg = ppg.parameters()
    params_drg = drg.parameters()
    state_ppg = AdamState(eta=cfg.eta, beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.epsilon)
    state_drg = AdamState(eta=cfg.eta, beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.epsilon)

    def validate(step):
        subset = valid[: cfg.valid_limit] if cfg.valid_limit else valid
        rewards = []
        for j, inst in enumerate(subset):
            rng = np.random.default_rng([cfg.seed, 1_000_003, j])
            rewards.append(rl_rollout(ppg, drg, critic, inst, vocab, cfg, rng).reward)
        return {
            "step": step,
            "perplexity_ppg": M.perplexity(ppg, valid, "ppg_target", vocab),
            "perplexity_drg": M.perplexity(drg, valid, "drg_target", vocab),
            "mean_reward": float(np.mean(rewards)),
        }

    first = validate(0)
    history = [first]
    _append_log(log_path, first)
    budget_ppg = first["perplexity_ppg"] * cfg.ppl_budget
    budget_drg = first["perplexity_drg"] * cfg.ppl_budget
    # the starting point is the fallback selection if nothing later qualifies
    best_reward = first["mean_reward"]
    best_record = first
    best_ppg = _f32_params(ppg)
    best_drg = _f32_params(drg)

    updates = 0
    pending = 0
    counter = 0
    baseline = 0.0
    epoch = 0
    ag.zero_grads(params_ppg)
    ag.zero_grads(params_drg)
    while updates < cfg.max_updates:
        epoch += 1
        order = list(range(len(train)))
        random.Random(cfg.seed * 1_000_003 + epoch).shuffle(order)
        for idx in order:
            inst = train[idx]
            rng = np.random.default_rng([cfg.seed, 2_000_029, counter])
            counter += 1
            ro = rl_rollout(ppg, drg, critic, inst, vocab, cfg, rng)
            coef = ro.reward - baseline if cfg.use_baseline else ro.reward
            if cfg.use_baseline:
                baseline = cfg.baseline_decay * baseline + (1.0 - cfg.baseline_decay) * ro.reward
            if cfg.update_ppg and ro.persona_tokens:
                prefix = serialize_instance(inst, vocab, "ppg_target", ppg.config.max_len, include_target=False)
                seq = extend_with_target(prefix, ro.persona_tokens, "PARTNER")
                nll, n = sequence_nll(ppg, seq)
                ag.backward(ag.mul(nll, Tensor(coef / n if cfg.length_normalize else coef)))
            if cfg.update_drg and ro.response_tokens:
                prefix = serialize_instance(
                    inst, vocab, "drg_target", drg.config.max_len, partner_tokens=ro.persona_tokens, include_target=False
                )
                seq = extend_with_target(prefix, ro.response_tokens, "RESP")
                nll, n = sequence_nll(drg, seq)
                ag.backward(ag.mul(nll, Tensor(coef / n if cfg.length_normalize else coef)))
            pending += 1
            if pending < cfg.accumulate_every:
                continue
            pending = 0
            if cfg.update_ppg:
                _ensure_grads(params_ppg)
                ag.adam_step(params_ppg, state_ppg)
            if cfg.update_drg:
                _ensure_grads(params_drg)
                ag.adam_step(params_drg, state_drg)
            ag.zero_grads(params_ppg)
            ag.zero_grads(params_drg)
            updates += 1
            if updates % cfg.validate_every == 0 or updates == cfg.max_updates:
                record = validate(updates)
                history.append(record)
                _append_log(log_path, record)
                qualifies = (
                    record["mean_reward"] > best_reward
                    and record["perplexity_ppg"] <= budget_ppg
                    and record["perplexity_drg"] <= budget_drg
                )
                if qualifies:
                    best_reward = record["mean_reward"]
                    best_record = record
                    best_ppg = _f32_params(ppg)
                    best_drg = _f32_params(drg)
            if updates >= cfg.max_updates:
                break

    def meta(agent, updated):
        return {
            "trainer": "rl",
            "agent": agent,
            "updated": updated,
            "seed": cfg.seed,
            "eta": cfg.eta,
            "reward_mode": cfg.reward_mode,
            "max_updates": cfg.max_updates,
            "best_step": best_record["step"],
            "best_mean_reward": best_record["mean_reward"],
        }

    ckpt_ppg = Checkpoint("conditional_lm", ppg.config, vocab.to_list(), best_ppg, meta("ppg", cfg.update_ppg), history)
    ckpt_drg = Checkpoint("conditional_lm", drg.config, vocab.to_list(), best_drg, meta("drg", cfg.update_drg), history)
    return ckpt_ppg, ckpt_drg, history
