"""One causal conditional LM architecture (used twice: persona inference and
response generation), a small bidirectional critic, and the serialization of
dialogue instances into conditioned token sequences.

Serialization layout: ``[ctx] c1 <sep> c2 .. [self] s1 <sep> .. [partner] p1
<sep> .. [resp] r <eos>``. Persona-inference modes mask the partner block as
the loss target and omit ``[resp]``; response modes mask the response. The
loss mask always covers the target tokens plus the terminal ``<eos>`` and
nothing else.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autograd as ag
from . import data as D
from .autograd import Tensor


class LengthError(ValueError):
    """A sequence exceeds the model's maximum length."""


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 128
    max_len: int = 192
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size <= 0:
            raise ValueError("vocab_size must be positive")
        if min(self.d_model, self.n_layers, self.n_heads, self.d_ff) < 1:
            raise ValueError("model dimensions must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.max_len < 2:
            raise ValueError("max_len must be at least 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "LMConfig":
        return cls(**obj)


class _TransformerCore:
    """Embeddings plus pre-layer-norm blocks; subclasses choose causality."""

    causal: bool = True
    mask_self: bool = False

    def __init__(self, config: LMConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.params: dict[str, Tensor] = {}
        d, ff = config.d_model, config.d_ff

        def w(name, shape):
            self.params[name] = Tensor(rng.normal(0.0, 0.02, shape), requires_grad=True)

        def zeros(name, shape):
            self.params[name] = Tensor(np.zeros(shape), requires_grad=True)

        def ones(name, shape):
            self.params[name] = Tensor(np.ones(shape), requires_grad=True)

        w("tok_emb", (config.vocab_size, d))
        w("pos_emb", (config.max_len, d))
        for i in range(config.n_layers):
            p = f"layers.{i}."
            ones(p + "ln1.gain", (d,))
            zeros(p + "ln1.bias", (d,))
            for nm in ("wq", "wk", "wv", "wo"):
                w(p + nm, (d, d))
                zeros(p + nm.replace("w", "b"), (d,))
            ones(p + "ln2.gain", (d,))
            zeros(p + "ln2.bias", (d,))
            w(p + "ffn.w1", (d, ff))
            zeros(p + "ffn.b1", (ff,))
            w(p + "ffn.w2", (ff, d))
            zeros(p + "ffn.b2", (d,))
        ones("final_ln.gain", (d,))
        zeros("final_ln.bias", (d,))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ValueError(f"parameter name mismatch (missing {sorted(missing)}, extra {sorted(extra)})")
        for name, arr in arrays.items():
            if arr.shape != self.params[name].data.shape:
                raise ValueError(f"shape mismatch for '{name}': {arr.shape} vs {self.params[name].data.shape}")
            self.params[name].data = np.asarray(arr, dtype=np.float64).copy()

    def _block(self, x: Tensor, i: int, T: int) -> Tensor:
        P = self.params
        p = f"layers.{i}."
        d = self.config.d_model
        dh = d // self.config.n_heads
        h = ag.layer_norm(x, P[p + "ln1.gain"], P[p + "ln1.bias"])
        q = ag.add(ag.matmul(h, P[p + "wq"]), P[p + "bq"])
        k = ag.add(ag.matmul(h, P[p + "wk"]), P[p + "bk"])
        v = ag.add(ag.matmul(h, P[p + "wv"]), P[p + "bv"])
        if self.causal:
            mask = Tensor(np.triu(np.full((T, T), -1e9), k=1))
        elif self.mask_self and T > 1:
            mask = Tensor(np.diag(np.full(T, -1e9)))
        else:
            mask = None
        heads = []
        for hd in range(self.config.n_heads):
            qh = ag.narrow(q, 1, hd * dh, dh)
            kh = ag.narrow(k, 1, hd * dh, dh)
            vh = ag.narrow(v, 1, hd * dh, dh)
            scores = ag.mul(ag.matmul(qh, ag.transpose(kh)), Tensor(1.0 / math.sqrt(dh)))
            if mask is not None:
                scores = ag.add(scores, mask)
            heads.append(ag.matmul(ag.softmax(scores), vh))
        att = ag.add(ag.matmul(ag.concat(heads, axis=1), P[p + "wo"]), P[p + "bo"])
        x = ag.add(x, att)
        h2 = ag.layer_norm(x, P[p + "ln2.gain"], P[p + "ln2.bias"])
        inner = ag.gelu(ag.add(ag.matmul(h2, P[p + "ffn.w1"]), P[p + "ffn.b1"]))
        ffn = ag.add(ag.matmul(inner, P[p + "ffn.w2"]), P[p + "ffn.b2"])
        return ag.add(x, ffn)

    def hidden(self, ids) -> Tensor:
        T = len(ids)
        if T == 0:
            raise ValueError("cannot run the model on an empty sequence")
        if T > self.config.max_len:
            raise LengthError(f"sequence length {T} exceeds max_len {self.config.max_len}")
        x = ag.add(ag.embedding(self.params["tok_emb"], ids), ag.narrow(self.params["pos_emb"], 0, 0, T))
        for i in range(self.config.n_layers):
            x = self._block(x, i, T)
        return ag.layer_norm(x, self.params["final_ln.gain"], self.params["final_ln.bias"])


class ConditionalLM(_TransformerCore):
    """Causal LM over serialized dialogue sequences; PPG and DRG are instances."""

    causal = True

    def forward(self, ids) -> Tensor:
        h = self.hidden(ids)
        return ag.matmul(h, ag.transpose(self.params["tok_emb"]))


class Critic(_TransformerCore):
    """Bidirectional encoder + mean-pool + single-logit head over (persona, response).

    Attention excludes each position's own key, and queries/keys start from one
    shared amplified matrix over silent positions. Identical tokens then find
    each other immediately, so "this token recurs elsewhere" is visible to the
    pooled readout from the first step; training only has to learn which token
    recurrences matter. Without this a from-scratch 1-layer encoder plateaus
    near chance on persona/response overlap.
    """

    causal = False
    mask_self = True
    _QK_GAIN = 10.0

    def __init__(self, config: LMConfig):
        super().__init__(config)
        rng = np.random.default_rng(config.seed + 1)
        d = config.d_model
        self.params["pos_emb"].data[:] = 0.0
        for i in range(config.n_layers):
            p = f"layers.{i}."
            self.params[p + "wq"].data *= self._QK_GAIN
            self.params[p + "wk"].data = self.params[p + "wq"].data.copy()
        self.params["head.w"] = Tensor(rng.normal(0.0, 0.02, (d, 1)), requires_grad=True)
        self.params["head.b"] = Tensor(np.zeros((1, 1)), requires_grad=True)

    def logit(self, persona_tokens, response_tokens) -> Tensor:
        ids = serialize_critic_input(persona_tokens, response_tokens, self.config.max_len)
        h = self.hidden(ids)
        pooled = ag.reshape(ag.mean(h, axis=0), (1, self.config.d_model))
        out = ag.add(ag.matmul(pooled, self.params["head.w"]), self.params["head.b"])
        return ag.reshape(out, ())


def _strip_decorations(tokens) -> list[int]:
    """Drop PAD everywhere and cut at the first ⟨eos⟩ (decode output carries one)."""
    out = []
    for t in tokens:
        if t == D.EOS_ID:
            break
        if t != D.PAD_ID:
            out.append(int(t))
    return out


def serialize_critic_input(persona_tokens, response_tokens, max_len: int) -> list[int]:
    """``[persona] p <sep> [resp] r <eos>``, truncating the persona side first."""
    p = _strip_decorations(persona_tokens)
    r = _strip_decorations(response_tokens)
    if not p and not r:
        raise ValueError("critic input needs a non-empty persona or response")
    budget = max_len - 4  # two markers, one separator, one eos
    if len(r) > budget:
        r = r[:budget]
    if len(p) + len(r) > budget:
        p = p[len(p) + len(r) - budget :]
    return [D.PERSONA_ID, *p, D.SEP_ID, D.RESP_ID, *r, D.EOS_ID]


def critic_score(critic: Critic, persona_tokens, response_tokens) -> float:
    """P(same-source | persona, response) as a plain float; no graph built."""
    with ag.no_grad():
        return float(ag.sigmoid(critic.logit(persona_tokens, response_tokens)).data)


@dataclass
class SegmentedSequence:
    ids: list[int]
    loss_mask: list[bool]
    segment_of: list[str]

    def validate(self, max_len: int | None = None) -> None:
        if not (len(self.ids) == len(self.loss_mask) == len(self.segment_of)):
            raise ValueError("ids, loss_mask, segment_of must have equal length")
        masked = [i for i, m in enumerate(self.loss_mask) if m]
        if masked and masked != list(range(masked[0], masked[-1] + 1)):
            raise ValueError("loss-masked positions must be one contiguous block")
        if max_len is not None and len(self.ids) > max_len:
            raise LengthError(f"sequence length {len(self.ids)} exceeds max_len {max_len}")


SERIALIZE_MODES = ("ppg_target", "drg_target", "drg_no_partner", "multitask_ppg", "multitask_drg")

# partner block role per mode: the inference target, a conditioning block, or absent
_PARTNER_ROLE = {
    "ppg_target": "target",
    "multitask_ppg": "target",
    "drg_target": "condition",
    "drg_no_partner": None,
    "multitask_drg": None,
}


def _join_sentences(sentences, vocab: D.Vocabulary) -> list[int]:
    ids: list[int] = []
    for i, sent in enumerate(sentences):
        if i:
            ids.append(D.SEP_ID)
        ids.extend(vocab.encode(sent))
    return ids


def serialize_instance(
    inst: D.DialogueInstance,
    vocab: D.Vocabulary,
    mode: str,
    max_len: int = 256,
    partner_tokens=None,
    include_target: bool = True,
) -> SegmentedSequence:
    """Serialize one instance for training (``include_target=True``) or as a
    decode prefix ending at the target's opening marker.

    ``partner_tokens`` substitutes generated partner-persona tokens for the
    gold sentences in conditioning modes. Over-length sequences drop context
    utterances oldest-first; the target segment is never truncated.
    """
    if mode not in SERIALIZE_MODES:
        raise ValueError(f"unknown serialization mode '{mode}'")
    if not inst.context:
        raise ValueError("context must be non-empty")
    partner_role = _PARTNER_ROLE[mode]
    target_is_partner = partner_role == "target"

    if partner_tokens is not None:
        partner_ids = _strip_decorations(partner_tokens)
    else:
        partner_ids = _join_sentences(inst.partner_personas, vocab)
    self_ids = _join_sentences(inst.self_personas, vocab)
    resp_ids = vocab.encode(inst.response)
    ctx_ids = [vocab.encode(u) for u in inst.context]

    def build(n_ctx: int) -> SegmentedSequence:
        ids: list[int] = []
        mask: list[bool] = []
        tags: list[str] = []

        def put(token_ids, tag, masked=False):
            ids.extend(token_ids)
            mask.extend([masked] * len(token_ids))
            tags.extend([tag] * len(token_ids))

        put([D.CTX_ID], "MARKER")
        kept = ctx_ids[len(ctx_ids) - n_ctx :]
        for i, u in enumerate(kept):
            if i:
                put([D.SEP_ID], "CTX")
            put(u, "CTX")
        put([D.SELF_ID], "MARKER")
        put(self_ids, "SELF")
        if partner_role is not None:
            put([D.PARTNER_ID], "MARKER")
            if target_is_partner:
                if include_target:
                    put(partner_ids, "PARTNER", masked=True)
                    put([D.EOS_ID], "PARTNER", masked=True)
                return SegmentedSequence(ids, mask, tags)
            put(partner_ids, "PARTNER")
        put([D.RESP_ID], "MARKER")
        if include_target:
            put(resp_ids, "RESP", masked=True)
            put([D.EOS_ID], "RESP", masked=True)
        return SegmentedSequence(ids, mask, tags)

    for n_ctx in range(len(ctx_ids), -1, -1):
        seq = build(n_ctx)
        if len(seq.ids) <= max_len:
            seq.validate(max_len)
            return seq
    raise LengthError(
        f"serialized length {len(build(0).ids)} exceeds max_len {max_len} even with all context dropped"
    )


def sequence_nll(lm: ConditionalLM, seq: SegmentedSequence) -> tuple[Tensor, int]:
    """Sum of −log P(id_t | prefix) in nats over masked positions, plus count."""
    masked = [t for t, m in enumerate(seq.loss_mask) if m]
    if not masked:
        raise ValueError("sequence has no loss-masked positions")
    if masked[0] == 0:
        raise ValueError("cannot score a masked token at position 0")
    a, b = masked[0], masked[-1] + 1
    logits = lm.forward(seq.ids)
    rows = ag.narrow(logits, 0, a - 1, b - a)
    ce_mean = ag.softmax_cross_entropy(rows, seq.ids[a:b])
    return ag.mul(ce_mean, Tensor(float(b - a))), b - a


@dataclass
class DecodeResult:
    tokens: list[int]
    logp: float


def decode(
    lm: ConditionalLM,
    prefix: SegmentedSequence,
    max_new: int,
    greedy: bool = True,
    temperature: float = 1.0,
    rng: np.random.Generator | None = None,
) -> DecodeResult:
    """Autoregressive continuation of a prefix ending at a target marker.

    Returns emitted tokens (terminal ⟨eos⟩ included when produced) and their
    summed log-probability under the decoding-time distribution. PAD is never
    emitted. Stops at ⟨eos⟩, ``max_new`` tokens, or the model's max_len.
    """
    if max_new <= 0:
        raise ValueError("max_new must be positive")
    if not prefix.ids or prefix.ids[-1] not in (D.PARTNER_ID, D.RESP_ID):
        raise ValueError("decode prefix must end at a target marker")
    if not greedy:
        if rng is None:
            raise ValueError("sampling requires an rng")
        if temperature <= 0:
            raise ValueError("temperature must be positive")

    ids = list(prefix.ids)
    out: list[int] = []
    logp = 0.0
    with ag.no_grad():
        for _ in range(max_new):
            if len(ids) >= lm.config.max_len:
                break
            row = lm.forward(ids).data[-1].copy()
            row[D.PAD_ID] = -1e30
            if greedy:
                z = row - row.max()
                probs = np.exp(z)
                probs /= probs.sum()
                tok = int(np.argmax(row))
            else:
                z = (row - row.max()) / temperature
                probs = np.exp(z)
                probs /= probs.sum()
                tok = int(rng.choice(len(probs), p=probs))
            logp += float(np.log(probs[tok]))
            out.append(tok)
            ids.append(tok)
            if tok == D.EOS_ID:
                break
    return DecodeResult(out, logp)


def extend_with_target(prefix: SegmentedSequence, tokens, tag: str) -> SegmentedSequence:
    """Append sampled target tokens to a decode prefix as the masked block."""
    toks = [int(t) for t in tokens]
    return SegmentedSequence(
        prefix.ids + toks,
        prefix.loss_mask + [True] * len(toks),
        prefix.segment_of + [tag] * len(toks),
    )
