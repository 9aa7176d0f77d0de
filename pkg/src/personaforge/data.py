"""Tokenizer, vocabulary, dialogue corpus I/O, and critic dataset construction.

A dialogue instance carries the responder's own persona sentences, the
conversation partner's persona sentences, the alternating context (partner
speaks last), and the gold response. The critic dataset pairs each instance's
own personas with its response as a positive and derives two negatives from
every disjoint instance pair by swapping responses.
"""

from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

PAD, UNK, SEP, EOS = "<pad>", "<unk>", "<sep>", "<eos>"
CTX_MARK, SELF_MARK, PARTNER_MARK, RESP_MARK, PERSONA_MARK = (
    "[ctx]",
    "[self]",
    "[partner]",
    "[resp]",
    "[persona]",
)
RESERVED_TOKENS = (PAD, UNK, SEP, EOS, CTX_MARK, SELF_MARK, PARTNER_MARK, RESP_MARK, PERSONA_MARK)
PAD_ID, UNK_ID, SEP_ID, EOS_ID, CTX_ID, SELF_ID, PARTNER_ID, RESP_ID, PERSONA_ID = range(9)

_TERMINAL_PUNCT = frozenset(".,!?")

CORPUS_KEYS = ("self_personas", "partner_personas", "context", "response")


class CorpusError(ValueError):
    """A corpus file violates the expected shape."""


def split_text(text: str) -> list[str]:
    """Lowercase, split on whitespace, detach terminal . , ! ? as own tokens."""
    out: list[str] = []
    for word in text.lower().split():
        tail: list[str] = []
        while word and word[-1] in _TERMINAL_PUNCT:
            tail.append(word[-1])
            word = word[:-1]
        if word:
            out.append(word)
        out.extend(reversed(tail))
    return out


class Vocabulary:
    """Dense token↔id bijection with a fixed reserved block at ids 0..8."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise ValueError("vocabulary must start with the reserved token block")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def encode(self, text: str) -> list[int]:
        return [self.id_of(t) for t in split_text(text)]

    def encode_words(self, words: Iterable[str]) -> list[int]:
        return [self.id_of(w) for w in words]

    def decode(self, ids: Iterable[int], keep_special: bool = False) -> str:
        words = []
        for i in ids:
            tok = self.tokens[i]
            if not keep_special and i < len(RESERVED_TOKENS):
                continue
            words.append(tok)
        return " ".join(words)

    def to_list(self) -> list[str]:
        return list(self.tokens)


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return vocab.encode(text)


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    return vocab.decode(ids)


@dataclass
class DialogueInstance:
    self_personas: list[str]
    partner_personas: list[str]
    context: list[str]
    response: str

    def validate(self) -> None:
        for name in ("self_personas", "partner_personas", "context"):
            val = getattr(self, name)
            if not isinstance(val, list) or any(not isinstance(s, str) for s in val):
                raise ValueError(f"{name} must be a list of strings")
        if not isinstance(self.response, str):
            raise ValueError("response must be a string")
        if not self.context:
            raise ValueError("context must be non-empty")
        if not self.response:
            raise ValueError("response must be non-empty")
        # only the partner side may be persona-less (cold-start inference)
        if not self.self_personas:
            raise ValueError("self_personas must be non-empty")


def build_vocab(instances: Sequence[DialogueInstance], min_count: int = 1) -> Vocabulary:
    """Corpus vocabulary: reserved block, then frequency desc, ties lexicographic."""
    if not instances:
        raise ValueError("build_vocab needs a non-empty corpus")
    counts: Counter[str] = Counter()
    for inst in instances:
        for text in (*inst.self_personas, *inst.partner_personas, *inst.context, inst.response):
            counts.update(split_text(text))
    reserved = set(RESERVED_TOKENS)
    kept = sorted(
        ((tok, n) for tok, n in counts.items() if n >= min_count and tok not in reserved),
        key=lambda kv: (-kv[1], kv[0]),
    )
    return Vocabulary(list(RESERVED_TOKENS) + [tok for tok, _ in kept])


def _instance_from_obj(obj: dict, lineno: int) -> DialogueInstance:
    for key in CORPUS_KEYS:
        if key not in obj:
            raise CorpusError(f"line {lineno}: missing key '{key}'")
    inst = DialogueInstance(
        self_personas=obj["self_personas"],
        partner_personas=obj["partner_personas"],
        context=obj["context"],
        response=obj["response"],
    )
    try:
        inst.validate()
    except ValueError as exc:
        raise CorpusError(f"line {lineno}: {exc}") from None
    return inst


def load_corpus(path) -> list[DialogueInstance]:
    instances = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            instances.append(_instance_from_obj(obj, lineno))
    return instances


def write_corpus(path, instances: Sequence[DialogueInstance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            obj = {
                "self_personas": inst.self_personas,
                "partner_personas": inst.partner_personas,
                "context": inst.context,
                "response": inst.response,
            }
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")


@dataclass
class CriticExample:
    persona_text: str
    response_text: str
    label: int


def build_critic_dataset(instances: Sequence[DialogueInstance], seed: int = 0) -> list[CriticExample]:
    """One positive per instance; swapped-response negatives from disjoint pairs.

    A seeded shuffle is matched into consecutive pairs so every instance is
    negative-paired at most once; an odd leftover contributes its positive
    only. Counts come out balanced within one example.
    """
    if len(instances) < 2:
        raise ValueError("build_critic_dataset needs at least 2 instances")
    rng = random.Random(seed)
    examples = [
        CriticExample(" ".join(inst.self_personas), inst.response, 1) for inst in instances
    ]
    order = list(range(len(instances)))
    rng.shuffle(order)
    for a, b in zip(order[0::2], order[1::2]):
        ia, ib = instances[a], instances[b]
        examples.append(CriticExample(" ".join(ia.self_personas), ib.response, 0))
        examples.append(CriticExample(" ".join(ib.self_personas), ia.response, 0))
    rng.shuffle(examples)
    return examples


def write_critic_dataset(path, examples: Sequence[CriticExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            obj = {"persona": ex.persona_text, "response": ex.response_text, "label": ex.label}
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")


def load_critic_dataset(path) -> list[CriticExample]:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            for key in ("persona", "response", "label"):
                if key not in obj:
                    raise CorpusError(f"line {lineno}: missing key '{key}'")
            if obj["label"] not in (0, 1):
                raise CorpusError(f"line {lineno}: label must be 0 or 1")
            examples.append(CriticExample(obj["persona"], obj["response"], int(obj["label"])))
    return examples


def split_on_sep(ids: Sequence[int]) -> list[list[int]]:
    """Split an id stream on ⟨sep⟩, dropping empty segments."""
    segments: list[list[int]] = [[]]
    for i in ids:
        if i == SEP_ID:
            segments.append([])
        else:
            segments[-1].append(i)
    return [s for s in segments if s]
