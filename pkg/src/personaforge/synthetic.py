"""Deterministic synthetic persona-dialogue corpus.

Each instance hides 2-3 partner attributes inside the context via reveal
templates, declares the same attributes in the partner persona block (in
canonical slot order), and builds the gold response as one acknowledgement
per partner attribute, in that same slot order, followed by a clause about
the responder's own first attribute. The order reveals appear in is a random
permutation the targets never depend on, so both targets need attribute
presence and value binding, not reveal-order reconstruction. Contexts
alternate speakers with the partner speaking last; the responder's own turns
are small-talk fillers. Reproducing every acknowledged value straight from
the scattered context reveals compounds per-value errors, while the persona
block presents the same values adjacent and already ordered.

Everything is derived from per-instance RNG streams seeded by
(seed, split, index, attempt), so output is byte-stable and the train/valid/
test splits can be kept disjoint in attribute-combination space.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .data import DialogueInstance, split_text, write_corpus

SLOT_ORDER = ("hobby", "job", "pet", "city", "food")

DEFAULT_ATTRIBUTES: dict[str, tuple[str, ...]] = {
    "hobby": ("ski", "paint", "dance", "hike", "fish", "knit"),
    "job": ("nurse", "teacher", "farmer", "pilot", "barber", "chef"),
    "pet": ("dog", "cat", "parrot", "hamster", "turtle", "rabbit"),
    "city": ("paris", "tokyo", "cairo", "oslo", "lima", "denver"),
    "food": ("pizza", "sushi", "tacos", "noodles", "salad", "curry"),
}

DECLARATIONS = {
    "hobby": "i like to {v} .",
    "job": "i work as a {v} .",
    "pet": "i have a pet {v} .",
    "city": "i live in {v} .",
    "food": "my favorite food is {v} .",
}

REVEALS = {
    "hobby": (
        "i spent all sunday trying to {v} again .",
        "honestly nothing beats a chance to {v} .",
        "my friends finally convinced me to {v} with them .",
    ),
    "job": (
        "work keeps me busy since i am a {v} .",
        "being a {v} takes most of my week .",
        "long shifts again , such is life for a {v} .",
    ),
    "pet": (
        "my {v} kept me up half the night .",
        "i just got home to feed my {v} .",
        "you should see the mess my {v} made today .",
    ),
    "city": (
        "life in {v} has been good lately .",
        "the weather in {v} was lovely today .",
        "traffic in {v} drove me crazy this morning .",
    ),
    "food": (
        "i could eat {v} every single day .",
        "i made {v} for dinner yesterday .",
        "there is a new place nearby that serves great {v} .",
    ),
}

RESPONSES = {
    "hobby": "maybe we could {v} together sometime !",
    "job": "being a {v} must keep you busy !",
    "pet": "your {v} sounds adorable !",
    "city": "i would love to visit {v} someday !",
    "food": "we should grab some {v} together !",
}

SELF_CLAUSES = {
    "hobby": "as for me , i like to {v} .",
    "job": "as for me , i work as a {v} .",
    "pet": "as for me , i have a pet {v} .",
    "city": "as for me , i live in {v} .",
    "food": "as for me , my favorite food is {v} .",
}

PARTNER_FILLERS = (
    "how have you been lately ?",
    "i had a pretty long day today .",
    "tell me something new about you .",
    "time really flies these days .",
)

SELF_FILLERS = (
    "i hear you , it happens .",
    "oh that is interesting to hear .",
    "things are mostly quiet on my end .",
    "same old routine over here .",
)

ATTRS_PER_SIDE = (2, 3)

_MAX_ATTEMPTS = 200


class SyntheticError(ValueError):
    """The requested corpus cannot be generated under the spec."""


@dataclass
class SyntheticSpec:
    n_train: int = 2000
    n_valid: int = 200
    n_test: int = 200
    attributes: dict[str, tuple[str, ...]] = field(
        default_factory=lambda: dict(DEFAULT_ATTRIBUTES)
    )
    utterances_per_context: tuple[int, int] = (5, 7)
    seed: int = 7

    def validate(self) -> None:
        if min(self.n_train, self.n_valid, self.n_test) < 0:
            raise SyntheticError("instance counts must be non-negative")
        lo, hi = self.utterances_per_context
        if lo < 3 or hi < lo:
            raise SyntheticError("utterances_per_context must satisfy 3 <= lo <= hi")
        if len(self.attributes) < max(ATTRS_PER_SIDE):
            raise SyntheticError(f"need at least {max(ATTRS_PER_SIDE)} attribute slots")
        seen: dict[str, str] = {}
        for slot, values in self.attributes.items():
            if slot not in DECLARATIONS:
                raise SyntheticError(f"no templates for slot '{slot}'")
            if not values:
                raise SyntheticError(f"slot '{slot}' has no values")
            for v in values:
                if split_text(v) != [v]:
                    raise SyntheticError(f"value '{v}' must be a single normalized token")
                if v in seen:
                    raise SyntheticError(f"value '{v}' appears in slots '{seen[v]}' and '{slot}'")
                seen[v] = slot


def combination_space(spec: SyntheticSpec) -> int:
    """Number of distinct partner attribute combinations the spec can produce."""
    slots = list(spec.attributes)
    total = 0
    for k in ATTRS_PER_SIDE:
        for subset in itertools.combinations(slots, k):
            prod = 1
            for slot in subset:
                prod *= len(spec.attributes[slot])
            total += prod
    return total


def _slot_rank(slot: str) -> int:
    return SLOT_ORDER.index(slot) if slot in SLOT_ORDER else len(SLOT_ORDER)


def _pick(rng, options):
    return options[int(rng.integers(len(options)))]


def _sample_side(spec: SyntheticSpec, rng, limit: int) -> list[tuple[str, str]]:
    """2-3 (slot, value) pairs in slot order, at most ``limit`` of them."""
    slots = sorted(spec.attributes, key=_slot_rank)
    k = min(int(rng.integers(ATTRS_PER_SIDE[0], ATTRS_PER_SIDE[-1] + 1)), limit, len(slots))
    chosen = sorted(int(i) for i in rng.choice(len(slots), size=k, replace=False))
    return [(slots[i], _pick(rng, spec.attributes[slots[i]])) for i in chosen]


def _make_instance(spec: SyntheticSpec, rng) -> tuple[DialogueInstance, tuple]:
    lo, hi = spec.utterances_per_context
    n_utts = int(rng.integers(lo, hi + 1))
    partner_turns = [i for i in range(n_utts) if (n_utts - 1 - i) % 2 == 0]

    partner_attrs = _sample_side(spec, rng, limit=len(partner_turns))
    appearance = [int(i) for i in rng.permutation(len(partner_attrs))]
    revealed = [partner_attrs[i] for i in appearance]
    reveal_turns = sorted(int(i) for i in rng.choice(len(partner_turns), size=len(revealed), replace=False))
    turn_attr = {partner_turns[t]: attr for t, attr in zip(reveal_turns, revealed)}

    context = []
    for i in range(n_utts):
        if i in turn_attr:
            slot, value = turn_attr[i]
            context.append(_pick(rng, REVEALS[slot]).format(v=value))
        elif i in partner_turns:
            context.append(_pick(rng, PARTNER_FILLERS))
        else:
            context.append(_pick(rng, SELF_FILLERS))

    self_attrs = _sample_side(spec, rng, limit=len(spec.attributes))
    self_slot, self_value = self_attrs[0]
    # the response acknowledges every partner attribute in slot order, then
    # adds one clause about the responder; reproducing all of them from raw
    # context compounds per-value errors, while the persona block keeps the
    # same values adjacent and in the same order the response needs them
    parts = [RESPONSES[s].format(v=v) for s, v in partner_attrs]
    parts.append(SELF_CLAUSES[self_slot].format(v=self_value))
    response = " ".join(parts)

    inst = DialogueInstance(
        self_personas=[DECLARATIONS[s].format(v=v) for s, v in self_attrs],
        partner_personas=[DECLARATIONS[s].format(v=v) for s, v in partner_attrs],
        context=context,
        response=response,
    )
    return inst, tuple(sorted(partner_attrs))


def generate_synthetic_corpus(
    spec: SyntheticSpec,
) -> tuple[list[DialogueInstance], list[DialogueInstance], list[DialogueInstance]]:
    """Train/valid/test instance lists, disjoint in partner-combination space."""
    spec.validate()
    space = combination_space(spec)
    if (spec.n_valid or spec.n_test) and spec.n_train >= space:
        raise SyntheticError(
            f"n_train={spec.n_train} saturates the combination space ({space}); "
            "no disjoint valid/test split exists"
        )

    seen: set[tuple] = set()
    splits: list[list[DialogueInstance]] = []
    for code, count in enumerate((spec.n_train, spec.n_valid, spec.n_test)):
        require_unseen = code > 0
        out = []
        keys: list[tuple] = []
        for i in range(count):
            for attempt in range(_MAX_ATTEMPTS):
                rng = np.random.default_rng([spec.seed, code, i, attempt])
                inst, key = _make_instance(spec, rng)
                if not require_unseen or key not in seen:
                    break
            else:
                raise SyntheticError(
                    f"no unseen attribute combination found after {_MAX_ATTEMPTS} attempts "
                    f"(space {space}, used {len(seen)})"
                )
            out.append(inst)
            keys.append(key)
            if code == 0:
                seen.add(key)
        if code == 1:
            # valid keys join the exclusion set only after the whole split exists,
            # so duplicates inside a split stay legal while cross-split reuse is not
            seen.update(keys)
        splits.append(out)
    return splits[0], splits[1], splits[2]


def write_synthetic_corpus(spec: SyntheticSpec, out_dir) -> dict[str, str]:
    """Generate and write train/valid/test JSON-Lines files into ``out_dir``."""
    import os

    train, valid, test = generate_synthetic_corpus(spec)
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for name, insts in (("train", train), ("valid", valid), ("test", test)):
        path = os.path.join(out_dir, f"{name}.jsonl")
        write_corpus(path, insts)
        paths[name] = path
    return paths


def declared_attributes(sentences) -> list[tuple[str, str]]:
    """Parse declaration-shaped sentences back into (slot, value) pairs.

    Tolerant of junk: sentences that match no declaration template, or whose
    value hole holds anything but one token, are skipped.
    """
    out = []
    for sentence in sentences:
        norm = " ".join(split_text(sentence))
        for slot, template in DECLARATIONS.items():
            prefix, suffix = template.split("{v}")
            prefix, suffix = prefix.strip(), suffix.strip()
            if not norm.startswith(prefix + " ") or not norm.endswith(" " + suffix):
                continue
            value = norm[len(prefix) : len(norm) - len(suffix)].strip()
            if value and " " not in value:
                out.append((slot, value))
            break
    return out


def referenced_partner_attributes(inst: DialogueInstance) -> list[tuple[str, str]]:
    """The partner attributes the gold response acknowledges, in block order."""
    attrs = declared_attributes(inst.partner_personas)
    if not attrs:
        raise ValueError("instance has no parseable partner attributes")
    return attrs


def mentions_value(text: str, value: str) -> bool:
    return value in split_text(text)
