"""Automatic dialogue metrics and the evaluation harness.

Perplexity is exp of the per-token masked NLL pooled over a corpus.
Distinct-n pools n-grams across all responses (unique / total), which is what
makes corpus-level ratios small. ROUGE-L is the LCS-based F1. METEOR here is
the exact-match stage only: no stemming or synonym tables, so absolute values
are not comparable to implementations that use them. Chunk minimization is
exhaustive up to 8 matches and greedy left-to-right beyond.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import data as D
from .models import ConditionalLM, decode, sequence_nll, serialize_instance


def perplexity(lm, instances, mode: str, vocab: D.Vocabulary) -> float:
    """exp(total masked NLL / total masked tokens) over the corpus."""
    if not instances:
        raise ValueError("perplexity needs a non-empty corpus")
    total_nll = 0.0
    total_tokens = 0
    from . import autograd as ag

    with ag.no_grad():
        for inst in instances:
            seq = serialize_instance(inst, vocab, mode, lm.config.max_len)
            nll, n = sequence_nll(lm, seq)
            total_nll += nll.item()
            total_tokens += n
    if total_tokens == 0:
        raise ValueError("perplexity needs at least one target token")
    return float(np.exp(total_nll / total_tokens))


def _ngrams(tokens: Sequence, n: int):
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def distinct_n(responses: Sequence[Sequence], n: int) -> float:
    """Unique n-grams across ALL responses divided by total n-grams emitted."""
    if n < 1:
        raise ValueError("n must be >= 1")
    pool: list[tuple] = []
    for resp in responses:
        pool.extend(_ngrams(list(resp), n))
    if not pool:
        raise ValueError(f"no {n}-grams in the response pool")
    return len(set(pool)) / len(pool)


def lcs_length(a: Sequence, b: Sequence) -> int:
    """Classic O(len(a)*len(b)) longest-common-subsequence table."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence, reference: Sequence) -> float:
    """LCS F1: P = LCS/|cand|, R = LCS/|ref|, 2PR/(P+R); 0 when LCS is 0."""
    if not reference:
        raise ValueError("rouge_l needs a non-empty reference")
    if not candidate:
        return 0.0
    lcs = lcs_length(list(candidate), list(reference))
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return 2 * p * r / (p + r)


_EXHAUSTIVE_MATCH_LIMIT = 8


def _max_matches(cand: list, ref: list) -> int:
    total = 0
    for tok in set(cand):
        total += min(cand.count(tok), ref.count(tok))
    return total


def _chunks_of(pairs: list[tuple[int, int]]) -> int:
    """Chunk count of an alignment given (cand_pos, ref_pos) pairs in cand order."""
    chunks = 0
    prev = None
    for c, r in pairs:
        if prev is None or c != prev[0] + 1 or r != prev[1] + 1:
            chunks += 1
        prev = (c, r)
    return chunks


def _min_chunks_exhaustive(cand: list, ref: list, m: int) -> int:
    """Minimal chunk count over all maximal alignments; branch-and-bound DFS."""
    best = m + 1

    def dfs(ci: int, used_mask: int, matches: int, pairs: list[tuple[int, int]]):
        nonlocal best
        remaining = len(cand) - ci
        if matches + remaining < m:
            return
        if matches == m:
            best = min(best, _chunks_of(pairs))
            return
        if ci == len(cand):
            return
        lower = _chunks_of(pairs) if pairs else 0
        if lower - 1 >= best:
            return
        tok = cand[ci]
        for ri in range(len(ref)):
            if ref[ri] == tok and not used_mask & (1 << ri):
                pairs.append((ci, ri))
                dfs(ci + 1, used_mask | (1 << ri), matches + 1, pairs)
                pairs.pop()
        dfs(ci + 1, used_mask, matches, pairs)

    dfs(0, 0, 0, [])
    return best


def _chunks_greedy(cand: list, ref: list) -> int:
    """Left-to-right maximal matching, preferring to extend the current chunk."""
    available: dict = {}
    for ri, tok in enumerate(ref):
        available.setdefault(tok, []).append(ri)
    pairs = []
    prev_ref = None
    for ci, tok in enumerate(cand):
        slots = available.get(tok)
        if not slots:
            continue
        if prev_ref is not None and pairs and pairs[-1][0] == ci - 1 and prev_ref + 1 in slots:
            ri = prev_ref + 1
        else:
            ri = slots[0]
        slots.remove(ri)
        pairs.append((ci, ri))
        prev_ref = ri
    return _chunks_of(pairs)


def meteor(candidate: Sequence, reference: Sequence) -> float:
    """Exact-match METEOR: F_mean = 10PR/(R+9P), penalty = 0.5*(chunks/m)^3."""
    if not reference:
        raise ValueError("meteor needs a non-empty reference")
    cand = list(candidate)
    ref = list(reference)
    if not cand:
        return 0.0
    m = _max_matches(cand, ref)
    if m == 0:
        return 0.0
    if m <= _EXHAUSTIVE_MATCH_LIMIT:
        chunks = _min_chunks_exhaustive(cand, ref, m)
    else:
        chunks = _chunks_greedy(cand, ref)
    p = m / len(cand)
    r = m / len(ref)
    f_mean = 10 * p * r / (r + 9 * p)
    penalty = 0.5 * (chunks / m) ** 3
    return f_mean * (1.0 - penalty)


@dataclass
class System:
    """One evaluated configuration: a responder plus optional persona inference.

    With ``persona_model`` set, partner personas are generated greedily and
    substituted for gold ones at inference (the two-stage pipeline). Without
    it, ``response_mode`` decides whether the responder sees gold partner
    personas (drg_target) or none (drg_no_partner).
    """

    name: str
    responder: ConditionalLM
    response_mode: str = "drg_target"
    persona_model: ConditionalLM | None = None


@dataclass
class SystemRow:
    name: str
    perplexity: float
    rouge_l: float  # percent
    meteor: float  # percent
    distinct_1: float
    distinct_2: float


@dataclass
class PersonaRow:
    name: str
    distinct_1: float
    distinct_2: float


@dataclass
class EvalReport:
    rows: list[SystemRow] = field(default_factory=list)
    persona_rows: list[PersonaRow] = field(default_factory=list)
    generations: list[dict] = field(default_factory=list)

    def to_json_dict(self, metrics: set[str] | None = None) -> dict:
        keep = _metric_columns(metrics)
        rows = []
        for r in self.rows:
            row = {"system": r.name}
            for col in keep:
                row[col] = getattr(r, col)
            rows.append(row)
        return {
            "systems": rows,
            "persona_diversity": [
                {"system": p.name, "distinct_1": p.distinct_1, "distinct_2": p.distinct_2}
                for p in self.persona_rows
            ],
        }

    def to_text(self, metrics: set[str] | None = None) -> str:
        keep = _metric_columns(metrics)
        headers = ["system"] + keep
        table = [headers]
        for r in self.rows:
            row = [r.name]
            for col in keep:
                v = getattr(r, col)
                row.append(f"{v:.4f}" if col != "perplexity" else f"{v:.3f}")
            table.append(row)
        widths = [max(len(line[i]) for line in table) for i in range(len(headers))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip() for line in table]
        if self.persona_rows:
            lines.append("")
            lines.append("persona diversity")
            ptab = [["system", "distinct_1", "distinct_2"]]
            for p in self.persona_rows:
                ptab.append([p.name, f"{p.distinct_1:.4f}", f"{p.distinct_2:.4f}"])
            pw = [max(len(line[i]) for line in ptab) for i in range(3)]
            lines.extend("  ".join(c.ljust(w) for c, w in zip(line, pw)).rstrip() for line in ptab)
        return "\n".join(lines) + "\n"


_ALL_METRICS = ("perplexity", "rouge_l", "meteor", "distinct_1", "distinct_2")


def _metric_columns(metrics: set[str] | None) -> list[str]:
    if metrics is None:
        return list(_ALL_METRICS)
    bad = metrics - set(_ALL_METRICS)
    if bad:
        raise ValueError(f"unknown metrics: {sorted(bad)}")
    return [m for m in _ALL_METRICS if m in metrics]


def score_generations(references: list[list[int]], candidates: list[list[int]]) -> dict:
    """Mean ROUGE-L / METEOR (percent) and pooled distinct-1/2 for one system."""
    if len(references) != len(candidates):
        raise ValueError("reference/candidate count mismatch")
    rouge = float(np.mean([rouge_l(c, r) for c, r in zip(candidates, references)]))
    met = float(np.mean([meteor(c, r) for c, r in zip(candidates, references)]))
    return {
        "rouge_l": 100.0 * rouge,
        "meteor": 100.0 * met,
        "distinct_1": distinct_n(candidates, 1),
        "distinct_2": distinct_n(candidates, 2),
    }


def _strip_eos(tokens: list[int]) -> list[int]:
    return [t for t in tokens if t not in (D.EOS_ID, D.PAD_ID)]


def evaluate_suite(
    systems: Sequence[System],
    test_instances,
    vocab: D.Vocabulary,
    max_new_persona: int = 48,
    max_new_response: int = 40,
) -> EvalReport:
    """Greedy-decode every system over the test corpus and score the grid.

    Persona diversity rows cover each pipeline system plus the gold partner
    personas for reference. All generations are dumped for audit.
    """
    if not test_instances:
        raise ValueError("evaluate_suite needs a non-empty test corpus")
    report = EvalReport()
    gold_refs = [vocab.encode(inst.response) for inst in test_instances]

    for system in systems:
        nll_sum = 0.0
        tok_sum = 0
        responses: list[list[int]] = []
        personas: list[list[int]] = []
        for idx, inst in enumerate(test_instances):
            partner_tokens = None
            persona_text = ""
            if system.persona_model is not None:
                p_prefix = serialize_instance(
                    inst, vocab, "ppg_target", system.persona_model.config.max_len, include_target=False
                )
                p_dec = decode(system.persona_model, p_prefix, max_new_persona)
                partner_tokens = p_dec.tokens
                personas.append(_strip_eos(p_dec.tokens))
                persona_text = vocab.decode(p_dec.tokens)
            mode = "drg_target" if partner_tokens is not None else system.response_mode
            seq = serialize_instance(
                inst, vocab, mode, system.responder.config.max_len, partner_tokens=partner_tokens
            )
            from . import autograd as ag

            with ag.no_grad():
                nll, n = sequence_nll(system.responder, seq)
            nll_sum += nll.item()
            tok_sum += n
            prefix = serialize_instance(
                inst,
                vocab,
                mode,
                system.responder.config.max_len,
                partner_tokens=partner_tokens,
                include_target=False,
            )
            r_dec = decode(system.responder, prefix, max_new_response)
            responses.append(_strip_eos(r_dec.tokens))
            report.generations.append(
                {
                    "instance": idx,
                    "system": system.name,
                    "persona": persona_text,
                    "response": vocab.decode(r_dec.tokens),
                }
            )
        scores = score_generations(gold_refs, responses)
        report.rows.append(
            SystemRow(
                name=system.name,
                perplexity=float(np.exp(nll_sum / tok_sum)),
                rouge_l=scores["rouge_l"],
                meteor=scores["meteor"],
                distinct_1=scores["distinct_1"],
                distinct_2=scores["distinct_2"],
            )
        )
        if personas:
            report.persona_rows.append(
                PersonaRow(system.name, distinct_n(personas, 1), distinct_n(personas, 2))
            )

    gold_personas = [
        [t for s in inst.partner_personas for t in vocab.encode(s)] for inst in test_instances
    ]
    if any(gold_personas):
        report.persona_rows.append(
            PersonaRow("gold_partner_personas", distinct_n(gold_personas, 1), distinct_n(gold_personas, 2))
        )
    return report
