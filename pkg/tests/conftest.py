"""Session fixtures for the acceptance gate: the desk-scale experiment grid.

Both fixtures train real models from scratch and take minutes, so they are
session-scoped and lazy: only the acceptance module requests them.
"""

import time
import types

import pytest

from personaforge import data as D
from personaforge import metrics as M
from personaforge import training as tr
from personaforge.models import ConditionalLM, LMConfig, decode, serialize_instance
from personaforge.synthetic import (
    DEFAULT_ATTRIBUTES,
    SyntheticSpec,
    declared_attributes,
    generate_synthetic_corpus,
)

DESK_CORPUS_SEED = 7
DESK_ETA = 1e-3
DESK_BATCH = 4
DESK_PPG_EPOCHS = 28
DESK_DRG_EPOCHS = 20
DESK_CRITIC_EPOCHS = 6
MAX_NEW_PERSONA = 48
MAX_NEW_RESPONSE = 40

RL_SEEDS = (0, 1, 2)

ALL_VALUES = frozenset(v for vals in DEFAULT_ATTRIBUTES.values() for v in vals)


def generated_persona_tokens(ppg, inst, vocab):
    prefix = serialize_instance(inst, vocab, "ppg_target", ppg.config.max_len, include_target=False)
    return decode(ppg, prefix, MAX_NEW_PERSONA).tokens


def response_covers(model, inst, vocab, mode, values, partner_tokens=None):
    """True when the generated reply names every value in ``values``."""
    prefix = serialize_instance(
        inst, vocab, mode, model.config.max_len,
        partner_tokens=partner_tokens, include_target=False,
    )
    toks = decode(model, prefix, MAX_NEW_RESPONSE).tokens
    return values <= set(vocab.decode(toks).split())


@pytest.fixture(scope="session")
def desk():
    """Seed-7 corpus, supervised PPG/DRG/no-partner checkpoints, eval numbers.

    Timed end to end: the wall-clock budget is itself an acceptance criterion.
    """
    t0 = time.monotonic()
    spec = SyntheticSpec(seed=DESK_CORPUS_SEED)
    train, valid, test = generate_synthetic_corpus(spec)
    vocab = D.build_vocab(train)

    def fit(role, epochs):
        cfg = tr.SLConfig(eta=DESK_ETA, epochs=epochs, batch_size=DESK_BATCH, seed=0)
        return tr.train_supervised(
            role, train, valid, vocab, cfg,
            model_config=LMConfig(vocab_size=len(vocab), seed=0),
        )

    ppg_ckpt = fit("ppg", DESK_PPG_EPOCHS)
    drg_ckpt = fit("drg", DESK_DRG_EPOCHS)
    nop_ckpt = fit("e2e_no_partner", DESK_DRG_EPOCHS)

    ppg = ppg_ckpt.build_model()
    drg = drg_ckpt.build_model()
    nop = nop_ckpt.build_model()

    untrained_ppl = M.perplexity(
        ConditionalLM(LMConfig(vocab_size=len(vocab), seed=0)), valid, "drg_target", vocab
    )
    drg_ppl = M.perplexity(drg, valid, "drg_target", vocab)

    extracted = pipeline_hits = baseline_hits = 0
    for inst in test:
        gold_vals = {v for _, v in declared_attributes(inst.partner_personas)}
        p_hat = generated_persona_tokens(ppg, inst, vocab)
        extracted += gold_vals <= set(vocab.decode(p_hat).split())
        pipeline_hits += response_covers(drg, inst, vocab, "drg_target", gold_vals, partner_tokens=p_hat)
        baseline_hits += response_covers(nop, inst, vocab, "drg_no_partner", gold_vals)

    n = len(test)
    return types.SimpleNamespace(
        vocab=vocab,
        train=train,
        valid=valid,
        test=test,
        ppg_ckpt=ppg_ckpt,
        drg_ckpt=drg_ckpt,
        nop_ckpt=nop_ckpt,
        untrained_ppl=untrained_ppl,
        drg_ppl=drg_ppl,
        extraction=extracted / n,
        pipeline_acc=pipeline_hits / n,
        baseline_acc=baseline_hits / n,
        runtime_s=time.monotonic() - t0,
    )


@pytest.fixture(scope="session")
def rl_grid(desk):
    """Critic plus a 3-seed reinforce grid: both agents and each single agent."""
    cfg = tr.SLConfig(eta=1e-3, epochs=DESK_CRITIC_EPOCHS, batch_size=8, seed=0)
    pairs = D.build_critic_dataset(desk.train, seed=0)
    critic_ckpt = tr.train_critic(
        pairs, desk.vocab, cfg,
        model_config=LMConfig(vocab_size=len(desk.vocab), n_layers=1, seed=0),
    )

    runs = {}
    for seed in RL_SEEDS:
        for label, up, ud in (("both", True, True), ("ppg_only", True, False), ("drg_only", False, True)):
            rl_cfg = tr.RLConfig(seed=seed, update_ppg=up, update_drg=ud)
            ppg_rl, drg_rl, history = tr.rl_train(
                desk.ppg_ckpt.build_model(), desk.drg_ckpt.build_model(),
                critic_ckpt.build_model(),
                desk.train, desk.valid, desk.vocab, rl_cfg,
            )
            runs[(seed, label)] = types.SimpleNamespace(
                ppg=ppg_rl, drg=drg_rl, history=history,
                best_reward=ppg_rl.metadata["best_mean_reward"],
                start_reward=history[0]["mean_reward"],
            )

    return types.SimpleNamespace(critic_ckpt=critic_ckpt, runs=runs)
