import json
import math
import struct

import numpy as np
import pytest

from personaforge import autograd as ag
from personaforge import data as d
from personaforge import training as tr
from personaforge.autograd import AdamState, Tensor
from personaforge.data import CriticExample, DialogueInstance, build_vocab
from personaforge.models import Critic, ConditionalLM, LMConfig, sequence_nll, serialize_instance
from personaforge.synthetic import SyntheticSpec, generate_synthetic_corpus

TINY = dict(d_model=16, n_layers=1, n_heads=2, d_ff=32, max_len=64)


def tiny_corpus(n=6):
    insts = [
        DialogueInstance(
            context=["hi there .", f"i saw thing {i} ."],
            self_personas=["i like tea .", "i have a dog ."],
            partner_personas=["i like to ski ."],
            response=f"nice , number {i} sounds fun .",
        )
        for i in range(n)
    ]
    return insts, build_vocab(insts)


class TestConfigs:
    def test_sl_defaults(self):
        cfg = tr.SLConfig()
        assert (cfg.eta, cfg.beta1, cfg.beta2, cfg.epsilon) == (5e-4, 0.9, 0.999, 1e-8)
        assert cfg.epochs == 2
        cfg.validate()

    def test_sl_invalid(self):
        with pytest.raises(ValueError):
            tr.SLConfig(epochs=0).validate()
        with pytest.raises(ValueError):
            tr.SLConfig(eta=0.0).validate()

    def test_rl_defaults(self):
        cfg = tr.RLConfig()
        assert cfg.eta == 5e-6
        assert cfg.accumulate_every == 20 and cfg.validate_every == 50
        assert cfg.reward_positive == 1.0 and cfg.reward_negative == -1.0
        cfg.validate()

    def test_rl_invalid(self):
        with pytest.raises(ValueError, match="update_ppg"):
            tr.RLConfig(update_ppg=False, update_drg=False).validate()
        with pytest.raises(ValueError):
            tr.RLConfig(reward_negative=0.5).validate()
        with pytest.raises(ValueError, match="reward_mode"):
            tr.RLConfig(reward_mode="hinge").validate()


class TestCheckpointIO:
    def _ckpt(self, seed=0):
        insts, vocab = tiny_corpus()
        model = ConditionalLM(LMConfig(vocab_size=len(vocab), seed=seed, **TINY))
        return tr.snapshot_checkpoint(model, "conditional_lm", vocab, {"trainer": "test"}, [{"step": 1}]), model, vocab

    def test_roundtrip(self, tmp_path):
        ckpt, model, vocab = self._ckpt()
        path = tmp_path / "m.ckpt"
        tr.save_checkpoint(ckpt, path)
        back = tr.load_checkpoint(path)
        assert back.kind == "conditional_lm"
        assert back.config == ckpt.config
        assert back.vocab_tokens == vocab.to_list()
        assert back.metadata == {"trainer": "test"} and back.history == [{"step": 1}]
        assert set(back.params) == set(ckpt.params)
        for name in ckpt.params:
            assert np.array_equal(back.params[name], ckpt.params[name])

    def test_save_load_save_byte_identical(self, tmp_path):
        ckpt, _, _ = self._ckpt()
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        tr.save_checkpoint(ckpt, a)
        tr.save_checkpoint(tr.load_checkpoint(a), b)
        assert a.read_bytes() == b.read_bytes()

    def test_build_model_matches_within_f32(self, tmp_path):
        ckpt, model, vocab = self._ckpt()
        path = tmp_path / "m.ckpt"
        tr.save_checkpoint(ckpt, path)
        rebuilt = tr.load_checkpoint(path).build_model()
        ids = [d.CTX_ID, 10, d.SELF_ID, 11, d.RESP_ID, 12]
        with ag.no_grad():
            a = model.forward(ids).data
            b = rebuilt.forward(ids).data
        assert np.allclose(a, b, rtol=1e-4, atol=1e-5)

    def test_critic_kind_roundtrip(self, tmp_path):
        _, vocab = tiny_corpus()
        critic = Critic(LMConfig(vocab_size=len(vocab), **TINY))
        ckpt = tr.snapshot_checkpoint(critic, "critic", vocab)
        tr.save_checkpoint(ckpt, tmp_path / "c.ckpt")
        back = tr.load_checkpoint(tmp_path / "c.ckpt")
        assert "head.w" in back.params
        assert isinstance(back.build_model(), Critic)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.ckpt"
        p.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(tr.CheckpointFormatError, match="magic"):
            tr.load_checkpoint(p)

    def test_bad_version(self, tmp_path):
        ckpt, _, _ = self._ckpt()
        p = tmp_path / "x.ckpt"
        tr.save_checkpoint(ckpt, p)
        blob = bytearray(p.read_bytes())
        blob[4:8] = struct.pack("<I", 2)
        p.write_bytes(bytes(blob))
        with pytest.raises(tr.CheckpointFormatError, match="version 2"):
            tr.load_checkpoint(p)

    def test_truncated_payload(self, tmp_path):
        ckpt, _, _ = self._ckpt()
        p = tmp_path / "x.ckpt"
        tr.save_checkpoint(ckpt, p)
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(tr.CheckpointIntegrityError):
            tr.load_checkpoint(p)

    def test_corrupted_index_offset(self, tmp_path):
        ckpt, _, _ = self._ckpt()
        p = tmp_path / "x.ckpt"
        tr.save_checkpoint(ckpt, p)
        blob = p.read_bytes()
        (hlen,) = struct.unpack_from("<Q", blob, 8)
        header = json.loads(blob[16 : 16 + hlen].decode())
        header["tensors"][1]["offset"] += 4
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        p.write_bytes(blob[:8] + struct.pack("<Q", len(hb)) + hb + blob[16 + hlen :])
        with pytest.raises(tr.CheckpointIntegrityError, match="offset"):
            tr.load_checkpoint(p)

    def test_extra_trailing_bytes_rejected(self, tmp_path):
        ckpt, _, _ = self._ckpt()
        p = tmp_path / "x.ckpt"
        tr.save_checkpoint(ckpt, p)
        p.write_bytes(p.read_bytes() + b"\x00\x00\x00\x00")
        with pytest.raises(tr.CheckpointIntegrityError, match="size mismatch"):
            tr.load_checkpoint(p)


class TestSupervised:
    def test_overfits_single_instance(self):
        insts, vocab = tiny_corpus(1)
        cfg = tr.SLConfig(eta=5e-3, epochs=200, batch_size=1, seed=0)
        ckpt = tr.train_supervised("drg", insts, insts, vocab, cfg, LMConfig(vocab_size=len(vocab), **TINY))
        from personaforge.metrics import perplexity

        assert perplexity(ckpt.build_model(), insts, "drg_target", vocab) < 1.05

    def test_role_modes(self):
        assert tr.ROLE_MODES == {
            "ppg": "ppg_target",
            "drg": "drg_target",
            "e2e_with_partner": "drg_target",
            "e2e_no_partner": "drg_no_partner",
        }
        insts, vocab = tiny_corpus(1)
        seq = serialize_instance(insts[0], vocab, tr.ROLE_MODES["e2e_no_partner"], 64)
        assert "PARTNER" not in seq.segment_of and d.PARTNER_ID not in seq.ids

    def test_same_seed_byte_identical_checkpoints(self, tmp_path):
        insts, vocab = tiny_corpus(4)
        cfg = tr.SLConfig(epochs=1, batch_size=2, seed=3)
        mc = LMConfig(vocab_size=len(vocab), seed=3, **TINY)
        for name in ("a", "b"):
            ckpt = tr.train_supervised("ppg", insts, insts[:2], vocab, cfg, mc)
            tr.save_checkpoint(ckpt, tmp_path / name)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_empty_corpora_rejected(self):
        insts, vocab = tiny_corpus(2)
        cfg = tr.SLConfig(epochs=1)
        with pytest.raises(ValueError, match="training corpus"):
            tr.train_supervised("drg", [], insts, vocab, cfg)
        with pytest.raises(ValueError, match="validation corpus"):
            tr.train_supervised("drg", insts, [], vocab, cfg)
        with pytest.raises(ValueError, match="role"):
            tr.train_supervised("oracle", insts, insts, vocab, cfg)

    def test_divergence_guard_names_step(self):
        insts, vocab = tiny_corpus(2)
        model = ConditionalLM(LMConfig(vocab_size=len(vocab), **TINY))
        with pytest.raises(tr.DivergenceError, match="update 0"):
            tr._run_epochs(
                model,
                insts,
                tr.SLConfig(epochs=1, batch_size=2),
                lambda inst, scale: Tensor(float("nan")),
                lambda step, epoch: {"step": step, "epoch": epoch, "perplexity": 1.0},
                lambda r: r["perplexity"],
                None,
            )

    def test_validation_log_written(self, tmp_path):
        insts, vocab = tiny_corpus(3)
        log = tmp_path / "train.log.jsonl"
        cfg = tr.SLConfig(epochs=2, batch_size=3, seed=1)
        tr.train_supervised("drg", insts, insts[:1], vocab, cfg, LMConfig(vocab_size=len(vocab), **TINY), log_path=log)
        lines = [json.loads(x) for x in log.read_text().splitlines()]
        assert [r["epoch"] for r in lines] == [1, 2]
        assert all(set(r) == {"step", "epoch", "perplexity"} for r in lines)

    def test_best_by_validation_selected(self):
        insts, vocab = tiny_corpus(4)
        cfg = tr.SLConfig(epochs=3, batch_size=2, seed=0)
        ckpt = tr.train_supervised("drg", insts, insts[:2], vocab, cfg, LMConfig(vocab_size=len(vocab), **TINY))
        best = min(ckpt.history, key=lambda r: r["perplexity"])
        assert ckpt.metadata["best_perplexity"] == best["perplexity"]
        assert ckpt.metadata["best_step"] == best["step"]


class TestMultitask:
    def test_alpha_must_be_positive(self):
        insts, vocab = tiny_corpus(2)
        with pytest.raises(ValueError, match="alpha"):
            tr.train_multitask(0.0, insts, insts, vocab, tr.SLConfig(epochs=1))

    def test_alpha_zero_limit_matches_no_partner_gradients(self):
        insts, vocab = tiny_corpus(3)
        cfg = LMConfig(vocab_size=len(vocab), **TINY)
        m1, m2 = ConditionalLM(cfg), ConditionalLM(cfg)
        ag.backward(tr.multitask_batch_loss(m1, insts, vocab, alpha=0.0))
        ag.backward(tr.supervised_batch_loss(m2, insts, vocab, "drg_no_partner"))
        for name in m1.params:
            g1, g2 = m1.params[name].grad, m2.params[name].grad
            assert np.array_equal(g1, g2), name

    def test_loss_linearity_in_alpha(self):
        insts, vocab = tiny_corpus(3)
        model = ConditionalLM(LMConfig(vocab_size=len(vocab), **TINY))
        with ag.no_grad():
            l1 = tr.multitask_batch_loss(model, insts, vocab, alpha=1.0).item()
            l2 = tr.multitask_batch_loss(model, insts, vocab, alpha=2.0).item()
            lp = tr.supervised_batch_loss(model, insts, vocab, "multitask_ppg").item()
        assert math.isclose(l2 - l1, lp, rel_tol=1e-9)

    def test_combined_gradient_is_weighted_sum(self):
        insts, vocab = tiny_corpus(2)
        cfg = LMConfig(vocab_size=len(vocab), **TINY)
        alpha = 0.7
        mt, mp, md = ConditionalLM(cfg), ConditionalLM(cfg), ConditionalLM(cfg)
        ag.backward(tr.multitask_batch_loss(mt, insts, vocab, alpha))
        ag.backward(tr.supervised_batch_loss(mp, insts, vocab, "multitask_ppg"))
        ag.backward(tr.supervised_batch_loss(md, insts, vocab, "multitask_drg"))
        for name in mt.params:
            want = alpha * mp.params[name].grad + md.params[name].grad
            assert np.allclose(mt.params[name].grad, want, rtol=1e-10, atol=1e-12), name

    def test_train_multitask_runs(self, tmp_path):
        insts, vocab = tiny_corpus(4)
        log = tmp_path / "log.jsonl"
        ckpt = tr.train_multitask(
            1.0, insts, insts[:2], vocab, tr.SLConfig(epochs=1, batch_size=2), LMConfig(vocab_size=len(vocab), **TINY), log_path=log
        )
        assert ckpt.kind == "conditional_lm"
        rec = json.loads(log.read_text().splitlines()[0])
        assert {"perplexity_ppg", "perplexity_drg"} <= set(rec)
        assert ckpt.metadata["alpha"] == 1.0


def balanced_critic_set(n_pairs=4):
    out = []
    for i in range(n_pairs):
        out.append(CriticExample(f"i like tea {i} .", f"tea {i} is great .", 1))
        out.append(CriticExample(f"i like tea {i} .", f"rocks {i + 50} are heavy .", 0))
    return out


class TestCritic:
    def _vocab(self, examples):
        insts = [
            DialogueInstance([ex.response_text], [ex.persona_text], [], ex.response_text) for ex in examples
        ]
        return build_vocab(insts)

    def test_uninformative_critic_bce_is_ln2(self):
        examples = balanced_critic_set(2)
        vocab = self._vocab(examples)
        critic = Critic(LMConfig(vocab_size=len(vocab), **TINY))
        critic.load_arrays({k: np.zeros_like(v.data) for k, v in critic.params.items()})
        assert tr.critic_bce(critic, examples, vocab) == pytest.approx(math.log(2.0), rel=1e-12)

    def test_label_flip_flips_accuracy(self):
        examples = balanced_critic_set(5)
        vocab = self._vocab(examples)
        critic = Critic(LMConfig(vocab_size=len(vocab), **TINY))
        acc = tr.critic_accuracy(critic, examples, vocab)
        flipped = [CriticExample(ex.persona_text, ex.response_text, 1 - ex.label) for ex in examples]
        assert tr.critic_accuracy(critic, flipped, vocab) == pytest.approx(1.0 - acc, abs=1e-12)

    def test_contract_errors(self):
        examples = balanced_critic_set(3)
        vocab = self._vocab(examples)
        cfg = tr.SLConfig(epochs=1)
        with pytest.raises(ValueError, match="empty"):
            tr.train_critic([], vocab, cfg)
        ones = [ex for ex in examples if ex.label == 1]
        with pytest.raises(ValueError, match="single-class"):
            tr.train_critic(ones, vocab, cfg)
        with pytest.raises(ValueError, match="imbalanced"):
            tr.train_critic(examples + ones[:1], vocab, cfg)

    def test_train_critic_runs_and_reports(self, tmp_path):
        examples = balanced_critic_set(6)
        vocab = self._vocab(examples)
        log = tmp_path / "c.jsonl"
        ckpt = tr.train_critic(examples, vocab, tr.SLConfig(epochs=1, batch_size=4, eta=1e-3), LMConfig(vocab_size=len(vocab), **TINY), log_path=log)
        assert ckpt.kind == "critic"
        assert 0.0 <= ckpt.metadata["best_holdout_accuracy"] <= 1.0
        rec = json.loads(log.read_text().splitlines()[0])
        assert {"holdout_accuracy", "holdout_bce"} <= set(rec)

    def test_learns_separable_synthetic_set(self):
        # positives share an attribute token between persona and response;
        # settings calibrated so a from-scratch encoder clears 0.9 held-out
        spec = SyntheticSpec(n_train=600, n_valid=0, n_test=0, seed=5)
        train, _, _ = generate_synthetic_corpus(spec)
        dataset = d.build_critic_dataset(train, seed=0)
        vocab = build_vocab(train)
        cfg = tr.SLConfig(eta=1e-3, epochs=20, batch_size=8, seed=0)
        mc = LMConfig(vocab_size=len(vocab), d_model=32, n_layers=1, n_heads=2, d_ff=128, max_len=64, seed=0)
        ckpt = tr.train_critic(dataset, vocab, cfg, mc)
        assert ckpt.metadata["best_holdout_accuracy"] >= 0.9
        model = ckpt.build_model()
        pos = [ex for ex in dataset[:60] if ex.label == 1]
        neg = [ex for ex in dataset[:60] if ex.label == 0]
        score = lambda exs: np.mean(
            [tr.critic_score(model, vocab.encode(e.persona_text), vocab.encode(e.response_text)) for e in exs]
        )
        assert score(pos) > score(neg)


class _PinnedCritic:
    """Critic stand-in with a constant logit; quacks config + logit."""

    def __init__(self, logit_value, vocab_size):
        self.config = LMConfig(vocab_size=vocab_size, **TINY)
        self._v = float(logit_value)

    def logit(self, persona_tokens, response_tokens):
        return Tensor(self._v)


class TestRollout:
    def setup_method(self):
        self.insts, self.vocab = tiny_corpus(3)
        cfg = LMConfig(vocab_size=len(self.vocab), **TINY)
        self.ppg = ConditionalLM(cfg)
        self.drg = ConditionalLM(LMConfig(vocab_size=len(self.vocab), seed=1, **TINY))

    def test_pinned_positive_and_negative(self):
        cfg = tr.RLConfig(max_new_persona=6, max_new_response=6)
        hi = tr.rl_rollout(self.ppg, self.drg, _PinnedCritic(40.0, len(self.vocab)), self.insts[0], self.vocab, cfg, np.random.default_rng(0))
        lo = tr.rl_rollout(self.ppg, self.drg, _PinnedCritic(-40.0, len(self.vocab)), self.insts[0], self.vocab, cfg, np.random.default_rng(0))
        assert hi.reward == 1.0 and lo.reward == -1.0
        assert hi.persona_tokens == lo.persona_tokens  # same rng stream, same models

    def test_continuous_reward_is_affine(self):
        cfg = tr.RLConfig(reward_mode="continuous")
        assert tr.rollout_reward(0.5, cfg) == 0.0
        assert tr.rollout_reward(1.0, cfg) == 1.0
        assert tr.rollout_reward(0.25, cfg) == -0.5

    def test_rollout_deterministic_for_seed(self):
        cfg = tr.RLConfig(max_new_persona=6, max_new_response=6)
        critic = Critic(LMConfig(vocab_size=len(self.vocab), **TINY))
        a = tr.rl_rollout(self.ppg, self.drg, critic, self.insts[1], self.vocab, cfg, np.random.default_rng(7))
        b = tr.rl_rollout(self.ppg, self.drg, critic, self.insts[1], self.vocab, cfg, np.random.default_rng(7))
        assert a == b

    def test_logp_matches_decode_contract(self):
        cfg = tr.RLConfig(max_new_persona=6, max_new_response=6)
        ro = tr.rl_rollout(self.ppg, self.drg, _PinnedCritic(40.0, len(self.vocab)), self.insts[0], self.vocab, cfg, np.random.default_rng(3))
        assert ro.logp_ppg <= 0.0 and ro.logp_drg <= 0.0
        assert 0.0 <= ro.score <= 1.0


def bandit_update(logits, state, rng, eta_reward=(1.0, -1.0)):
    """One REINFORCE step on a single softmax row; returns sampled token."""
    probs = ag.softmax(logits).data.ravel()
    tok = int(rng.choice(len(probs), p=probs))
    reward = eta_reward[0] if tok == 3 else eta_reward[1]
    ag.zero_grads([logits])
    ag.backward(ag.mul(ag.softmax_cross_entropy(logits, [tok]), Tensor(reward)))
    ag.adam_step([logits], state)
    return tok


class TestRLTrain:
    def _setup(self, n=4):
        insts, vocab = tiny_corpus(n)
        cfg = LMConfig(vocab_size=len(vocab), **TINY)
        ppg = ConditionalLM(cfg)
        drg = ConditionalLM(LMConfig(vocab_size=len(vocab), seed=1, **TINY))
        critic = Critic(LMConfig(vocab_size=len(vocab), seed=2, **TINY))
        return insts, vocab, ppg, drg, critic

    def test_bandit_single_update_increases_target_probability(self):
        for seed in range(6):
            logits = Tensor(np.zeros((1, 8)), requires_grad=True)
            state = AdamState(eta=1e-2)
            before = ag.softmax(logits).data[0, 3]
            bandit_update(logits, state, np.random.default_rng(seed))
            after = ag.softmax(logits).data[0, 3]
            assert after > before

    def test_freeze_disabled_agent_and_critic(self):
        insts, vocab, ppg, drg, critic = self._setup()
        ppg_before = {k: v.data.copy() for k, v in ppg.params.items()}
        critic_before = {k: v.data.copy() for k, v in critic.params.items()}
        cfg = tr.RLConfig(
            eta=1e-3, accumulate_every=2, validate_every=1, max_updates=2,
            update_ppg=False, max_new_persona=5, max_new_response=5, valid_limit=2, seed=0,
        )
        ckpt_ppg, ckpt_drg, history = tr.rl_train(ppg, drg, critic, insts, insts[:2], vocab, cfg)
        for name, arr in ppg_before.items():
            assert np.array_equal(ppg.params[name].data, arr), name
            assert np.array_equal(ckpt_ppg.params[name], arr.astype("<f4")), name
        for name, arr in critic_before.items():
            assert np.array_equal(critic.params[name].data, arr), name
        assert any(not np.array_equal(drg.params[k].data, v) for k, v in ckpt_drg.params.items())

    def test_deterministic_across_runs(self, tmp_path):
        outs = []
        for run in ("a", "b"):
            insts, vocab, ppg, drg, critic = self._setup()
            cfg = tr.RLConfig(eta=1e-4, accumulate_every=2, validate_every=2, max_updates=2, max_new_persona=5, max_new_response=5, valid_limit=2)
            ckpt_ppg, ckpt_drg, history = tr.rl_train(ppg, drg, critic, insts, insts[:2], vocab, cfg)
            tr.save_checkpoint(ckpt_ppg, tmp_path / f"p{run}")
            tr.save_checkpoint(ckpt_drg, tmp_path / f"d{run}")
            outs.append(history)
        assert outs[0] == outs[1]
        assert (tmp_path / "pa").read_bytes() == (tmp_path / "pb").read_bytes()
        assert (tmp_path / "da").read_bytes() == (tmp_path / "db").read_bytes()

    def test_accumulation_equivalence(self):
        insts, vocab, ppg, _, _ = self._setup()
        rewards = [1.0, -1.0, 1.0, 1.0]
        seqs = []
        for i, inst in enumerate(insts[:4]):
            prefix = serialize_instance(inst, vocab, "ppg_target", 64, include_target=False)
            sampled = [10 + i, 11, d.EOS_ID]
            seqs.append(tr.extend_with_target(prefix, sampled, "PARTNER"))
        params = ppg.parameters()
        ag.zero_grads(params)
        for seq, r in zip(seqs, rewards):
            nll, _ = sequence_nll(ppg, seq)
            ag.backward(ag.mul(nll, Tensor(r)))
        accumulated = {k: v.grad.copy() for k, v in ppg.params.items()}
        summed = {k: np.zeros_like(v.data) for k, v in ppg.params.items()}
        for seq, r in zip(seqs, rewards):
            ag.zero_grads(params)
            nll, _ = sequence_nll(ppg, seq)
            ag.backward(ag.mul(nll, Tensor(r)))
            for k, v in ppg.params.items():
                if v.grad is not None:
                    summed[k] = summed[k] + v.grad
        for k in accumulated:
            assert np.array_equal(accumulated[k], summed[k]), k

    def test_sign_correctness(self):
        insts, vocab, ppg, _, _ = self._setup()
        prefix = serialize_instance(insts[0], vocab, "ppg_target", 64, include_target=False)
        seq = tr.extend_with_target(prefix, [10, 11, d.EOS_ID], "PARTNER")
        params = ppg.parameters()
        grads = {}
        for r in (1.0, -1.0):
            ag.zero_grads(params)
            nll, _ = sequence_nll(ppg, seq)
            ag.backward(ag.mul(nll, Tensor(r)))
            grads[r] = {k: v.grad.copy() for k, v in ppg.params.items()}
        for k in grads[1.0]:
            assert np.array_equal(grads[1.0][k], -grads[-1.0][k]), k

    def test_pinned_positive_critic_raises_fixed_rollout_likelihood(self):
        insts, vocab, ppg, drg, _ = self._setup(1)
        critic = _PinnedCritic(40.0, len(vocab))
        cfg = tr.RLConfig(eta=1e-4, max_new_persona=5, max_new_response=5)
        inst = insts[0]
        params = ppg.parameters() + drg.parameters()
        state_p, state_d = AdamState(eta=cfg.eta), AdamState(eta=cfg.eta)
        logps = []
        tokens_seen = set()
        for _ in range(10):
            ro = tr.rl_rollout(ppg, drg, critic, inst, vocab, cfg, np.random.default_rng(123))
            tokens_seen.add((tuple(ro.persona_tokens), tuple(ro.response_tokens)))
            logps.append(ro.logp_ppg + ro.logp_drg)
            ag.zero_grads(params)
            pre = serialize_instance(inst, vocab, "ppg_target", 64, include_target=False)
            nll_p, _ = sequence_nll(ppg, tr.extend_with_target(pre, ro.persona_tokens, "PARTNER"))
            ag.backward(ag.mul(nll_p, Tensor(ro.reward)))
            pre = serialize_instance(inst, vocab, "drg_target", 64, partner_tokens=ro.persona_tokens, include_target=False)
            nll_d, _ = sequence_nll(drg, tr.extend_with_target(pre, ro.response_tokens, "RESP"))
            ag.backward(ag.mul(nll_d, Tensor(ro.reward)))
            ag.adam_step(ppg.parameters(), state_p)
            ag.adam_step(drg.parameters(), state_d)
        assert len(tokens_seen) == 1  # tiny eta keeps the resampled pair fixed
        for a, b in zip(logps, logps[1:]):
            assert b >= a - 1e-9

    def test_rl_train_history_and_log(self, tmp_path):
        insts, vocab, ppg, drg, critic = self._setup()
        log = tmp_path / "rl.jsonl"
        cfg = tr.RLConfig(eta=1e-4, accumulate_every=2, validate_every=3, max_updates=4, max_new_persona=5, max_new_response=5, valid_limit=2)
        ckpt_ppg, ckpt_drg, history = tr.rl_train(ppg, drg, critic, insts, insts[:2], vocab, cfg, log_path=log)
        assert [r["step"] for r in history] == [0, 3, 4]
        for rec in history:
            assert set(rec) == {"step", "perplexity_ppg", "perplexity_drg", "mean_reward"}
            assert -1.0 <= rec["mean_reward"] <= 1.0
        lines = [json.loads(x) for x in log.read_text().splitlines()]
        assert lines == history
        assert ckpt_ppg.kind == "conditional_lm" and ckpt_drg.kind == "conditional_lm"
        assert ckpt_ppg.metadata["agent"] == "ppg" and ckpt_drg.metadata["agent"] == "drg"

    def test_no_agents_rejected(self):
        insts, vocab, ppg, drg, critic = self._setup()
        cfg = tr.RLConfig(update_ppg=False, update_drg=False)
        with pytest.raises(ValueError):
            tr.rl_train(ppg, drg, critic, insts, insts, vocab, cfg)
