"""Full desk experiment: corpus, supervised stages, critic, reinforce, report."""

import argparse
import json
import time
from pathlib import Path

from personaforge import data as d
from personaforge import metrics as M
from personaforge import training as tr
from personaforge.models import LMConfig
from personaforge.synthetic import SyntheticSpec, write_synthetic_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/pipeline")
    ap.add_argument("--corpus-seed", type=int, default=7)
    ap.add_argument("--model-seed", type=int, default=0)
    ap.add_argument("--ppg-epochs", type=int, default=18)
    ap.add_argument("--drg-epochs", type=int, default=16)
    ap.add_argument("--critic-epochs", type=int, default=6)
    ap.add_argument("--skip-rl", action="store_true")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    spec = SyntheticSpec(seed=args.corpus_seed)
    write_synthetic_corpus(spec, out / "corpus")
    train = d.load_corpus(out / "corpus" / "train.jsonl")
    valid = d.load_corpus(out / "corpus" / "valid.jsonl")
    test = d.load_corpus(out / "corpus" / "test.jsonl")
    vocab = d.build_vocab(train)
    print(f"corpus: {len(train)}/{len(valid)}/{len(test)} instances, vocab {len(vocab)}")

    def model_config(seed):
        return LMConfig(vocab_size=len(vocab), seed=seed)

    stages = [
        ("ppg", args.ppg_epochs, args.model_seed),
        ("drg", args.drg_epochs, args.model_seed + 1),
        ("e2e_no_partner", args.drg_epochs, args.model_seed + 2),
    ]
    ckpts = {}
    for role, epochs, seed in stages:
        cfg = tr.SLConfig(eta=1e-3, epochs=epochs, batch_size=4, seed=seed)
        t0 = time.monotonic()
        ck = tr.train_supervised(
            role, train, valid, vocab, cfg,
            model_config=model_config(seed),
            log_path=out / f"{role}.log.jsonl",
        )
        tr.save_checkpoint(ck, out / f"{role}.ckpt")
        print(f"{role}: {epochs} epochs in {time.monotonic() - t0:.0f}s, "
              f"valid ppl {ck.history[-1]['perplexity']:.3f}")
        ckpts[role] = ck

    pairs = d.build_critic_dataset(train, seed=args.corpus_seed)
    cfg = tr.SLConfig(eta=1e-3, epochs=args.critic_epochs, batch_size=8, seed=args.model_seed + 3)
    t0 = time.monotonic()
    critic_ck = tr.train_critic(
        pairs, vocab, cfg,
        model_config=LMConfig(vocab_size=len(vocab), n_layers=1, seed=args.model_seed + 3),
        log_path=out / "critic.log.jsonl",
    )
    tr.save_checkpoint(critic_ck, out / "critic.ckpt")
    print(f"critic: {len(pairs)} pairs in {time.monotonic() - t0:.0f}s, "
          f"holdout acc {critic_ck.history[-1]['holdout_accuracy']:.3f}")

    systems = [
        M.System("pipeline", ckpts["drg"].build_model(), persona_model=ckpts["ppg"].build_model()),
        M.System("gold_partner", ckpts["drg"].build_model()),
        M.System("no_partner", ckpts["e2e_no_partner"].build_model(), response_mode="drg_no_partner"),
    ]

    if not args.skip_rl:
        rl_cfg = tr.RLConfig(seed=args.model_seed)
        t0 = time.monotonic()
        ppg_rl, drg_rl, history = tr.rl_train(
            ckpts["ppg"].build_model(), ckpts["drg"].build_model(), critic_ck.build_model(),
            train, valid, vocab, rl_cfg,
            log_path=out / "rl.log.jsonl",
        )
        tr.save_checkpoint(ppg_rl, out / "ppg_rl.ckpt")
        tr.save_checkpoint(drg_rl, out / "drg_rl.ckpt")
        print(f"reinforce: {len(history)} validations in {time.monotonic() - t0:.0f}s, "
              f"final reward {history[-1]['mean_reward']:+.3f}")
        systems.append(
            M.System("pipeline_rl", drg_rl.build_model(), persona_model=ppg_rl.build_model())
        )

    report = M.evaluate_suite(systems, test, vocab)
    (out / "report.txt").write_text(report.to_text())
    (out / "report.json").write_text(json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n")
    print()
    print(report.to_text(), end="")
    print(f"\nartifacts under {out}/")


if __name__ == "__main__":
    main()
