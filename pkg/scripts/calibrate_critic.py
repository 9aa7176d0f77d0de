"""Grid over critic init variants and optimizer settings; prints holdout curves."""

import argparse
import time

import numpy as np

from personaforge import data as d
from personaforge import training as tr
from personaforge.data import build_vocab
from personaforge.models import Critic, LMConfig
from personaforge.synthetic import SyntheticSpec, generate_synthetic_corpus


def make_variant(tie_qk, qk_scale, zero_pos):
    class V(Critic):
        def __init__(self, config):
            super().__init__(config)
            if zero_pos:
                self.params["pos_emb"].data[:] = 0.0
            for i in range(config.n_layers):
                p = f"layers.{i}."
                if qk_scale != 1.0:
                    self.params[p + "wq"].data *= qk_scale
                    self.params[p + "wk"].data *= qk_scale
                if tie_qk:
                    self.params[p + "wk"].data = self.params[p + "wq"].data.copy()

    return V


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n-train", type=int, default=300)
    ap.add_argument("--epochs", type=int, default=8)
    ap.add_argument("--seed", type=int, default=5)
    args = ap.parse_args()

    spec = SyntheticSpec(n_train=args.n_train, n_valid=0, n_test=0, seed=args.seed)
    train, _, _ = generate_synthetic_corpus(spec)
    dataset = d.build_critic_dataset(train, seed=0)
    vocab = build_vocab(train)
    print(f"instances={args.n_train} examples={len(dataset)} vocab={len(vocab)}")

    grid = [
        ("plain", (False, 1.0, False), 3e-3),
        ("tie", (True, 1.0, False), 3e-3),
        ("tie+nopos", (True, 1.0, True), 3e-3),
        ("tie+nopos+x10", (True, 10.0, True), 3e-3),
        ("tie+nopos+x10 lr1e-3", (True, 10.0, True), 1e-3),
        ("nopos", (False, 1.0, True), 3e-3),
    ]
    orig = tr.Critic
    try:
        for name, (tie, scale, zp), eta in grid:
            tr.Critic = make_variant(tie, scale, zp)
            cfg = tr.SLConfig(eta=eta, epochs=args.epochs, batch_size=8, seed=0)
            mc = LMConfig(vocab_size=len(vocab), d_model=32, n_layers=1, n_heads=2, d_ff=128, max_len=64, seed=0)
            t0 = time.time()
            ckpt = tr.train_critic(dataset, vocab, cfg, mc)
            model = ckpt.build_model()
            accs = [round(r["holdout_accuracy"], 3) for r in ckpt.history]
            bces = [round(r["holdout_bce"], 3) for r in ckpt.history]
            print(f"{name:24s} eta={eta:g} best={ckpt.metadata['best_holdout_accuracy']:.3f} "
                  f"acc={accs} bce={bces} ({time.time()-t0:.0f}s)")
    finally:
        tr.Critic = orig


if __name__ == "__main__":
    main()
