"""Training loss with and without binary16 token compression (fs=2)."""

import argparse

import numpy as np

from fs3d.config import RunConfig
from fs3d.data import GenConfig, generate
from fs3d.train import Trainer


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--configs", type=int, default=64)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--lr", type=float, default=0.01)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()
    ds = generate(11, GenConfig(n_configs=args.configs, atoms=(4, 8)))
    per_epoch = len(ds) // 8
    for comp in (False, True):
        rc = RunConfig(batch_size=8, minibatches=2, reference_batch=4, base_lr=args.lr, fs=2, seed=args.seed,
                       compression=comp, epochs=args.epochs, lr_schedule="linear")
        tr = Trainer(rc, ds)
        tr.run()
        losses = [np.mean([m.loss for m in tr.history[i:i + per_epoch]])
                  for i in range(0, len(tr.history), per_epoch)]
        tok = sum(m.bytes.get("a2a_tokens", 0) for m in tr.history)
        print(f"compression={comp} token_bytes={tok} epoch_loss " + " ".join(f"{l:.4f}" for l in losses))


if __name__ == "__main__":
    main()
