"""Batch-size/learning-rate echo: quadruple the batch with twice the lr.

Trains the toy teacher-student task at batch b and 4b (lr scaled by the
square root of the batch ratio) and prints validation energy MAE per epoch.
"""

import argparse

from fs3d.config import RunConfig
from fs3d.data import GenConfig, generate
from fs3d.train import Trainer, evaluate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--base-lr", type=float, default=0.005)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--schedule", default="linear", choices=["constant", "linear"])
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()
    ds = generate(11, GenConfig(n_configs=160, atoms=(4, 8)))
    train, val = ds[:128], ds[128:]
    final = {}
    for bs in (args.batch, 4 * args.batch):
        rc = RunConfig(batch_size=bs, minibatches=2, reference_batch=args.batch, base_lr=args.base_lr,
                       epochs=args.epochs, lr_schedule=args.schedule, seed=args.seed)
        tr = Trainer(rc, train)
        for e in range(args.epochs):
            tr.run(epochs=1, start=e)
            mae = evaluate(tr.cfg, tr.params(), val)["energy_mae"]
            print(f"batch {bs:3d} lr {tr.history[-1].lr:.5f} epoch {e:3d} val_energy_mae {mae:.4f}", flush=True)
        final[bs] = mae
    small, large = final[args.batch], final[4 * args.batch]
    print(f"final: batch {args.batch} {small:.4f}, batch {4 * args.batch} {large:.4f}, "
          f"change {100 * (large - small) / small:+.1f}%")


if __name__ == "__main__":
    main()
