"""Train/inference gap as the router gates approach 1.

Trains the default CollectiveKV arm, then sharpens only the router heads
with a large peak weight and prints the eval-split gap between
training-mode (gated) and inference-mode (ungated) predictions after every
epoch. The gap shrinks roughly like (1 - gate).
"""

import argparse
from dataclasses import replace

import numpy as np

from collectivekv import cli
from collectivekv.attention import auc, predict
from collectivekv.train import TrainConfig, Trainer, mean_gate


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("--peak-weight", type=float, default=10.0)
    p.add_argument("--learning-rate", type=float, default=0.05)
    p.add_argument("--target-gate", type=float, default=0.9999)
    p.add_argument("--max-epochs", type=int, default=100)
    args = p.parse_args()

    rc = cli.RunConfig()
    _, train_ds, eval_ds = cli.load_data(rc)
    trb, evb = train_ds.batches(), eval_ds.batches()
    mc = rc.model_config()
    base = Trainer(mc, rc.train_config())
    base.fit(trb)

    mc2 = replace(mc, collective=replace(mc.collective, peak_weight=args.peak_weight))
    t = Trainer(mc2, TrainConfig(learning_rate=args.learning_rate), params=dict(base.params),
                trainable=lambda name: name.startswith("router"))
    print(f"{'epoch':>5s} {'gate':>9s} {'1-gate':>9s} {'max gap':>10s} {'auc':>7s}")
    for epoch in range(args.max_epochs + 1):
        if epoch:
            t.epoch(trb)
        gate = mean_gate(evb, t.params, mc2)
        inf = predict(evb, t.params, mc2, "inference")
        gap = np.max(np.abs(predict(evb, t.params, mc2, "training").probs - inf.probs))
        print(f"{epoch:5d} {gate:9.5f} {1 - gate:9.2e} {gap:10.2e} {auc(inf):7.4f}", flush=True)
        if gate >= args.target_gate:
            break


if __name__ == "__main__":
    main()
