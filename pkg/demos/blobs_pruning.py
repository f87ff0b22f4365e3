"""Train a gated 16-64-64-4 MLP on Gaussian blobs and watch the hidden sizes shrink.

The prior threshold and weight decay are scaled to the data set size the
same way as for MNIST (N / 60000). Prints the alive units per layer every 50
epochs, then the final sizes and test accuracy next to a baseline of the
same architecture trained without gates.

Usage: python demos/blobs_pruning.py [epochs]   (default 400, about 30 s)
"""
import sys

import numpy as np

from varprune.data import blob_split
from varprune.network import dense_net
from varprune.trainer import TrainConfig, run, train_baseline

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 400
train, test = blob_split(4, 16, 500, 500, seed=0)
N = len(train)
cfg = TrainConfig(batch_size=64, lam=20 * N / 60000, log_gamma=-25 * N / 60000, epochs=epochs, ft_epochs=10, seed=0)


def show(state, row):
    if row.phase == "train" and row.epoch % 50 == 0:
        print(f"epoch {row.epoch:4d}  alive {row.alive}  test accuracy {row.test_accuracy:.4f}")


state = run(dense_net([16, 64, 64, 4], np.random.default_rng(0)), cfg, train, test, on_epoch=show)
base = train_baseline(dense_net([16, 64, 64, 4], np.random.default_rng(0)), cfg, train, test)
print(f"final widths {state.net.widths()} of [64, 64], pruning ratio {state.history[-1].pruning_ratio:.1f}%")
print(f"test accuracy {state.history[-1].test_accuracy:.4f}, unpruned baseline {base.history[-1].test_accuracy:.4f}")
