"""A small unsupervised training run.

Trains the quarter-width network briefly on synthetic pairs; every frame
pair supervises itself through the occlusion-aware reconstruction loss.
Pass --steps to train longer (the acceptance-scale run uses 1500 + 500).
"""

import argparse
import os

from duflow import SceneSpec, TrainConfig, write_dataset
from duflow.training import train

parser = argparse.ArgumentParser()
parser.add_argument("--steps", type=int, default=60, help="stage-1 steps (plus steps//3 stage-2)")
parser.add_argument("--width", type=float, default=0.125)
args = parser.parse_args()

base = os.path.join(os.path.dirname(__file__), "out")
data_dir = os.path.join(base, "train_data")
if not os.path.isdir(data_dir):
    print("generating 60 training scenes...")
    write_dataset(data_dir, SceneSpec(height=64, width=64, n_sprites=2), count=60, seed=7)

config = TrainConfig(
    dataset=data_dir,
    stage1_steps=args.steps,
    stage2_steps=args.steps // 3,
    batch_size=4,
    learning_rate=2e-3,
    width_multiplier=args.width,
    seed=0,
    val_count=10,
    val_interval=max(10, args.steps // 4),
    checkpoint_interval=0,
)

print(f"training {config.total_steps} steps at width {args.width}...")
net, state, history, ckpt = train(
    config, os.path.join(base, "train_run"),
    log_fn=lambda line: print("  " + line) if "val_aee" in line else None,
)
first = [r.total for _, r in history.reports[:10]]
last = [r.total for _, r in history.reports[-10:]]
print(f"loss: first-10 mean {sum(first) / len(first):.4f} -> last-10 mean {sum(last) / len(last):.4f}")
print(f"checkpoint: {ckpt}")
print("run demos/06_evaluate_and_visualize.py next")
