"""Evaluate a trained checkpoint and render its predictions.

Needs the checkpoint from demos/05_train_toy.py. Prints endpoint error
against the synthetic ground truth and writes side-by-side color-wheel
renderings of predicted and true flow.
"""

import os
import sys

import numpy as np

from duflow import load_network, read_dataset
from duflow.flowio import aee, f1_all, flow_to_color, write_ppm
from duflow.training import predict_flow

base = os.path.join(os.path.dirname(__file__), "out")
ckpt = os.path.join(base, "train_run", "final.duf")
data_dir = os.path.join(base, "train_data")
if not os.path.exists(ckpt):
    sys.exit("no checkpoint found; run demos/05_train_toy.py first")

net = load_network(ckpt)
items = read_dataset(data_dir)[-10:]

errs, f1s, zero_errs = [], [], []
for it in items:
    pred = predict_flow(net, it.frame1[None], it.frame2[None])[0]
    errs.append(aee(pred, it.flow))
    f1s.append(f1_all(pred, it.flow))
    zero_errs.append(aee(np.zeros_like(it.flow), it.flow))

print(f"over {len(items)} held-out scenes:")
print(f"  AEE        {np.mean(errs):.3f} px (zero-flow baseline {np.mean(zero_errs):.3f})")
print(f"  F1-all     {100 * np.mean(f1s):.1f}%")

it = items[0]
pred = predict_flow(net, it.frame1[None], it.frame2[None])[0]
scale = max(float(np.abs(it.flow).max()), 1e-3)
write_ppm(flow_to_color(pred, scale), os.path.join(base, "pred_flow.ppm"))
write_ppm(flow_to_color(it.flow, scale), os.path.join(base, "true_flow.ppm"))
print(f"renderings written to {base}/pred_flow.ppm and {base}/true_flow.ppm")
