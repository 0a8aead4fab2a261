"""Bidirectional shared-weight training with the two-stage schedule.

One step runs the network once on a batch holding both frame orders
((I1,I2) stacked above (I2,I1)), so the forward and backward flows come
from the same parameters by construction. Stage 1 trains with occlusion
reasoning off; stage 2 switches the flags on, once flow estimates are good
enough for the forward-backward check to mean something.

Determinism and resume: batch sampling and augmentation draw from seeds
derived as (seed, step[, slot]) rather than from a running RNG stream, so a
run resumed from a checkpoint replays the exact remaining stream. Adam
moments, the step counter and the width multiplier ride along inside the
checkpoint under `opt.` / `meta.` prefixes.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigError, DataError, NanGradientError
from .flowio import aee
from .losses import (
    CensusParams,
    CharbonnierParams,
    LossReport,
    LossWeights,
    OcclusionParams,
    total_loss,
)
from .network import NetworkConfig, build_network, network_entries, read_checkpoint, write_checkpoint
from .scenes import AugmentParams, GroundTruth, ImagePair, augment, read_dataset
from .tensor import Graph, Tensor4


@dataclass(frozen=True)
class TrainConfig:
    dataset: str = ""
    stage1_steps: int = 1500
    stage2_steps: int = 500
    batch_size: int = 4
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    width_multiplier: float = 0.25
    seed: int = 0
    checkpoint_interval: int = 500
    val_count: int = 20
    val_interval: int = 100
    grad_clip_norm: float = 10.0
    augment: int = 1
    w_data: float = 1.0
    w_smooth: float = 3.0
    w_fb: float = 0.2
    charbonnier_alpha: float = 0.45
    charbonnier_eps: float = 1e-3
    census_radius: int = 3
    census_sigma: float = 0.81
    census_dist_eps: float = 0.1
    occ_alpha1: float = 0.01
    occ_alpha2: float = 0.5

    def weights(self) -> LossWeights:
        return LossWeights(self.w_data, self.w_smooth, self.w_fb)

    def charb(self) -> CharbonnierParams:
        return CharbonnierParams(self.charbonnier_alpha, self.charbonnier_eps)

    def census(self) -> CensusParams:
        return CensusParams(self.census_radius, self.census_sigma, self.census_dist_eps)

    def occ(self) -> OcclusionParams:
        return OcclusionParams(self.occ_alpha1, self.occ_alpha2)

    @property
    def total_steps(self) -> int:
        return self.stage1_steps + self.stage2_steps


def parse_config(path) -> TrainConfig:
    """Flat `key = value` file, `#` comments; unknown keys are an error."""
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} does not exist")
    valid = {f.name: f.type for f in fields(TrainConfig)}
    casts = {"int": int, "float": float, "str": str}
    overrides = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw.strip()!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in valid:
                raise ConfigError(
                    f"{path}:{lineno}: unknown key {key!r}; valid keys: {', '.join(sorted(valid))}"
                )
            try:
                overrides[key] = casts[valid[key]](value)
            except ValueError as e:
                raise ConfigError(f"{path}:{lineno}: cannot parse {key} = {value!r} ({e})") from e
    return TrainConfig(**overrides)


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0


def adam_init(net) -> OptimizerState:
    m = {name: np.zeros_like(p.data) for name, p in net.parameters()}
    v = {name: np.zeros_like(p.data) for name, p in net.parameters()}
    return OptimizerState(m, v, 0)


def optimizer_step(params, state: OptimizerState, lr, beta1, beta2, eps):
    """Adaptive-moment update with bias correction; missing grads count as zero.

    Algebraically the standard update p -= lr * mhat / (sqrt(vhat) + eps)
    with mhat = m/(1-b1^t), vhat = v/(1-b2^t), rearranged to avoid
    temporaries: p -= (lr*sqrt(c2)/c1) * m / (sqrt(v) + eps*sqrt(c2)).
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    sq2 = np.sqrt(c2)
    step_scale = lr * sq2 / c1
    for name, p in params.items():
        m = state.m[name]
        v = state.v[name]
        m *= p.data.dtype.type(beta1)
        v *= p.data.dtype.type(beta2)
        if p.grad is not None:
            g = p.grad
            m += p.data.dtype.type(1.0 - beta1) * g
            v += p.data.dtype.type(1.0 - beta2) * (g * g)
        denom = np.sqrt(v)
        denom += p.data.dtype.type(eps * sq2)
        upd = m / denom
        upd *= p.data.dtype.type(step_scale)
        p.data -= upd
    return state


def clip_gradients(params, max_norm: float) -> float:
    total = 0.0
    for _, p in params.items():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for _, p in params.items():
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(scale)
    return norm


def bidirectional_step(net, frame1: np.ndarray, frame2: np.ndarray, config: TrainConfig, occlusion_enabled: bool):
    """One shared-weight pass over both frame orders; returns (report, graph).

    frame1/frame2: (N, 3, H, W) float32. Gradients are left on net.params.
    """
    n = frame1.shape[0]
    fwd = np.concatenate([frame1, frame2], axis=1)
    bwd = np.concatenate([frame2, frame1], axis=1)
    stacked = Tensor4(np.concatenate([fwd, bwd], axis=0))
    g = Graph()
    flow_full, _ = net.forward(g, stacked)
    flow_f = g.slice_batch(flow_full, 0, n)
    flow_b = g.slice_batch(flow_full, n, 2 * n)
    report = total_loss(
        g,
        Tensor4(frame1),
        Tensor4(frame2),
        flow_f,
        flow_b,
        weights=config.weights(),
        charb=config.charb(),
        census=config.census(),
        occ=config.occ(),
        occlusion_enabled=occlusion_enabled,
    )
    g.backward(report.node)
    return report, g


def predict_flow(net, frame1: np.ndarray, frame2: np.ndarray) -> np.ndarray:
    """Inference: (N, 3, H, W) pair to (N, 2, H, W) flow, no tape kept."""
    net.set_requires_grad(False)
    try:
        g = Graph()
        pair = Tensor4(np.concatenate([frame1, frame2], axis=1).astype(np.float32))
        full, _ = net.forward(g, pair)
        return full.data
    finally:
        net.set_requires_grad(True)


@dataclass
class TrainHistory:
    reports: list = field(default_factory=list)  # (step, LossReport)
    val_aee: list = field(default_factory=list)  # (step, aee)

    def moving_average(self, window: int):
        totals = np.array([r.total for _, r in self.reports])
        if totals.size < window:
            return np.array([])
        kernel = np.ones(window) / window
        return np.convolve(totals, kernel, mode="valid")


def _batch_indices(seed: int, step: int, n: int, batch: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xBA7C4, step)))
    return rng.integers(0, n, size=batch)


def _augment_item(item, seed: int, step: int, slot: int):
    params = AugmentParams(seed=int(np.random.SeedSequence((seed, 0xA46, step, slot)).generate_state(1)[0]))
    pair, _ = augment(
        ImagePair(item.frame1, item.frame2),
        GroundTruth(
            item.flow if item.flow is not None else np.zeros((2,) + item.frame1.shape[1:], np.float32),
            item.occlusion if item.occlusion is not None else np.zeros(item.frame1.shape[1:], np.float32),
        ),
        params,
    )
    return pair.frame1, pair.frame2


def validation_aee(net, items) -> float:
    """Mean AEE over a held-out split (items must carry ground truth)."""
    errs = []
    for it in items:
        flow = predict_flow(net, it.frame1[None], it.frame2[None])[0]
        errs.append(aee(flow, it.flow))
    return float(np.mean(errs))


def zero_flow_baseline_aee(items) -> float:
    errs = [aee(np.zeros_like(it.flow), it.flow) for it in items]
    return float(np.mean(errs))


def split_dataset(items, val_count: int):
    val_count = min(val_count, max(0, len(items) - 1))
    if val_count == 0:
        return items, []
    train = items[:-val_count]
    val = [it for it in items[-val_count:] if it.flow is not None]
    return train, val


def save_training_checkpoint(path, net, state: OptimizerState):
    entries = network_entries(net)
    entries["opt.step"] = np.array([state.step], dtype=np.float32)
    for name in state.m:
        entries[f"opt.m.{name}"] = state.m[name]
        entries[f"opt.v.{name}"] = state.v[name]
    write_checkpoint(path, entries)


def load_training_checkpoint(path):
    """Returns (net, OptimizerState) reconstructed from a checkpoint."""
    from .network import load_network

    extra: dict = {}
    net = load_network(path, extra_entries=extra)
    state = adam_init(net)
    if "opt.step" in extra:
        state.step = int(extra["opt.step"][0])
        for name in state.m:
            state.m[name] = extra[f"opt.m.{name}"].reshape(state.m[name].shape).astype(np.float32)
            state.v[name] = extra[f"opt.v.{name}"].reshape(state.v[name].shape).astype(np.float32)
    return net, state


def train(config: TrainConfig, out_dir, resume=None, log_fn=None, max_steps=None):
    """Run the two-stage schedule; returns (net, state, history, ckpt_path).

    Emits `step=...` history lines through log_fn and into
    out_dir/history.log, checkpoints every checkpoint_interval steps into
    out_dir, and always writes a final checkpoint. `max_steps` cuts the run
    short (used to compare resumed runs step for step).
    """
    items = read_dataset(config.dataset)
    train_items, val_items = split_dataset(items, config.val_count)
    if not train_items:
        raise DataError(f"dataset {config.dataset} has no training pairs left after the split")

    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "history.log")

    if resume is not None:
        net, state = load_training_checkpoint(resume)
        if abs(net.config.width_multiplier - config.width_multiplier) > 1e-6:
            raise ConfigError(
                f"checkpoint width multiplier {net.config.width_multiplier} "
                f"differs from config {config.width_multiplier}"
            )
    else:
        net = build_network(NetworkConfig(width_multiplier=config.width_multiplier), seed=config.seed)
        state = adam_init(net)

    history = TrainHistory()
    total = config.total_steps if max_steps is None else min(config.total_steps, max_steps)
    mode = "a" if resume is not None else "w"
    with open(log_path, mode) as log:
        def emit(line):
            log.write(line + "\n")
            if log_fn is not None:
                log_fn(line)

        for step in range(state.step, total):
            occlusion_enabled = step >= config.stage1_steps
            idx = _batch_indices(config.seed, step, len(train_items), config.batch_size)
            f1s, f2s = [], []
            for slot, i in enumerate(idx):
                it = train_items[int(i)]
                if config.augment:
                    a, b = _augment_item(it, config.seed, step, slot)
                else:
                    a, b = it.frame1, it.frame2
                f1s.append(a)
                f2s.append(b)
            frame1 = np.stack(f1s).astype(np.float32)
            frame2 = np.stack(f2s).astype(np.float32)

            net.zero_grad()
            report, _ = bidirectional_step(net, frame1, frame2, config, occlusion_enabled)
            if not np.isfinite(report.total):
                raise NanGradientError(f"non-finite loss at step {step}")
            for name, p in net.parameters():
                if p.grad is not None and not np.isfinite(p.grad).all():
                    raise NanGradientError(f"non-finite gradient in {name} at step {step}")
            clip_gradients(net.params, config.grad_clip_norm)
            optimizer_step(net.params, state, config.learning_rate, config.adam_beta1,
                           config.adam_beta2, config.adam_eps)

            history.reports.append((step, report))
            emit(report.line(step))

            done = step + 1
            if val_items and (done % config.val_interval == 0 or done == total):
                v = validation_aee(net, val_items)
                history.val_aee.append((step, v))
                emit(f"step={step} val_aee={v:.6f}")
            if config.checkpoint_interval > 0 and done % config.checkpoint_interval == 0 and done != total:
                save_training_checkpoint(os.path.join(out_dir, f"step{done:06d}.duf"), net, state)

    final = os.path.join(out_dir, "final.duf")
    save_training_checkpoint(final, net, state)
    return net, state, history, final
