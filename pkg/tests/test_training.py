import numpy as np
import pytest

from duflow.errors import ConfigError, NanGradientError
from duflow.network import NetworkConfig, build_network
from duflow.scenes import SceneSpec, write_dataset
from duflow.tensor import Bias, Graph, Tensor4
from duflow.training import (
    OptimizerState,
    TrainConfig,
    adam_init,
    bidirectional_step,
    clip_gradients,
    load_training_checkpoint,
    optimizer_step,
    parse_config,
    predict_flow,
    train,
    validation_aee,
    zero_flow_baseline_aee,
)

import oracles

RHO0 = 0.001995262314968879


class _OneParam:
    """Minimal parameter holder compatible with optimizer_step."""

    def __init__(self, value):
        self.data = np.array([value], dtype=np.float64)
        self.grad = None


def fresh_state(params):
    return OptimizerState(
        {k: np.zeros_like(p.data) for k, p in params.items()},
        {k: np.zeros_like(p.data) for k, p in params.items()},
        0,
    )


class TestOptimizer:
    def test_zero_gradient_leaves_parameters(self):
        p = _OneParam(1.25)
        params = {"p": p}
        state = fresh_state(params)
        p.grad = np.array([0.0])
        optimizer_step(params, state, 1e-3, 0.9, 0.999, 1e-8)
        assert p.data[0] == 1.25
        # decaying moments: preloaded first moment shrinks without gradient
        state.m["p"][0] = 1.0
        before = state.m["p"][0]
        p.grad = np.array([0.0])
        optimizer_step(params, state, 0.0, 0.9, 0.999, 1e-8)
        assert state.m["p"][0] == pytest.approx(before * 0.9)

    def test_constant_gradient_update_approaches_lr(self):
        lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
        p = _OneParam(0.0)
        params = {"p": p}
        state = fresh_state(params)
        g = 0.37
        traj = []
        for _ in range(400):
            before = p.data[0]
            p.grad = np.array([g])
            optimizer_step(params, state, lr, b1, b2, eps)
            traj.append(p.data[0] - before)
        ref = oracles.adam_reference([g] * 400, lr, b1, b2, eps)
        np.testing.assert_allclose(traj, ref, rtol=1e-9)
        assert abs(abs(traj[-1]) - lr) < 0.02 * lr

    def test_first_step_scale_invariance(self):
        lr = 1e-3
        pa, pb = _OneParam(0.0), _OneParam(0.0)
        params = {"a": pa, "b": pb}
        state = fresh_state(params)
        pa.grad = np.array([0.2])
        pb.grad = np.array([0.4])
        optimizer_step(params, state, lr, 0.9, 0.999, 1e-8)
        assert abs(pa.data[0]) == pytest.approx(abs(pb.data[0]), rel=1e-5)
        assert abs(pa.data[0]) == pytest.approx(lr, rel=1e-3)

    def test_clip_gradients(self):
        p = _OneParam(0.0)
        p.grad = np.array([30.0, 40.0]).reshape(2)
        p.data = np.zeros(2)
        norm = clip_gradients({"p": p}, 10.0)
        assert norm == pytest.approx(50.0)
        assert np.linalg.norm(p.grad) == pytest.approx(10.0)
        q = _OneParam(0.0)
        q.grad = np.array([0.3])
        clip_gradients({"q": q}, 10.0)
        assert q.grad[0] == pytest.approx(0.3)


class TestConfig:
    def test_parse_round_trip(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text(
            "# toy run\n"
            "dataset = /data/toy\n"
            "stage1_steps = 10\n"
            "stage2_steps = 5\n"
            "batch_size = 2\n"
            "learning_rate = 2e-4  # fast\n"
            "augment = 0\n"
        )
        cfg = parse_config(path)
        assert cfg.dataset == "/data/toy"
        assert cfg.stage1_steps == 10 and cfg.stage2_steps == 5
        assert cfg.learning_rate == pytest.approx(2e-4)
        assert cfg.augment == 0
        assert cfg.w_smooth == 3.0  # untouched default

    def test_unknown_key_lists_valid_keys(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("learning_rte = 1e-4\n")
        with pytest.raises(ConfigError) as ei:
            parse_config(path)
        msg = str(ei.value)
        assert "learning_rte" in msg and "learning_rate" in msg

    def test_bad_value(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("stage1_steps = soon\n")
        with pytest.raises(ConfigError):
            parse_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(tmp_path / "absent.cfg")


class TestBidirectionalStep:
    def _net(self, seed=0):
        return build_network(NetworkConfig(width_multiplier=0.0625), seed=seed)

    def test_identical_frames_zero_flow_floor(self):
        net = self._net()
        rng = np.random.default_rng(0)
        img = rng.uniform(size=(2, 3, 32, 32)).astype(np.float32)
        cfg = TrainConfig()
        net.zero_grad()
        report, _ = bidirectional_step(net, img, img.copy(), cfg, occlusion_enabled=False)
        assert report.data_f == pytest.approx(RHO0, rel=1e-3)
        assert report.data_b == pytest.approx(RHO0, rel=1e-3)
        assert report.fb == pytest.approx(RHO0, rel=1e-3)
        assert report.smooth == pytest.approx(RHO0, rel=1e-3)

    def test_swapped_frame_order_swaps_flows_exactly(self):
        net = self._net(seed=3)
        rng = np.random.default_rng(1)
        pw = net.weight("predictor")
        pw.data = rng.normal(scale=0.05, size=pw.data.shape).astype(np.float32)
        f1 = rng.uniform(size=(2, 3, 32, 32)).astype(np.float32)
        f2 = rng.uniform(size=(2, 3, 32, 32)).astype(np.float32)
        a = predict_flow(net, f1, f2)
        b = predict_flow(net, f2, f1)
        stacked_ab = np.concatenate(
            [np.concatenate([f1, f2], axis=1), np.concatenate([f2, f1], axis=1)], axis=0
        )
        stacked_ba = np.concatenate(
            [np.concatenate([f2, f1], axis=1), np.concatenate([f1, f2], axis=1)], axis=0
        )
        g = Graph()
        net.set_requires_grad(False)
        try:
            out_ab, _ = net.forward(g, Tensor4(stacked_ab))
            out_ba, _ = net.forward(g, Tensor4(stacked_ba))
        finally:
            net.set_requires_grad(True)
        n = 2
        assert out_ab.data[:n].tobytes() == out_ba.data[n:].tobytes()
        assert out_ab.data[n:].tobytes() == out_ba.data[:n].tobytes()
        assert out_ab.data[:n].tobytes() == a.tobytes()
        assert out_ab.data[n:].tobytes() == b.tobytes()

    def test_direction_gradients_add(self):
        from duflow.losses import occlusion_masks, occlusion_aware_data_loss

        net = self._net(seed=4)
        rng = np.random.default_rng(2)
        pw = net.weight("predictor")
        pw.data = rng.normal(scale=0.05, size=pw.data.shape).astype(np.float32)
        f1 = rng.uniform(size=(1, 3, 32, 32)).astype(np.float32)
        f2 = rng.uniform(size=(1, 3, 32, 32)).astype(np.float32)

        def run(which):
            net.zero_grad()
            g = Graph()
            stacked = Tensor4(
                np.concatenate(
                    [np.concatenate([f1, f2], axis=1), np.concatenate([f2, f1], axis=1)], axis=0
                )
            )
            full, _ = net.forward(g, stacked)
            mf = g.slice_batch(full, 0, 1)
            mb = g.slice_batch(full, 1, 2)
            masks = occlusion_masks(mf, mb)
            df, db, _ = occlusion_aware_data_loss(
                g, Tensor4(f1), Tensor4(f2), mf, mb, masks
            )
            loss = {"f": df, "b": db, "fb": g.add(df, db)}[which]
            g.backward(loss)
            return net.weight("conv1").grad.copy()

        gf = run("f")
        gb = run("b")
        gsum = run("fb")
        np.testing.assert_allclose(gsum, gf + gb, rtol=1e-4, atol=1e-7)


def _toy_dataset(tmp_path, count=8, hw=32):
    d = tmp_path / "data"
    write_dataset(d, SceneSpec(height=hw, width=hw, n_sprites=1, seed=0), count=count, seed=42)
    return str(d)


def _toy_config(dataset, **kw):
    base = dict(
        dataset=dataset,
        stage1_steps=3,
        stage2_steps=2,
        batch_size=2,
        width_multiplier=0.0625,
        seed=7,
        val_count=2,
        val_interval=5,
        checkpoint_interval=100,
        augment=0,
    )
    base.update(kw)
    return TrainConfig(**base)


class TestTrainLoop:
    def test_smoke_run_writes_history_and_checkpoint(self, tmp_path):
        cfg = _toy_config(_toy_dataset(tmp_path))
        out = tmp_path / "run"
        net, state, history, final = train(cfg, out)
        assert state.step == 5
        steps = [s for s, _ in history.reports]
        assert steps == sorted(steps) == list(range(5))
        assert (out / "history.log").exists()
        text = (out / "history.log").read_text()
        assert "step=0 total=" in text
        assert "val_aee=" in text
        assert (out / "final.duf").exists()
        # stage flag: steps 0-2 stage 1, steps 3-4 stage 2
        assert len(history.val_aee) >= 1

    def test_zero_steps_returns_initial_state(self, tmp_path):
        cfg = _toy_config(_toy_dataset(tmp_path), stage1_steps=0, stage2_steps=0)
        out = tmp_path / "run0"
        net, state, history, final = train(cfg, out)
        assert state.step == 0
        assert history.reports == []
        fresh = build_network(NetworkConfig(width_multiplier=0.0625), seed=7)
        for (name, a), (_, b) in zip(net.parameters(), fresh.parameters()):
            assert a.data.tobytes() == b.data.tobytes(), name

    def test_resume_is_bit_exact(self, tmp_path):
        data = _toy_dataset(tmp_path)
        cfg = _toy_config(data, stage1_steps=4, stage2_steps=1, augment=1)
        straight = train(cfg, tmp_path / "straight")

        partial = train(cfg, tmp_path / "partial", max_steps=4)
        resumed = train(cfg, tmp_path / "resumed", resume=partial[3])

        net_a, state_a = straight[0], straight[1]
        net_b, state_b = resumed[0], resumed[1]
        assert state_a.step == state_b.step == 5
        for (name, pa), (_, pb) in zip(net_a.parameters(), net_b.parameters()):
            assert pa.data.tobytes() == pb.data.tobytes(), name
        for name in state_a.m:
            assert state_a.m[name].tobytes() == state_b.m[name].tobytes()
            assert state_a.v[name].tobytes() == state_b.v[name].tobytes()

    def test_checkpoint_carries_optimizer_state(self, tmp_path):
        cfg = _toy_config(_toy_dataset(tmp_path))
        net, state, _, final = train(cfg, tmp_path / "run")
        net2, state2 = load_training_checkpoint(final)
        assert state2.step == state.step
        for name in state.m:
            assert state.m[name].tobytes() == state2.m[name].tobytes()

    def test_nan_learning_rate_aborts_with_step_index(self, tmp_path):
        cfg = _toy_config(_toy_dataset(tmp_path), learning_rate=1e30)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(NanGradientError) as ei:
                train(cfg, tmp_path / "boom")
        assert "step" in str(ei.value)

    def test_validation_and_baseline_metrics(self, tmp_path):
        from duflow.scenes import read_dataset
        from duflow.training import split_dataset

        items = read_dataset(_toy_dataset(tmp_path))
        _, val = split_dataset(items, 3)
        assert len(val) == 3
        base = zero_flow_baseline_aee(val)
        assert base > 0.3
        net = build_network(NetworkConfig(width_multiplier=0.0625), seed=1)
        v = validation_aee(net, val)  # zero-init predictor: equals baseline
        assert v == pytest.approx(base, rel=1e-5)
