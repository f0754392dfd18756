"""Costs, optimizer, example sampling, and the training loop."""

import numpy as np
import pytest

from ccrn import corpus as cp, diffcore as dc, netmodel as nm, objectives as obj
from ccrn.frontend import LogSpectrogram


def cost_loops(y, x):
    """Double-loop cost oracle over the frame matrix."""
    t, n = y.shape
    acc = 0.0
    for nn in range(n):
        inner = 0.0
        for tt in range(t):
            inner += (y[tt, nn] - x[tt, nn]) ** 2
        acc += inner / t
    return acc / n


class AdamOracle:
    """Plain Adam (no weight decay), the trajectory reference."""

    def __init__(self, lr, beta1, beta2, eps):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, theta, grad):
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class TestCost:
    def test_identity_is_zero(self):
        rng = np.random.default_rng(40)
        y = rng.standard_normal((6, 512))
        assert obj.mse_cost(LogSpectrogram(y), LogSpectrogram(y.copy())) == 0.0

    def test_constant_offset(self):
        rng = np.random.default_rng(41)
        y = rng.standard_normal((5, 512))
        assert abs(obj.mse_cost(y, y + 0.7) - 0.49) < 1e-12

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            t = int(rng.integers(2, 6))
            n = int(rng.integers(2, 8))
            y = rng.standard_normal((t, n))
            x = rng.standard_normal((t, n))
            assert abs(obj.mse_cost(y, x) - cost_loops(y, x)) < 1e-9

    def test_symmetry_and_nonnegativity(self):
        rng = np.random.default_rng(43)
        for _ in range(20):
            y = rng.standard_normal((4, 9))
            x = rng.standard_normal((4, 9))
            assert obj.mse_cost(y, x) == obj.mse_cost(x, y)
            assert obj.mse_cost(y, x) > 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            obj.mse_cost(np.zeros((3, 4)), np.zeros((3, 5)))


class TestProgressiveCost:
    def test_alpha_zero_reduces_to_plain(self):
        rng = np.random.default_rng(44)
        y = rng.standard_normal((4, 16))
        probes = [rng.standard_normal((4, 16)) for _ in range(3)]
        report = obj.progressive_cost(y, probes, alpha=0.0)
        assert report.total == report.main == obj.mse_cost(y, probes[-1])

    def test_equal_probes_scale(self):
        rng = np.random.default_rng(45)
        y = rng.standard_normal((4, 16))
        x = rng.standard_normal((4, 16))
        report = obj.progressive_cost(y, [x.copy() for _ in range(5)], alpha=0.1)
        assert abs(report.total - 1.1 * obj.mse_cost(y, x)) < 1e-12

    def test_hand_evaluated_example(self):
        # per-block costs {4, 2, 1}: total = 1 + 0.1 * (7/3)
        y = np.zeros((1, 4))
        probes = [np.full((1, 4), 2.0), np.full((1, 4), np.sqrt(2.0)), np.full((1, 4), 1.0)]
        report = obj.progressive_cost(y, probes, alpha=0.1)
        assert abs(report.total - (1.0 + 0.1 * (7.0 / 3.0))) < 1e-12
        assert [round(c, 9) for c in report.per_block] == [4.0, 2.0, 1.0]

    def test_exclude_final_switch(self):
        y = np.zeros((1, 2))
        probes = [np.full((1, 2), 2.0), np.full((1, 2), 1.0)]
        report = obj.progressive_cost(y, probes, alpha=0.5, exclude_final=True)
        assert abs(report.total - (1.0 + 0.5 * 4.0)) < 1e-12

    def test_empty_probes_rejected(self):
        with pytest.raises(ValueError, match="block"):
            obj.progressive_cost(np.zeros((2, 2)), [], alpha=0.1)

    def test_graph_matches_report(self):
        rng = np.random.default_rng(46)
        y = rng.standard_normal((4, 10))
        probes = [dc.parameter(rng.standard_normal((4, 10))) for _ in range(3)]
        total, report = obj.cost_graph(probes[-1], probes, y, alpha=0.1)
        want = obj.progressive_cost(y.T, [p.value.T for p in probes], alpha=0.1)
        assert abs(float(total.value) - want.total) < 1e-12
        assert abs(report.total - want.total) < 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(47)
        config = nm.ModelConfig(blocks=2, channels=8, input_dim=12)
        model = nm.build_model(config, seed=1, dtype=np.float64)
        x = rng.standard_normal((12, 12))
        y = rng.standard_normal((8, 12))

        def loss_fn():
            final, probes = nm.forward_nodes(model, dc.Node(x), want_probes=True)
            total, _ = obj.cost_graph(final, probes, y, alpha=0.1)
            return total

        assert dc.kink_margin(loss_fn()) > 1e-3
        params = [node for _, node in nm.named_parameters(model)]
        assert dc.grad_check(loss_fn, params) < 1e-4


class TestAdamW:
    def test_zero_gradient_no_decay_keeps_parameters(self):
        p = dc.parameter(np.array([1.0, -2.0]))
        p.grad = np.zeros(2)
        cfg = obj.TrainConfig(weight_decay=0.0, lr=1e-3)
        state = obj.OptimizerState()
        obj.adamw_step([("p", p)], state, cfg)
        assert np.array_equal(p.value, [1.0, -2.0])

    def test_first_step_hand_evaluated(self):
        p = dc.parameter(np.array([1.0]))
        p.grad = np.array([0.5])
        cfg = obj.TrainConfig(lr=1e-3, weight_decay=0.0)
        obj.adamw_step([("p", p)], obj.OptimizerState(), cfg)
        # bias-corrected mhat = 0.5, sqrt(vhat) = 0.5: step ~ lr
        assert abs(p.value[0] - (1.0 - 1e-3 * 0.5 / (0.5 + 1e-8))) < 1e-12

    def test_decay_only_step(self):
        p = dc.parameter(np.array([2.0]))
        p.grad = np.zeros(1)
        cfg = obj.TrainConfig(lr=1e-3, weight_decay=0.1)
        obj.adamw_step([("p", p)], obj.OptimizerState(), cfg)
        assert abs(p.value[0] - 2.0 * (1.0 - 1e-4)) < 1e-12

    def test_missing_gradient_rejected(self):
        p = dc.parameter(np.ones(2))
        with pytest.raises(ValueError, match="no gradient"):
            obj.adamw_step([("p", p)], obj.OptimizerState(), obj.TrainConfig())

    def test_nan_gradient_rejects_whole_step(self):
        a = dc.parameter(np.ones(2))
        b = dc.parameter(np.ones(2))
        a.grad = np.ones(2)
        b.grad = np.array([np.nan, 0.0])
        state = obj.OptimizerState()
        with pytest.raises(ValueError, match="non-finite"):
            obj.adamw_step([("a", a), ("b", b)], state, obj.TrainConfig())
        assert np.array_equal(a.value, np.ones(2))
        assert state.t == 0

    def test_wd_zero_matches_adam_oracle(self):
        rng = np.random.default_rng(48)
        for _ in range(100):
            theta = rng.standard_normal(5)
            p = dc.parameter(theta.copy())
            cfg = obj.TrainConfig(lr=1e-3, weight_decay=0.0)
            state = obj.OptimizerState()
            oracle = AdamOracle(cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon)
            ref = theta.copy()
            for _step in range(10):
                g = rng.standard_normal(5)
                p.grad = g.copy()
                obj.adamw_step([("p", p)], state, cfg)
                ref = oracle.step(ref, g)
            assert np.max(np.abs(p.value - ref)) < 1e-9


@pytest.fixture(scope="module")
def small_corpus():
    return [cp.synth_speech(1.5, seed=60 + i) for i in range(3)]


def small_train_config(**kw):
    base = dict(steps=3, seq_len=60, batch_size=2, lr=1e-3, seed=13, checkpoint_interval=0)
    base.update(kw)
    return obj.TrainConfig(**base)


class TestSampling:
    def test_deterministic(self, small_corpus):
        cfg = small_train_config()
        f1, y1 = obj.sample_example(small_corpus, cfg, 5)
        f2, y2 = obj.sample_example(small_corpus, cfg, 5)
        assert np.array_equal(f1.frames, f2.frames)
        assert np.array_equal(y1.frames, y2.frames)

    def test_segment_shapes(self, small_corpus):
        cfg = small_train_config(seq_len=50)
        feats, target = obj.sample_example(small_corpus, cfg, 2)
        assert feats.frames.shape == (50, 876)
        assert target.frames.shape == (50, 512)

    def test_default_length_segments(self):
        corpus = [cp.synth_speech(2.5, seed=77)]
        feats, target = obj.sample_example(corpus, obj.TrainConfig(), 0)
        assert feats.frames.shape == (200, 876)
        assert target.frames.shape == (200, 512)

    def test_identity_corruption_aligns_features_with_target(self, small_corpus):
        cfg = small_train_config(rt60_choices=(0.0,), snr_db=float("inf"))
        feats, target = obj.sample_example(small_corpus, cfg, 1)
        restored = feats.frames[:, :512] * feats.norm_scale[:512]
        assert np.max(np.abs(restored - target.frames)) < 1e-6

    def test_too_short_resampled(self, small_corpus):
        cfg = small_train_config(seq_len=120)  # only ~1.5 s utterances: still fits
        feats, _ = obj.sample_example(small_corpus, cfg, 0)
        assert feats.frames.shape[0] == 120

    def test_impossible_length_rejected(self, small_corpus):
        cfg = small_train_config(seq_len=400)
        with pytest.raises(ValueError, match="long enough"):
            obj.sample_example(small_corpus, cfg, 0)

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            obj.sample_example([], small_train_config(), 0)


class TestTrain:
    def test_reports_structure(self, small_corpus):
        model = nm.build_model(nm.ModelConfig(blocks=2, channels=64), seed=2)
        reports = obj.train(model, small_corpus, small_train_config())
        assert len(reports) == 3
        assert all(len(r.per_block) == 2 for r in reports)
        assert all(np.isfinite(r.total) for r in reports)

    def test_log_csv_columns(self, small_corpus, tmp_path):
        model = nm.build_model(nm.ModelConfig(blocks=2, channels=64), seed=2)
        log = tmp_path / "log.csv"
        obj.train(model, small_corpus, small_train_config(), log_path=log)
        lines = log.read_text().strip().splitlines()
        assert lines[0] == "step,total,main,per_block_1,per_block_2"
        assert len(lines) == 4
        assert all(len(line.split(",")) == 5 for line in lines[1:])

    def test_alpha_zero_equals_plain_cost_trajectory(self, small_corpus):
        config = nm.ModelConfig(blocks=2, channels=64)
        cfg = small_train_config(alpha=0.0, steps=4)

        trained = nm.build_model(config, seed=3)
        obj.train(trained, small_corpus, cfg)

        manual = nm.build_model(config, seed=3)
        params = nm.named_parameters(manual)
        state = obj.OptimizerState()
        nm.set_training(manual, True)
        for step in range(cfg.steps):
            x_np, y_np = obj._batch(small_corpus, cfg, step, np.float32, config.channels)
            final, _ = nm.forward_nodes(manual, dc.Node(x_np), want_probes=True)
            loss = dc.mse(final, y_np)
            dc.zero_grads(node for _, node in params)
            dc.backprop(loss)
            obj.adamw_step(params, state, cfg)

        for (_, a), (_, b) in zip(nm.named_parameters(trained), params):
            assert np.array_equal(a.value, b.value)

    def test_checkpoints_bit_identical_across_runs(self, small_corpus, tmp_path):
        config = nm.ModelConfig(blocks=2, channels=64)
        blobs = []
        for run in range(2):
            model = nm.build_model(config, seed=4)
            path = tmp_path / f"run{run}.bin"
            obj.train(model, small_corpus, small_train_config(), checkpoint_path=path)
            blobs.append(path.read_bytes())
        assert blobs[0] == blobs[1]

    def test_resume_reproduces_trajectory(self, small_corpus, tmp_path):
        config = nm.ModelConfig(blocks=2, channels=64)
        full_cfg = small_train_config(steps=6)
        half_cfg = small_train_config(steps=3)

        straight = nm.build_model(config, seed=5)
        obj.train(straight, small_corpus, full_cfg, checkpoint_path=tmp_path / "straight.bin")

        half = nm.build_model(config, seed=5)
        obj.train(half, small_corpus, half_cfg, checkpoint_path=tmp_path / "half.bin")
        resumed, extra = nm.load_checkpoint(tmp_path / "half.bin")
        state, start = obj.resume_state(extra)
        obj.train(resumed, small_corpus, full_cfg, opt_state=state, start_step=start,
                  checkpoint_path=tmp_path / "resumed.bin")

        assert (tmp_path / "straight.bin").read_bytes() == (tmp_path / "resumed.bin").read_bytes()

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    def test_divergence_aborts(self, small_corpus, tmp_path):
        model = nm.build_model(nm.ModelConfig(blocks=2, channels=64), seed=6)
        # an absurd learning rate blows the cost up within a few steps
        cfg = small_train_config(steps=40, lr=1e6, checkpoint_interval=1)
        path = tmp_path / "ck.bin"
        with pytest.raises((obj.TrainingDiverged, ValueError)):
            obj.train(model, small_corpus, cfg, checkpoint_path=path)
        assert path.exists()  # last good checkpoint retained
