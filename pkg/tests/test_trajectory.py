import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sewa.nn import DatasetSplit, MlpSpec, loss, mlp_init
from sewa.trajectory import (
    Checkpoint,
    ConstantLR,
    CosineLR,
    DivergenceError,
    MagicMismatchError,
    ManifestDimensionError,
    SgdConfig,
    TrajectoryWindow,
    TruncatedCheckpointError,
    VersionMismatchError,
    encode_checkpoint,
    load_window,
    save_window,
    sgd_train,
    window_collect,
)


@pytest.fixture
def small_problem():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 3))
    y = (X[:, 0] + 0.3 * X[:, 1] > 0).astype(int)
    return MlpSpec((3, 5, 2), "tanh"), DatasetSplit(X, y)


def _stream(n, dim=4, seed=0):
    rng = np.random.default_rng(seed)
    return [Checkpoint(10 * (i + 1), rng.normal(size=dim), float(i)) for i in range(n)]


class TestSgd:
    def test_zero_rate_keeps_init(self, small_problem):
        spec, data = small_problem
        final, _ = sgd_train(spec, data, SgdConfig(20, ConstantLR(0.0), seed=3))
        assert final.tobytes() == mlp_init(spec, 3).tobytes()

    def test_quadratic_closed_form(self):
        # loss (w*1 - 0)^2, gradient 2w: w_{t+1} = w_t (1 - 2 alpha)
        spec = MlpSpec((1, 1), "identity", "mse", bias=False)
        data = DatasetSplit(np.array([[1.0]]), np.array([0.0]))
        alpha, w0 = 0.1, 1.7
        _, stream = sgd_train(spec, data, SgdConfig(10, ConstantLR(alpha)), w0=np.array([w0]))
        for cp in stream:
            assert cp.weights[0] == pytest.approx(w0 * (1 - 2 * alpha) ** cp.step, rel=1e-14)

    def test_capture_cadence(self, small_problem):
        spec, data = small_problem
        _, stream = sgd_train(spec, data, SgdConfig(100, ConstantLR(0.05), capture_every=10))
        assert [c.step for c in stream] == list(range(10, 101, 10))

    def test_last_step_always_captured(self, small_problem):
        spec, data = small_problem
        _, stream = sgd_train(spec, data, SgdConfig(25, ConstantLR(0.05), capture_every=10))
        assert [c.step for c in stream] == [10, 20, 25]

    def test_deterministic(self, small_problem):
        spec, data = small_problem
        cfg = SgdConfig(50, ConstantLR(0.1), batch_size=4, seed=9, capture_every=5)
        _, a = sgd_train(spec, data, cfg)
        _, b = sgd_train(spec, data, cfg)
        assert all(x.weights.tobytes() == y.weights.tobytes() for x, y in zip(a, b))

    def test_samples_independent_of_cadence(self, small_problem):
        spec, data = small_problem
        f1, _ = sgd_train(spec, data, SgdConfig(30, ConstantLR(0.1), seed=4, capture_every=1))
        f2, _ = sgd_train(spec, data, SgdConfig(30, ConstantLR(0.1), seed=4, capture_every=7))
        assert f1.tobytes() == f2.tobytes()

    def test_divergence_guard(self):
        spec = MlpSpec((1, 1), "identity", "mse")
        data = DatasetSplit(np.array([[10.0]]), np.array([0.0]))
        with pytest.raises(DivergenceError) as exc:
            sgd_train(spec, data, SgdConfig(200, ConstantLR(5.0)), w0=np.array([1.0, 0.0]))
        assert exc.value.step > 0

    def test_convex_full_batch_monotone(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(60, 4))
        y = (X @ rng.normal(size=4) + 0.5 * rng.normal(size=60) > 0).astype(int)
        data = DatasetSplit(X, y)
        spec = MlpSpec((4, 1), "identity", "logistic_binary")
        beta = float(((X**2).sum(axis=1) + 1).max() / 4)
        cfg = SgdConfig(200, ConstantLR(2 / beta), full_batch=True, capture_every=5)
        _, stream = sgd_train(spec, data, cfg)
        losses = [c.train_loss for c in stream]
        assert all(b <= a + 1e-10 for a, b in zip(losses, losses[1:]))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SgdConfig(10, CosineLR(0.1, 0.01, 10))
        with pytest.raises(ValueError):
            SgdConfig(10, CosineLR(0.01, 0.1, 2))
        with pytest.raises(ValueError):
            SgdConfig(10, ConstantLR(0.1), capture_every=3, report_every=10)
        SgdConfig(30, ConstantLR(0.1), capture_every=3, report_every=9)

    def test_cosine_schedule_shape(self):
        lr = CosineLR(1.0, 0.1, 75)
        assert lr(0, 100) == lr(74, 100) == 1.0
        assert lr(75, 100) == pytest.approx(1.0)
        assert lr(99, 100) == pytest.approx(0.1)
        vals = [lr(t, 100) for t in range(75, 100)]
        assert all(b <= a for a, b in zip(vals, vals[1:]))


class TestWindow:
    def test_last_k(self):
        s = _stream(5)
        w = window_collect(s, 3)
        assert w.steps == [30, 40, 50]

    def test_truncation(self):
        w = window_collect(_stream(2), 5)
        assert len(w) == 2 and w.k == 5

    def test_empty(self):
        with pytest.raises(ValueError):
            window_collect([], 3)

    @settings(max_examples=50, deadline=None)
    @given(n=st.integers(1, 40), k=st.integers(1, 50), seed=st.integers(0, 1000))
    def test_ordering_property(self, n, k, seed):
        rng = np.random.default_rng(seed)
        steps = np.sort(rng.choice(10_000, size=n, replace=False)) + 1
        stream = [Checkpoint(int(s), rng.normal(size=3), 0.0) for s in steps]
        w = window_collect(stream, k)
        assert w.steps == sorted(int(s) for s in steps)[-min(k, n):]
        assert len(w) <= k

    def test_rejects_bad_order(self):
        a, b = _stream(2)
        with pytest.raises(ValueError):
            TrajectoryWindow((b, a), 2)


class TestPersistence:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        cps = [Checkpoint(i + 1, rng.normal(size=67) * 10.0 ** rng.integers(-300, 300, 67), rng.random()) for i in range(4)]
        cps[0].weights[0] = -0.0
        w = TrajectoryWindow(tuple(cps), 6)
        save_window(w, tmp_path)
        back = load_window(tmp_path)
        assert back.k == 6 and back.steps == w.steps
        for x, y in zip(w.checkpoints, back.checkpoints):
            assert x.weights.tobytes() == y.weights.tobytes()
            assert x.train_loss == y.train_loss

    def test_manifest_keys(self, tmp_path):
        save_window(window_collect(_stream(2), 2), tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert list(manifest) == ["version", "dim", "k", "steps", "train_losses", "files"]
        assert manifest["files"] == ["ckpt_000000.bin", "ckpt_000001.bin"]

    def test_binary_layout(self):
        blob = encode_checkpoint(7, np.array([1.5, -2.0]))
        assert blob[:8] == b"SEWACKPT"
        assert blob[8:12] == (1).to_bytes(4, "little")
        assert blob[12:20] == (7).to_bytes(8, "little")
        assert blob[20:28] == (2).to_bytes(8, "little")
        assert np.frombuffer(blob[28:], "<f8").tolist() == [1.5, -2.0]
        assert len(blob) == 28 + 16

    def test_corrupt_magic(self, tmp_path):
        save_window(window_collect(_stream(2), 2), tmp_path)
        f = tmp_path / "ckpt_000001.bin"
        f.write_bytes(b"XEWACKPT" + f.read_bytes()[8:])
        with pytest.raises(MagicMismatchError):
            load_window(tmp_path)

    def test_bad_version(self, tmp_path):
        save_window(window_collect(_stream(1), 1), tmp_path)
        f = tmp_path / "ckpt_000000.bin"
        raw = bytearray(f.read_bytes())
        raw[8] = 2
        f.write_bytes(bytes(raw))
        with pytest.raises(VersionMismatchError):
            load_window(tmp_path)

    def test_truncated_payload(self, tmp_path):
        save_window(window_collect(_stream(1, dim=67), 1), tmp_path)
        f = tmp_path / "ckpt_000000.bin"
        f.write_bytes(f.read_bytes()[:-8])
        with pytest.raises(TruncatedCheckpointError):
            load_window(tmp_path)

    def test_manifest_dim_disagreement(self, tmp_path):
        save_window(window_collect(_stream(1, dim=66), 1), tmp_path)
        m = json.loads((tmp_path / "manifest.json").read_text())
        m["dim"] = 67
        (tmp_path / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(ManifestDimensionError):
            load_window(tmp_path)
