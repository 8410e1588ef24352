import csv
import io
import json
import math
import statistics

import numpy as np
import pytest

from sewa import bench
from sewa.averagers import BinaryMask, apply_mask, uniform_average
from sewa.bench import MethodRow, emit_summary, run_experiment, run_seed, summary_csv
from sewa.config import ConfigError, parse_config
from sewa.nn import accuracy, loss
from sewa.trajectory import load_checkpoint, load_window, sgd_train


def base_config(tmp_path, **kw):
    raw = dict(
        dataset=dict(kind="blobs", n=200, p=2, classes=3, noise=1.5, seed=0),
        model=dict(layer_sizes=[2, 6, 3], activation="tanh"),
        train=dict(steps=200, lr=dict(alpha=0.2), batch_size=4, capture_every=5),
        window_k=12,
        methods=[dict(name="sgd_final")],
        seeds=[0, 1],
        output_dir=str(tmp_path / "out"),
        workers=1,
    )
    raw.update(kw)
    return raw


class TestConfig:
    def test_valid(self, tmp_path):
        cfg = parse_config(base_config(tmp_path))
        assert cfg.model.spec().n_params == 2 * 6 + 6 + 6 * 3 + 3

    @pytest.mark.parametrize("patch", [
        {"unknown": 1},
        {"window_k": 41},
        {"methods": []},
        {"methods": [{"name": "lawa"}]},
        {"methods": [{"name": "lawa", "K": 13}]},
        {"methods": [{"name": "sgd_final", "colour": "red"}]},
        {"methods": [{"name": "sgd_final"}, {"name": "sgd_final"}]},
        {"seeds": [1, 1]},
        {"dataset": {"kind": "csv", "path": "/nonexistent.csv", "label_column": "y"}},
        {"dataset": {"kind": "blobs", "n": 10, "p": 2, "classes": 1, "noise": 0.0}},
        {"model": {"layer_sizes": [2, 1], "loss_kind": "cross_entropy_softmax"}},
        {"val_fraction": 0.0, "methods": [{"name": "sewa", "K": 2}]},
    ])
    def test_rejects(self, tmp_path, patch):
        with pytest.raises(ConfigError):
            parse_config(base_config(tmp_path, **patch))

    def test_ragged_capture_count(self, tmp_path):
        # 200 steps every 7 -> 29 captures (28 on cadence plus the last step)
        parse_config(base_config(tmp_path, train=dict(steps=200, lr=dict(alpha=0.1), capture_every=7), window_k=29))


class TestPipeline:
    def test_sgd_final_is_direct_evaluation(self, tmp_path):
        cfg = parse_config(base_config(tmp_path))
        out = run_seed(cfg, 0)
        fit, _, test = bench.prepare_data(cfg)
        w, _ = sgd_train(cfg.model.spec(), fit, cfg.train.sgd(0))
        assert out.rows[0].eval_loss == loss(w, cfg.model.spec(), test)
        assert out.rows[0].eval_acc == accuracy(w, cfg.model.spec(), test)

    def test_full_selection_degeneracy(self, tmp_path):
        methods = [dict(name="uniform"), dict(name="lawa", K=12), dict(name="random", K=12, draws=3)]
        cfg = parse_config(base_config(tmp_path, methods=methods))
        rows = run_seed(cfg, 1, persist=False).rows
        assert rows[0].eval_loss == rows[1].eval_loss == rows[2].eval_loss

    def test_reported_loss_matches_persisted_weights(self, tmp_path):
        methods = [dict(name="sgd_final"), dict(name="uniform"), dict(name="swa"), dict(name="ema", decay=0.8),
                   dict(name="lawa", K=3), dict(name="random", K=3, draws=2),
                   dict(name="sewa", K=3, gs=dict(iterations=5, M=2))]
        cfg = parse_config(base_config(tmp_path, methods=methods))
        out = run_seed(cfg, 0)
        spec = cfg.model.spec()
        _, _, test = bench.prepare_data(cfg)
        seed_dir = tmp_path / "out" / "seed_0"
        window = load_window(seed_dir / "window")
        for m, row in zip(cfg.methods, out.rows):
            label = bench.method_label(m)
            files = sorted(seed_dir.glob(f"avg_{label}*.bin"))
            assert len(files) == (2 if m.name == "random" else 1)
            reloaded = np.mean([loss(load_checkpoint(f)[1], spec, test) for f in files])
            assert row.eval_loss == pytest.approx(reloaded, rel=1e-15)
        # window-only methods can be rebuilt from the persisted window alone
        assert load_checkpoint(seed_dir / "avg_uniform.bin")[1].tobytes() == uniform_average(window).weights.tobytes()
        mask = json.loads((seed_dir / "sewa_K3_mask.json").read_text())
        rebuilt = apply_mask(window, BinaryMask.from_indices(12, mask["indices"]))
        assert load_checkpoint(seed_dir / "avg_sewa_K3.bin")[1].tobytes() == rebuilt.weights.tobytes()
        assert (seed_dir / "sewa_K3_history.csv").read_text().startswith("iteration,temperature,objective,s_0,")

    def test_deterministic_summary(self, tmp_path):
        methods = [dict(name="uniform"), dict(name="sewa", K=2, gs=dict(iterations=3, M=2))]
        a = parse_config(base_config(tmp_path / "a", methods=methods))
        b = parse_config(base_config(tmp_path / "b", methods=methods, workers=2))
        run_experiment(a)
        run_experiment(b)
        assert (tmp_path / "a/out/summary.csv").read_bytes() == (tmp_path / "b/out/summary.csv").read_bytes()

    def test_failing_seed_does_not_stop_others(self, tmp_path, monkeypatch):
        real = bench.run_seed

        def flaky(cfg, seed, persist=True):
            if seed == 1:
                raise FloatingPointError("boom")
            return real(cfg, seed, persist)

        monkeypatch.setattr(bench, "run_seed", flaky)
        cfg = parse_config(base_config(tmp_path, seeds=[0, 1, 2]))
        outcomes = run_experiment(cfg)
        assert [o.error is None for o in outcomes] == [True, False, True]
        lines = (tmp_path / "out/summary.csv").read_text().splitlines()
        assert [l.split(",")[2] for l in lines[1:3]] == ["0", "2"]

    def test_worker_env(self, tmp_path, monkeypatch):
        cfg = parse_config(base_config(tmp_path))
        monkeypatch.setenv("SEWA_WORKERS", "3")
        assert bench.worker_count(cfg) == 3
        monkeypatch.delenv("SEWA_WORKERS")
        assert bench.worker_count(cfg) == 1


class TestSummary:
    def test_golden_single_row(self, tmp_path):
        emit_summary([MethodRow("uniform", None, 7, 0.25, 0.75)], tmp_path)
        assert (tmp_path / "summary.csv").read_text() == (
            "method,K,seed,eval_loss,eval_acc\n"
            "uniform,,7,0.25,0.75\n"
            "uniform,,mean,0.25,0.75\n"
            "uniform,,stderr,0.0,0.0\n"
        )

    def test_means_match_recomputation(self):
        rng = np.random.default_rng(0)
        rows = [MethodRow(m, K, s, float(rng.random()), float(rng.random()))
                for m, K in (("sewa", 5), ("random", 5)) for s in range(5)]
        parsed = list(csv.DictReader(io.StringIO(summary_csv(rows))))
        for m in ("sewa", "random"):
            vals = [r.eval_loss for r in rows if r.method == m]
            mean = next(p for p in parsed if p["method"] == m and p["seed"] == "mean")
            se = next(p for p in parsed if p["method"] == m and p["seed"] == "stderr")
            assert float(mean["eval_loss"]) == pytest.approx(statistics.fmean(vals), rel=1e-14)
            assert float(se["eval_loss"]) == pytest.approx(statistics.stdev(vals) / math.sqrt(5), rel=1e-12)

    def test_table_sorted_by_mean_loss(self, tmp_path):
        rows = [MethodRow("a", None, 0, 0.5, 0.1), MethodRow("b", 5, 0, 0.2, 0.1), MethodRow("c", None, 0, 0.3, 0.1)]
        emit_summary(rows, tmp_path)
        body = (tmp_path / "table.txt").read_text().splitlines()[1:]
        assert [l.split()[0] for l in body] == ["b", "c", "a"]

    def test_empty(self, tmp_path):
        with pytest.raises(ValueError):
            emit_summary([], tmp_path)
