import json
import statistics

import numpy as np
import pytest

from xcompat import experiment as ex
from xcompat.cli import main
from xcompat.data import dumps_libsvm, synth_regression
from xcompat.explain import write_explanations_csv

TINY = dict(repetitions=1, max_epochs=3, patience=2, hidden=8, n_old=30, n_new=80, n_eval=40,
            k=3, baseline_count=4, alpha_samples_train=2, alpha_samples_eval=4)


def tiny(**kw):
    return ex.ExperimentConfig(**{**TINY, **kw})


@pytest.fixture(scope="module")
def ds():
    return synth_regression(0, 150, 4)


class TestPareto:
    def test_example(self):
        pts = [(1, 0.5), (2, 0.9), (1.5, 0.7), (2, 0.8)]
        assert ex.pareto_front(pts) == [(1, 0.5), (1.5, 0.7), (2, 0.9)]

    def test_single_and_duplicates(self):
        assert ex.pareto_front([(3, 0.1)]) == [(3, 0.1)]
        front = ex.pareto_front([(1, 0.5, "a"), (1, 0.5, "b")])
        assert front == [(1, 0.5, "a")]

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            pts = [tuple(p) for p in rng.integers(0, 6, size=(12, 2)).astype(float)]
            front = ex.pareto_front(pts)
            for p in pts:
                dominated = any(q[0] <= p[0] and q[1] >= p[1] and q != p for q in pts)
                assert (p in front) == (not dominated)
            assert [p[0] for p in front] == sorted(p[0] for p in front)

    def test_non_finite(self):
        with pytest.raises(ValueError):
            ex.pareto_front([(float("nan"), 1.0)])


class TestSensitivity:
    def _rows(self, values):
        return [{"dataset": "s", "objective": "erm", "lambda": 0.0, "status": "ok",
                 **{c: v for c in ex.NUMERIC_COLUMNS}} for v in values]

    def test_single_row(self):
        (t,) = ex.sensitivity_table(self._rows([0.3]))
        assert t["loss_mean"] == 0.3 and t["loss_sd"] == 0.0 and t["runs"] == 1

    def test_constant(self):
        (t,) = ex.sensitivity_table(self._rows([0.4] * 5))
        assert t["bcx_feat_sd"] == 0.0

    def test_matches_recomputation(self):
        rng = np.random.default_rng(1)
        vals = list(rng.random(17))
        rows = self._rows(vals)
        rows[3]["bcx_norm"] = None
        rows.append({**rows[0], "status": "error: x"})
        (t,) = ex.sensitivity_table(rows)
        assert t["runs"] == 17
        assert abs(t["loss_mean"] - sum(vals) / len(vals)) <= 1e-12
        assert abs(t["loss_sd"] - np.std(vals)) <= 1e-12
        rest = vals[:3] + vals[4:]
        assert abs(t["bcx_norm_mean"] - statistics.fmean(rest)) <= 1e-12

    def test_rejects_mixed_datasets(self):
        rows = self._rows([1.0, 2.0])
        rows[1]["dataset"] = "t"
        with pytest.raises(ValueError):
            ex.sensitivity_table(rows)


class TestConfig:
    def test_toml_round_trip(self, tmp_path):
        cfg = tiny(objectives=["erm", "bcxr-norm"], lambdas=[0.5, 2.0], lam=0.25, objective="dm")
        path = tmp_path / "c.toml"
        path.write_text(cfg.to_toml())
        assert ex.ExperimentConfig.from_toml(path) == cfg
        assert "lambda = 0.25" in cfg.to_toml()

    def test_rejects_bad_keys(self):
        with pytest.raises(ValueError):
            ex.ExperimentConfig.from_mapping({"lamda": 1.0})
        with pytest.raises(ValueError):
            ex.ExperimentConfig(objectives=["abcd"])
        with pytest.raises(ValueError):
            ex.ExperimentConfig(repetitions=0)

    def test_cells(self):
        cfg = ex.ExperimentConfig(objectives=["erm", "dm", "bcxr-ftr"], lambdas=[1.0, 2.0], dm_lambdas=[3.0])
        assert cfg.cells() == [("erm", 0.0), ("dm", 3.0), ("bcxr-ftr", 1.0), ("bcxr-ftr", 2.0)]

    def test_derived_seeds_distinct(self):
        s = ex.derived_seeds(0)
        assert len(set(s.values())) == 4
        assert s == ex.derived_seeds(0) and s != ex.derived_seeds(1)


class TestRun:
    def test_single_erm_row(self, ds):
        rows = ex.run_experiment(ds, tiny(objectives=["erm"]))
        assert len(rows) == 1
        assert rows[0]["status"] == "ok"
        assert list(rows[0]) == ex.REPORT_COLUMNS

    def test_row_count(self, ds):
        cfg = tiny(repetitions=30, objectives=["dm", "bcxr-norm"], lambdas=[0.1, 1.0, 10.0],
                   dm_lambdas=[0.1, 1.0, 10.0], max_epochs=1, explainer="grad_input", n_eval=20)
        rows = ex.run_experiment(ds, cfg, jobs=4)
        assert len(rows) == 180
        assert all(r["status"] == "ok" for r in rows)
        assert [r["seed"] for r in rows[:7]] == [0] * 6 + [1]

    def test_self_check_and_ranges(self, ds):
        rows = ex.run_experiment(ds, tiny(repetitions=2, objectives=["erm", "bcxr-norm"], lambdas=[1.0],
                                          self_check=True))
        self_rows = [r for r in rows if r["objective"] == ex.SELF_CHECK]
        assert len(self_rows) == 2
        for r in self_rows:
            assert r["selected_count"] > 0
            assert all(r[c] == 1.0 for c in ex.SCORE_COLUMNS)
        for r in rows:
            for c in ex.SCORE_COLUMNS:
                assert r[c] is None or 0.0 <= r[c] <= 1.0

    def test_empty_selection_sentinel(self, ds):
        ctx = ex.train_old(ds, tiny(), 0)
        # tau = -1 makes nothing correct
        res = ex.evaluate_pair(ctx.h1.model, ctx.h1.model, ctx.deval, 3, -1.0, ctx.explainer)
        assert res["selected_count"] == 0
        assert res["bcx_feat"] is None and res["btc"] is None
        row = ex._row("s", "erm", 0.0, 0, 3, res, "ok")
        assert ex._fmt(row["bcx_feat"]) == ex.NA

    def test_failed_cell_is_recorded(self, ds, monkeypatch):
        real = ex.retrain

        def flaky(ctx, cfg, objective, lam):
            if objective == "bcxr-ftr":
                raise FloatingPointError("diverged")
            return real(ctx, cfg, objective, lam)

        monkeypatch.setattr(ex, "retrain", flaky)
        rows = ex.run_experiment(ds, tiny(objectives=["erm", "bcxr-ftr"], lambdas=[1.0]))
        assert rows[0]["status"] == "ok"
        assert rows[1]["status"] == "error: diverged"
        assert rows[1]["bcx_feat"] is None

    def test_outputs_byte_identical(self, ds, tmp_path):
        cfg = tiny(repetitions=2, objectives=["erm", "dm", "bcxr-norm"], lambdas=[1.0], dm_lambdas=[1.0],
                   save_models=True)
        for name, jobs in (("a", 1), ("b", 3)):
            out = tmp_path / name
            ex.write_outputs(ex.run_experiment(ds, cfg, jobs=jobs, out_dir=out), out, cfg)
        for f in ["report.csv", "sensitivity.csv", "pareto_bcx_feat.csv", "resolved_config.toml", "manifest.json"]:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
        assert (tmp_path / "a" / "models" / "old_seed1.json").exists()
        rows = ex.read_report(tmp_path / "a" / "report.csv")
        assert [r["objective"] for r in rows] == ["erm", "dm", "bcxr-norm"] * 2
        assert (tmp_path / "a" / "report.csv").read_text().splitlines()[0] == ",".join(ex.REPORT_COLUMNS)

    def test_bundle_round_trip(self, ds, tmp_path):
        ctx = ex.train_old(ds, tiny(), 0)
        ex.save_bundle(ctx.h1, tmp_path / "b.json")
        back = ex.load_bundle(tmp_path / "b.json")
        assert back.config == ctx.h1.config
        assert back.best_validation_loss == ctx.h1.best_validation_loss
        assert all((back.model.params[k] == ctx.h1.model.params[k]).all() for k in back.model.params)


class TestCli:
    @pytest.fixture
    def setup(self, tmp_path, ds):
        cfg = tmp_path / "c.toml"
        cfg.write_text(tiny(objectives=["erm", "bcxr-norm"], lambdas=[1.0]).to_toml())
        data = tmp_path / "d.libsvm"
        data.write_text(dumps_libsvm(ds))
        return cfg, data, tmp_path / "out"

    def test_train_retrain_evaluate(self, setup, capsys):
        cfg, data, out = setup
        common = ["--config", str(cfg), "--dataset", str(data), "--out", str(out)]
        assert main(["train-old", *common]) == 0
        old = json.loads(capsys.readouterr().out)["model"]
        assert main(["retrain", *common, "--old", old, "--objective", "bcxr-norm", "--lambda", "1"]) == 0
        new = json.loads(capsys.readouterr().out)["model"]
        assert main(["evaluate", *common, "--old", old, "--new", new]) == 0
        row = json.loads(capsys.readouterr().out)
        assert row["objective"] == "bcxr-norm" and row["status"] == "ok"
        assert (out / "resolved_config.toml").exists()
        assert ex.read_report(out / "report.csv")[0]["lambda"] == 1.0

    def test_sweep_and_pareto(self, setup, capsys):
        cfg, data, out = setup
        assert main(["sweep", "--config", str(cfg), "--dataset", str(data), "--out", str(out), "--jobs", "2"]) == 0
        for f in ["report.csv", "sensitivity.csv", "resolved_config.toml"] + \
                 [f"pareto_{m}.csv" for m in ex.SCORE_COLUMNS]:
            assert (out / f).exists(), f
        capsys.readouterr()
        assert main(["pareto", str(out / "report.csv"), "--metric", "bcx_norm", "--out", str(out / "p.csv")]) == 0
        assert capsys.readouterr().out.strip()
        assert (out / "p.csv").read_text().startswith("objective,lambda,loss,bcx_norm")

    def test_sweep_synthetic_source(self, tmp_path, capsys):
        cfg = tmp_path / "c.toml"
        cfg.write_text(tiny(objectives=["erm"]).to_toml())
        assert main(["sweep", "--config", str(cfg), "--dataset", "synth:regression,n=150,d=3",
                     "--out", str(tmp_path / "o")]) == 0
        assert "1 rows" in capsys.readouterr().out

    def test_agree(self, tmp_path, capsys):
        a = np.array([[3.0, -2.0, 1.0], [1.0, 2.0, 3.0]])
        b = np.array([[1.0, 3.0, -2.0], [1.0, 2.0, 3.0]])
        write_explanations_csv(tmp_path / "a.csv", a)
        write_explanations_csv(tmp_path / "b.csv", b)
        assert main(["agree", str(tmp_path / "a.csv"), str(tmp_path / "b.csv"), "--metric", "feat", "-k", "2",
                     "--out", str(tmp_path / "o.csv")]) == 0
        assert json.loads(capsys.readouterr().out)["mean"] == 0.75
        assert (tmp_path / "o.csv").read_text().splitlines()[1:] == ["0,0.5", "1,1.0"]
        write_explanations_csv(tmp_path / "c.csv", b, ["x", "y"])
        assert main(["agree", str(tmp_path / "a.csv"), str(tmp_path / "c.csv")]) == 2

    def test_selfcheck(self, capsys):
        assert main(["selfcheck", "--trials", "50"]) in (0, 1)
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 8
        assert all(line.startswith(("PASS", "FAIL")) for line in lines)
