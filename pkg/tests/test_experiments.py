import json
import os

import numpy as np
import pytest

from diffusion_di import experiments as ex
from diffusion_di.cli import run as cli_run
from diffusion_di.io import read_feature_cache
from diffusion_di.report import emit_report
from diffusion_di.stats import aggregate_pvalues

TINY = [
    "dataset.name=synthetic",
    "splits.n_train=96",
    "splits.pool_size=48",
    "model.width=16",
    "model.depth=1",
    "training.steps=30",
    "inference.trials=20",
    "inference.size=24",
    "inference.sizes=[12, 24]",
    "inference.ratios=[0.0, 1.0]",
    "inference.contamination_sizes=[24]",
    "features.no_steps=2",
]


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    cfg = ex.load_config(None, TINY + [f"workdir={tmp_path_factory.mktemp('run')}"])
    ws = ex.Workspace(cfg)
    ws.features()
    return cfg, ws


class TestConfig:
    def test_overrides(self):
        cfg = ex.load_config(None, ["training.steps=7", "inference.sizes=[1, 2]", "seed=3"])
        assert cfg.training.steps == 7 and cfg.inference.sizes == [1, 2] and cfg.seed == 3

    def test_unknown_key(self):
        with pytest.raises(KeyError):
            ex.load_config(None, ["training.nope=1"])
        with pytest.raises(ValueError):
            ex.load_config(None, ["training.steps"])

    def test_yaml_round_trip(self, tmp_path):
        cfg = ex.load_config(None, ["model.width=32"])
        ex.save_config(cfg, tmp_path / "c.yaml")
        back = ex.load_config(tmp_path / "c.yaml", ["seed=5"])
        assert back.model.width == 32 and back.seed == 5
        assert back.to_dict()["training"] == cfg.to_dict()["training"]


class TestSplits:
    def test_disjoint_and_reproducible(self):
        cfg = ex.load_config(None, TINY)
        a, b = ex.prepare_splits(cfg), ex.prepare_splits(cfg)
        assert a.P.sample_ids == b.P.sample_ids and a.U.sample_ids == b.U.sample_ids
        train, P, U, N = (set(d.sample_ids) for d in (a.train, a.P, a.U, a.N))
        assert P <= train and not (U & train) and not (N & train) and not (U & N)
        assert len(a.P) == len(a.U) == len(a.N) == 48
        assert {"ks_statistic", "ks_pvalue", "mismatch_at_5pct"} <= set(a.distribution_check)

    def test_seed_changes_split(self):
        a = ex.prepare_splits(ex.load_config(None, TINY))
        b = ex.prepare_splits(ex.load_config(None, TINY + ["seed=1"]))
        assert a.P.sample_ids != b.P.sample_ids

    def test_insufficient_data(self):
        with pytest.raises(ex.PipelineError, match="need"):
            ex.prepare_splits(ex.load_config(None, ["splits.n_train=1500", "splits.pool_size=400"]))

    def test_digits_pools_match_in_distribution(self):
        cfg = ex.load_config(None, ["splits.n_train=512", "splits.pool_size=512"])
        assert ex.prepare_splits(cfg).distribution_check["ks_pvalue"] > 0.05


class TestWorkspace:
    def test_cached_stages(self, tiny):
        cfg, ws = tiny
        mtime = os.path.getmtime(ws.checkpoint), os.path.getmtime(ws.feature_cache)
        ws.train()
        ws.features()
        assert (os.path.getmtime(ws.checkpoint), os.path.getmtime(ws.feature_cache)) == mtime

    def test_feature_cache_contents(self, tiny):
        cfg, ws = tiny
        fm = read_feature_cache(ws.feature_cache)
        assert len(fm) == 144 and len(fm.names) == 26
        assert fm.sample_ids == sorted(fm.sample_ids)
        assert fm.is_member.sum() == 48 and set(fm.split) == {"P", "U", "N"}
        side = json.loads(ws.feature_cache.with_suffix(".json").read_text())
        assert len(side["checkpoint_sha256"]) == 64 and side["options"]["gm_fraction"] == 0.2

    def test_overfitting_recorded(self, tiny):
        _, ws = tiny
        ov = ws.train()[2]["extra"]["overfitting"]
        assert {"member_loss", "heldout_loss", "gap", "cohens_d"} <= set(ov)

    def test_manifest_hash_stable(self, tiny):
        _, ws = tiny
        a, b = ws.manifest(), ws.manifest()
        assert a["manifest_hash"] == b["manifest_hash"]
        assert "written_at" in json.loads(ws.manifest_path.read_text())

    def test_unknown_columns(self, tiny):
        _, ws = tiny
        with pytest.raises(ex.PipelineError):
            ws.pools(["nope"])


class TestOperations:
    def test_run_cdi_reproducible(self, tiny):
        cfg, ws = tiny
        a, b = ex.run_cdi(cfg, workspace=ws), ex.run_cdi(cfg, workspace=ws)
        np.testing.assert_array_equal(a.p_values, b.p_values)
        assert a.trials == 20 and a.n_per_trial == 24

    def test_sweep_single_size_equals_run(self, tiny):
        cfg, ws = tiny
        sweep = ex.sweep_sample_size(cfg, [24], workspace=ws)
        assert sweep["verdicts"][24].mean_p == ex.run_cdi(cfg, 24, workspace=ws).mean_p

    def test_contamination_endpoints(self, tiny):
        cfg, ws = tiny
        r = ex.contamination_run(cfg, workspace=ws)
        assert r["verdicts"][0.0][24].mean_p == ex.run_cdi(cfg, 24, workspace=ws).mean_p
        fp = ex.false_positive_run(cfg, 24, workspace=ws)
        assert r["verdicts"][1.0][24].mean_p == fp["mean_p"]
        assert fp["labels_all_nonmember"]

    def test_scores_mode(self, tiny):
        cfg, ws = tiny
        cfg2 = ex.config_copy(cfg, inference={"trial_mode": "scores"})
        v = ex.run_cdi(cfg2, 24, workspace=ws)
        assert v.trials == 20 and 0 <= v.mean_p <= 1

    def test_ablation_subsets(self, tiny):
        cfg, ws = tiny
        out = ex.ablate_features(cfg, {"dl": ["denoising_loss"]}, trials=10, workspace=ws)
        assert out["dl"]["features"] == ["denoising_loss"]
        assert out["dl"]["min_size"] is None or 10 <= out["dl"]["min_size"] <= 48
        with pytest.raises(ValueError):
            ex.ablate_features(cfg, {"empty": []}, workspace=ws)

    def test_mia_evaluation(self, tiny):
        cfg, ws = tiny
        out = ex.mia_evaluation(cfg, workspace=ws)
        assert len(out) == 27 and "cdi_scorer" in out
        assert all(0 <= m["auc"] <= 1 for m in out.values())

    def test_oversized_request(self, tiny):
        cfg, ws = tiny
        with pytest.raises(ex.PipelineError):
            ex.run_cdi(cfg, 100, workspace=ws)


class TestMinimumSize:
    @pytest.mark.parametrize("true_min", [10, 11, 37, 160, 255])
    def test_within_resolution(self, true_min):
        calls = []

        def ok(n):
            calls.append(n)
            return n >= true_min

        n, seen = ex.minimum_size(ok, 10, 256, 10)
        assert true_min <= n < true_min + 10 or n == true_min
        assert len(set(calls)) == len(calls)

    def test_never(self):
        assert ex.minimum_size(lambda n: False, 10, 100)[0] is None

    def test_verdict_is_mean_p(self):
        v = aggregate_pvalues([0.001, 0.02], alpha=0.01)
        assert not v.reject and v.reject_rate() == 0.5


class TestReport:
    def test_empty(self, tmp_path):
        paths = emit_report({}, tmp_path / "r")
        summary = json.loads((tmp_path / "r" / "summary.json").read_text())
        assert summary == {"manifest_hash": None, "results": {}}
        assert len(paths) == 1

    def test_idempotent_and_features_round_trip(self, tiny, tmp_path):
        cfg, ws = tiny
        results = {
            "sweep": ex.sweep_sample_size(cfg, workspace=ws),
            "verify": ex.run_cdi(cfg, workspace=ws),
            "contamination": ex.contamination_run(cfg, workspace=ws),
        }
        fm = read_feature_cache(ws.feature_cache)
        first = emit_report(results, tmp_path / "a", "h", fm)
        blobs = {p.name: p.read_bytes() for p in first}
        emit_report(results, tmp_path / "a", "h", fm)
        assert blobs == {p.name: p.read_bytes() for p in first}
        assert {"sweep.png", "contamination.png", "sweep.csv", "contamination.csv"} <= set(blobs)
        back = read_feature_cache(tmp_path / "a" / "features.csv")
        np.testing.assert_array_equal(back.values, fm.values)
        assert back.sample_ids == fm.sample_ids and back.split == fm.split
        summary = json.loads(blobs["summary.json"])
        assert summary["results"]["verify"]["manifest_hash"] == "h"

    def test_unwritable(self, tmp_path):
        target = tmp_path / "ro"
        target.mkdir()
        target.chmod(0o500)
        try:
            if os.access(target, os.W_OK):
                pytest.skip("running with privileges that ignore permissions")
            with pytest.raises(PermissionError):
                emit_report({}, target / "sub")
        finally:
            target.chmod(0o700)

    def test_file_in_the_way(self, tmp_path):
        (tmp_path / "f").write_text("x")
        with pytest.raises(PermissionError):
            emit_report({}, tmp_path / "f" / "sub")


class TestCLI:
    def test_verbs(self, tiny, capsys):
        cfg, ws = tiny
        base = ["--set", f"workdir={ws.root}"] + [a for kv in TINY for a in ("--set", kv)]
        assert cli_run(["verify"] + base) == 0
        assert "mean_p=" in capsys.readouterr().out
        assert cli_run(["null-check", "--size", "24"] + base) == 0
        assert cli_run(["report"] + base) == 0
        summary = json.loads((ws.root / "report" / "summary.json").read_text())
        assert {"verify", "null_check"} <= set(summary["results"])
        assert summary["manifest_hash"] == ws.manifest()["manifest_hash"]

    def test_field_flags(self, tiny):
        cfg, ws = tiny
        base = ["--set", f"workdir={ws.root}"] + [a for kv in TINY for a in ("--set", kv)]
        assert cli_run(["verify", "--inference.trials", "5"] + base) == 0

    def test_pipeline_error_exit_code(self, tiny, capsys):
        cfg, ws = tiny
        base = ["--set", f"workdir={ws.root}"] + [a for kv in TINY for a in ("--set", kv)]
        assert cli_run(["verify", "--size", "1000"] + base) == 2
        assert "[verify]" in capsys.readouterr().err
