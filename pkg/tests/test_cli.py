"""End-to-end CLI tests: file formats, exit codes, determinism."""

import json

import numpy as np
import pytest

from latent_brrr import io as lio
from latent_brrr.cli import main
from latent_brrr.errors import ConfigurationError
from latent_brrr.gibbs import run_chain
from latent_brrr.model import Dataset, ModelConfig, Variant


def run_cli(*argv):
    return main([str(a) for a in argv])


def write_config(path, **kw):
    base = dict(variant="latent_noise", rank=2, latent_snr=0.1, iterations=60,
                burn_in=30, thin=3, seed=7)
    base.update(kw)
    lio.write_json(path, base)
    return path


# ---------------------------------------------------------------------------
# file formats


def test_matrix_csv_round_trips_exactly(tmp_path):
    rng = np.random.default_rng(0)
    M = rng.standard_normal((7, 4)) * np.array([1e-300, 1.0, 1e12, np.pi])
    M[3, 2] = -0.1 + 0.2  # classic non-representable decimal
    path = tmp_path / "m.csv"
    lio.write_matrix_csv(path, M, ["a", "b", "c", "d"])
    back, names = lio.read_matrix_csv(path)
    assert names == ["a", "b", "c", "d"]
    assert np.array_equal(back, M)
    text = path.read_bytes().decode("utf-8")
    assert "\r" not in text
    assert text.splitlines()[0] == "a,b,c,d"


def test_samples_bin_round_trips(tmp_path):
    rng = np.random.default_rng(1)
    X = rng.standard_normal((20, 3))
    Y = rng.standard_normal((20, 4))
    config = ModelConfig(variant=Variant.LATENT_NOISE, rank=2, sigma_omega_sq=0.8,
                         iterations=20, burn_in=10, thin=2, seed=3)
    trace = run_chain(Dataset(X=X, Y=Y), config)
    path = tmp_path / "samples.bin"
    lio.write_samples(path, trace.samples)
    states = lio.read_samples(path)
    assert len(states) == len(trace.samples.states)
    for got, want in zip(states, trace.samples.states):
        assert np.array_equal(got.Psi, want.Psi)
        assert np.array_equal(got.Omega, want.Omega)
        assert np.array_equal(got.sigma_sq, want.sigma_sq)
    # 16-byte magic/version header
    raw = path.read_bytes()
    assert raw[:8] == b"LBRRRST1"
    with pytest.raises(ConfigurationError):
        lio.read_samples(tmp_path / "m.bin") if (tmp_path / "m.bin").write_bytes(b"x" * 64) else None


def test_config_json_rejects_unknown_keys(tmp_path):
    path = tmp_path / "config.json"
    lio.write_json(path, {"variant": "latent_noise", "rank": 2, "latent_snr": 0.1,
                          "sigma_omega": 1.0})
    with pytest.raises(ConfigurationError, match="sigma_omega"):
        lio.model_config_from_dict(lio.read_json(path))
    with pytest.raises(ConfigurationError, match="variant"):
        lio.model_config_from_dict({"variant": "banana"})


# ---------------------------------------------------------------------------
# simulate


def test_simulate_writes_expected_files(tmp_path):
    out = tmp_path / "sim"
    code = run_cli("simulate", "--alpha", 1.0, "--n-train", 50, "--n-test", 60,
                   "--p", 5, "--k", 6, "--rank", 2, "--seed", 7, "--out-dir", out)
    assert code == 0
    for name in ("X_train.csv", "Y_train.csv", "X_test.csv", "Y_test.csv",
                 "truth.json", "manifest.json"):
        assert (out / name).is_file()
    X, names = lio.read_matrix_csv(out / "X_train.csv")
    assert X.shape == (50, 5) and names == [f"x{j}" for j in range(5)]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok"
    assert manifest["command"] == "simulate"
    truth = json.loads((out / "truth.json").read_text())
    assert np.allclose(truth["realized_fractions"], [0.03, 0.77, 0.20], atol=1e-9)


def test_simulate_rejects_bad_alpha(tmp_path, capsys):
    code = run_cli("simulate", "--alpha", 1.5, "--out-dir", tmp_path / "x")
    assert code == 2
    assert "alpha" in capsys.readouterr().err


def test_simulate_is_byte_identical_across_reruns(tmp_path):
    args = ("simulate", "--alpha", 0.5, "--n-train", 30, "--n-test", 40,
            "--p", 4, "--k", 5, "--rank", 2, "--seed", 11)
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli(*args, "--out-dir", a) == 0
    assert run_cli(*args, "--out-dir", b) == 0
    for name in ("X_train.csv", "Y_train.csv", "X_test.csv", "Y_test.csv", "truth.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


# ---------------------------------------------------------------------------
# fit / predict


@pytest.fixture()
def sim_dir(tmp_path):
    out = tmp_path / "data"
    assert run_cli("simulate", "--alpha", 1.0, "--n-train", 80, "--n-test", 40,
                   "--p", 4, "--k", 5, "--rank", 2, "--seed", 3,
                   "--out-dir", out) == 0
    return out


def test_fit_predict_pipeline(sim_dir, tmp_path):
    config = write_config(tmp_path / "config.json")
    fit_dir = tmp_path / "fit"
    code = run_cli("fit", "--x", sim_dir / "X_train.csv", "--y", sim_dir / "Y_train.csv",
                   "--config", config, "--samples", "--out-dir", fit_dir)
    assert code == 0
    summary = json.loads((fit_dir / "posterior_summary.json").read_text())
    assert summary["n_retained"] == 10
    assert np.asarray(summary["theta_mean"]).shape == (4, 5)
    # latent_snr was resolved into sigma_omega_sq
    assert summary["config"]["latent_snr"] is None
    assert summary["config"]["sigma_omega_sq"] > 0
    assert (fit_dir / "samples.bin").is_file()
    states = lio.read_samples(fit_dir / "samples.bin")
    assert len(states) == 10

    pred_dir = tmp_path / "pred"
    code = run_cli("predict", "--x", sim_dir / "X_test.csv",
                   "--model", fit_dir / "posterior_summary.json",
                   "--y", sim_dir / "Y_test.csv", "--out-dir", pred_dir)
    assert code == 0
    Y_pred, _ = lio.read_matrix_csv(pred_dir / "Y_pred.csv")
    assert Y_pred.shape == (40, 5)
    report = json.loads((pred_dir / "eval.json").read_text())
    assert report["mse_total"] > 0
    assert len(report["mse_per_target"]) == 5


def test_fit_missing_y_exits_2_with_path(sim_dir, tmp_path, capsys):
    config = write_config(tmp_path / "config.json")
    code = run_cli("fit", "--x", sim_dir / "X_train.csv", "--y", sim_dir / "nope.csv",
                   "--config", config, "--out-dir", tmp_path / "fit")
    assert code == 2
    assert "nope.csv" in capsys.readouterr().err


def test_fit_nan_input_exits_2_with_location(sim_dir, tmp_path, capsys):
    X, names = lio.read_matrix_csv(sim_dir / "X_train.csv")
    X[2, 1] = np.nan
    bad = tmp_path / "X_bad.csv"
    lio.write_matrix_csv(bad, X, names)
    config = write_config(tmp_path / "config.json")
    code = run_cli("fit", "--x", bad, "--y", sim_dir / "Y_train.csv",
                   "--config", config, "--out-dir", tmp_path / "fit")
    assert code == 2
    err = capsys.readouterr().err
    assert "row 2" in err and "x1" in err


def test_fit_unknown_config_key_exits_2(sim_dir, tmp_path, capsys):
    path = tmp_path / "config.json"
    lio.write_json(path, {"variant": "latent_noise", "rank": 2, "latent_snr": 0.1,
                          "iterations": 20, "burn_in": 5, "thin": 1, "sigma": 1.0})
    code = run_cli("fit", "--x", sim_dir / "X_train.csv", "--y", sim_dir / "Y_train.csv",
                   "--config", path, "--out-dir", tmp_path / "fit")
    assert code == 2
    assert "sigma" in capsys.readouterr().err


def test_fit_outputs_byte_identical_across_reruns(sim_dir, tmp_path):
    config = write_config(tmp_path / "config.json")
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run_cli("fit", "--x", sim_dir / "X_train.csv",
                       "--y", sim_dir / "Y_train.csv", "--config", config,
                       "--samples", "--out-dir", out) == 0
    assert (a / "posterior_summary.json").read_bytes() == (b / "posterior_summary.json").read_bytes()
    assert (a / "samples.bin").read_bytes() == (b / "samples.bin").read_bytes()
    # manifests are excluded from determinism (they carry wall time)


def test_failed_fit_leaves_failure_manifest(sim_dir, tmp_path, monkeypatch):
    import latent_brrr.cli as cli_mod
    from latent_brrr.errors import NumericalError

    def explode(dataset, config):
        raise NumericalError("synthetic collapse (iteration 3)")

    monkeypatch.setattr(cli_mod, "run_chain", explode)
    config = write_config(tmp_path / "config.json")
    out = tmp_path / "fit"
    code = run_cli("fit", "--x", sim_dir / "X_train.csv", "--y", sim_dir / "Y_train.csv",
                   "--config", config, "--out-dir", out)
    assert code == 3
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "failed"
    assert "iteration 3" in manifest["error"]


# ---------------------------------------------------------------------------
# cv / assoc / verify


def test_cv_singleton_grid_echoes_config(sim_dir, tmp_path):
    config = write_config(tmp_path / "config.json", iterations=30, burn_in=10, thin=2)
    plan = tmp_path / "plan.json"
    lio.write_json(plan, {"beta_grid": [0.1], "rank_grid": [2], "n_folds": 3, "seed": 1})
    out = tmp_path / "cv"
    code = run_cli("cv", "--x", sim_dir / "X_train.csv", "--y", sim_dir / "Y_train.csv",
                   "--config", config, "--plan", plan, "--threads", 1, "--out-dir", out)
    assert code == 0
    best = json.loads((out / "best_config.json").read_text())
    assert best["latent_snr"] == 0.1 and best["rank"] == 2
    table = (out / "score_table.csv").read_text().splitlines()
    assert table[0].startswith("beta,rank,mean_mse,status")
    assert len(table) == 2


def test_assoc_writes_result(sim_dir, tmp_path):
    config = write_config(tmp_path / "config.json", iterations=30, burn_in=10, thin=2)
    out = tmp_path / "assoc"
    code = run_cli("assoc", "--x", sim_dir / "X_train.csv", "--y", sim_dir / "Y_train.csv",
                   "--config", config, "--n-perm", 5, "--threads", 1, "--out-dir", out)
    assert code == 0
    result = json.loads((out / "assoc.json").read_text())
    assert result["n_perm"] == 5
    assert len(result["perm_ptves"]) == 5
    assert 0.0 <= result["rank_fraction"] <= 1.0


def test_verify_prop_subcommand(tmp_path):
    out = tmp_path / "verify"
    code = run_cli("verify", "--prop1", "--prop2", "--a1", 3, "--a2", 4, "--nu", 3,
                   "--p", 30, "--draws", 20000, "--prop2-ranks", 1, 2,
                   "--seed", 0, "--out-dir", out)
    assert code == 0
    report = json.loads((out / "propositions.json").read_text())
    assert report["prop1"]["analytic_value"] == pytest.approx(54.0)
    assert isinstance(report["prop1"]["passed"], bool)
    assert [e["rank"] for e in report["prop2"]] == [1, 2]
    assert all(e["closed_form_consistency"] for e in report["prop2"])


def test_verify_geweke_smoke(tmp_path):
    out = tmp_path / "verify"
    code = run_cli("verify", "--geweke", "--geweke-iters", 3000, "--seed", 1,
                   "--out-dir", out)
    assert code == 0
    report = json.loads((out / "geweke.json").read_text())
    assert report["n_iter"] == 3000
    assert 0.0 <= report["fraction_within_4"] <= 1.0


def test_verify_requires_a_check(tmp_path, capsys):
    assert run_cli("verify", "--out-dir", tmp_path / "v") == 2


def test_threads_env_override(sim_dir, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("LATENT_BRRR_THREADS", "junk")
    config = write_config(tmp_path / "config.json", iterations=20, burn_in=5, thin=1)
    code = run_cli("assoc", "--x", sim_dir / "X_train.csv", "--y", sim_dir / "Y_train.csv",
                   "--config", config, "--n-perm", 2, "--out-dir", tmp_path / "a")
    assert code == 2
    assert "LATENT_BRRR_THREADS" in capsys.readouterr().err
