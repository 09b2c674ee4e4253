import json

import numpy as np
import pytest
import yaml

from flowfold.cli import main
from flowfold.data.eventfile import load_events, save_events
from flowfold.data.features import FeatureMatrix

TINY = ["--model.hidden=16", "--model.blocks=1", "--model.cond_embed_dim=8", "--model.time.n_frequencies=4",
        "--model.time.projected_dim=8", "--train.batch_size=1000", "--train.validation_subset=1000",
        "--train.lr=1e-3"]


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("mock", "--family", "gaussian", "--n", 4000, "--seed", 7, "--out", root / "mock") == 0
    assert run("mock", "--family", "mcpom", "--n", 3000, "--seed", 1, "--out", root / "mc") == 0
    assert run("smear", "--data", root / "mc/events.ev", "--out", root / "smear") == 0
    assert run("train", "--data", root / "mock/events.ev", "--epochs", 2, "--out", root / "gen", *TINY) == 0
    assert run("train", "--mode", "unfold", "--data", root / "smear/paired.ev", "--epochs", 1,
               "--out", root / "unf", *TINY) == 0
    return root


def test_mock_outputs(work):
    data, stats = load_events(work / "mock/events.ev")
    assert data.n_events == 4000 and data.n_features == 1 and stats is None
    summary = json.loads((work / "mock/summary.json").read_text())
    assert summary["count"] == 4000 and len(summary["mean"]) == 1
    manifest = json.loads((work / "mock/manifest.json").read_text())
    assert set(manifest["outputs"]) == {"config.yaml", "events.ev", "summary.json"}
    cfg = yaml.safe_load((work / "mock/config.yaml").read_text())
    assert cfg["dataset"]["family"] == "gaussian" and cfg["dataset"]["n"] == 4000


def test_mock_is_bitwise_reproducible(work, tmp_path):
    assert run("mock", "--family", "gaussian", "--n", 4000, "--seed", 7, "--out", tmp_path / "again") == 0
    assert (tmp_path / "again/events.ev").read_bytes() == (work / "mock/events.ev").read_bytes()


def test_mock_params_and_errors(tmp_path):
    assert run("mock", "--family", "delta", "--loc", 0.3, "--n", 50, "--out", tmp_path / "d") == 0
    data, _ = load_events(tmp_path / "d/events.ev")
    assert np.all(data.values == np.float32(0.3))
    assert run("mock", "--family", "nope", "--out", tmp_path / "x") == 2
    assert run("mock", "--family", "gaussian", "--width", 2, "--out", tmp_path / "x") == 2
    assert run("mock", "--family", "bimodal-asym", "--weights", "[0.5, 0.6]", "--out", tmp_path / "x") == 2


def test_config_file_and_strictness(tmp_path):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(yaml.safe_dump({"dataset": {"family": "uniform-flat", "n": 100, "params": {"low": 2.0, "high": 3.0}},
                                   "output": str(tmp_path / "u")}))
    assert run("mock", "--config", cfg) == 0
    data, _ = load_events(tmp_path / "u/events.ev")
    assert data.values.min() >= 2.0 and data.n_events == 100
    assert run("mock", "--config", cfg, "--dataset.n=10") == 0
    assert load_events(tmp_path / "u/events.ev")[0].n_events == 10
    bad = tmp_path / "bad.yaml"
    bad.write_text("dataset: {family: gaussian, size: 3}\n")
    assert run("mock", "--config", bad, "--out", tmp_path / "b") == 2
    assert run("mock", "--train.momentum=0.9", "--out", tmp_path / "b") == 2
    assert run("mock", "--threads=0", "--out", tmp_path / "b") == 2


def test_smear_outputs(work, tmp_path):
    paired, _ = load_events(work / "smear/paired.ev")
    truth, det = paired.split_pairs()
    assert paired.paired and paired.n_features == 20 and paired.n_events == 3000
    assert run("smear", "--data", work / "mc/events.ev", "--sigma", 0, "--out", tmp_path / "s0") == 0
    p0, _ = load_events(tmp_path / "s0/paired.ev")
    t0, d0 = p0.split_pairs()
    np.testing.assert_array_equal(t0.values, d0.values)
    summary = json.loads((work / "smear/summary.json").read_text())
    assert summary["detector_recoil_mass_rms_dev"] > summary["truth_recoil_mass_rms_dev"]


def test_smear_width_ordering(tmp_path):
    # transverse pion widths add only ~5e-6 to a 0.08 variance, so 1e5 events cannot resolve them
    assert run("mock", "--family", "mcpom", "--n", 1000000, "--seed", 3, "--out", tmp_path / "mc") == 0
    stds = {}
    for sigma in (1.0, 2.0):
        assert run("smear", "--data", tmp_path / "mc/events.ev", "--sigma", sigma, "--out", tmp_path / f"s{sigma}") == 0
        stds[sigma] = np.array(json.loads((tmp_path / f"s{sigma}/summary.json").read_text())["detector_std"])
    assert np.all(stds[2.0][4:] > stds[1.0][4:])
    assert np.all(stds[2.0][:4] == stds[1.0][:4])  # photon and target are never smeared


def test_smear_rejects_wrong_feature_count(work, tmp_path):
    assert run("smear", "--data", work / "mock/events.ev", "--out", tmp_path / "s") == 2
    assert run("smear", "--data", tmp_path / "missing.ev", "--out", tmp_path / "s") == 2


def test_train_outputs_and_resume(work, tmp_path):
    lines = (work / "gen/epochs.jsonl").read_text().splitlines()
    assert [json.loads(ln)["epoch"] for ln in lines] == [1, 2]
    assert set(json.loads(lines[0])) == {"epoch", "train_loss", "val_loss", "chi2_mean", "wasserstein_mean",
                                         "correlation_distance", "nfe_mean", "lr", "seconds"}
    for name in ("best.ckpt", "last.ckpt", "config.yaml", "manifest.json"):
        assert (work / "gen" / name).is_file()
    # resume into a copy of the run directory
    import shutil
    shutil.copytree(work / "gen", tmp_path / "gen")
    assert run("train", "--data", work / "mock/events.ev", "--epochs", 4, "--resume", tmp_path / "gen/last.ckpt",
               "--out", tmp_path / "gen", *TINY) == 0
    epochs = [json.loads(ln)["epoch"] for ln in (tmp_path / "gen/epochs.jsonl").read_text().splitlines()]
    assert epochs == [1, 2, 3, 4]


def test_train_errors(work, tmp_path):
    assert run("train", "--mode", "unfold", "--data", work / "mock/events.ev", "--epochs", 1,
               "--out", tmp_path / "t", *TINY) == 2
    assert run("train", "--data", work / "smear/paired.ev", "--epochs", 1, "--out", tmp_path / "t", *TINY) == 2
    assert run("train", "--epochs", 1, "--out", tmp_path / "t") == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_nan_exits_3(work, tmp_path, capsys):
    code = run("train", "--data", work / "mock/events.ev", "--epochs", 2, "--out", tmp_path / "nan", *TINY,
               "--train.lr=1e12")
    assert code == 3
    assert "epoch" in capsys.readouterr().err


def test_sample(work, tmp_path):
    assert run("sample", "--checkpoint", work / "gen/best.ckpt", "--n", 0, "--out", tmp_path / "s0") == 0
    empty, _ = load_events(tmp_path / "s0/samples.ev")
    assert empty.n_events == 0 and empty.n_features == 1
    for d in ("a", "b"):
        assert run("sample", "--checkpoint", work / "gen/best.ckpt", "--n", 500, "--seed", 4, "--tol", 1e-5,
                   "--out", tmp_path / d) == 0
    assert (tmp_path / "a/samples.ev").read_bytes() == (tmp_path / "b/samples.ev").read_bytes()
    stats = json.loads((tmp_path / "a/sample_stats.json").read_text())
    assert stats["n"] == 500 and stats["nfe_mean"] >= 7 and stats["atol"] == 1e-5
    assert run("sample", "--checkpoint", work / "unf/best.ckpt", "--n", 5, "--out", tmp_path / "x") == 2


def test_unfold_preserves_row_order(work, tmp_path):
    assert run("unfold", "--checkpoint", work / "unf/best.ckpt", "--data", work / "smear/paired.ev",
               "--out", tmp_path / "u") == 0
    out, _ = load_events(tmp_path / "u/unfolded.ev")
    assert out.n_events == 3000 and out.n_features == 10 and not out.paired
    stats = json.loads((tmp_path / "u/unfold_stats.json").read_text())
    assert stats["atol"] == 1e-3
    # the first 100 rows unfolded alone give the same events as in the full run
    paired, _ = load_events(work / "smear/paired.ev")
    save_events(tmp_path / "head.ev", paired.take(np.arange(100)))
    assert run("unfold", "--checkpoint", work / "unf/best.ckpt", "--data", tmp_path / "head.ev",
               "--out", tmp_path / "h") == 0
    head, _ = load_events(tmp_path / "h/unfolded.ev")
    np.testing.assert_array_equal(head.values, out.values[:100])
    assert run("unfold", "--checkpoint", work / "gen/best.ckpt", "--data", work / "smear/paired.ev",
               "--out", tmp_path / "x") == 2


def test_eval(work, tmp_path):
    ev = work / "mock/events.ev"
    assert run("eval", "--gen", ev, "--truth", ev, "--out", tmp_path / "e") == 0
    rep = json.loads((tmp_path / "e/metrics.json").read_text())
    assert rep["chi2_mean"] == 0 and rep["wasserstein_mean"] == 0 and rep["correlation_distance"] == 0
    assert "nn_ratio" not in rep
    assert run("eval", "--gen", ev, "--truth", ev, "--train", ev, "--histograms", "--out", tmp_path / "n") == 0
    rep = json.loads((tmp_path / "n/metrics.json").read_text())
    assert rep["nn_ratio"] == 0 and {"d_gen_to_train_mean", "d_train_to_train_min"} <= set(rep)
    hist = json.loads((tmp_path / "n/histograms.json").read_text())
    assert len(hist) == 1 and len(hist[0]["gen"]) == 50
    assert run("eval", "--gen", work / "mc/events.ev", "--truth", ev, "--out", tmp_path / "x") == 2


def test_bench(work, tmp_path):
    args = ["bench", "--checkpoint", work / "gen/best.ckpt", "--iterations", 4, "--batch", 2000,
            "--runs", 3, "--events", 2000]
    assert run(*args, "--out", tmp_path / "b1") == 0
    rep = json.loads((tmp_path / "b1/bench.json").read_text())
    assert {"training", "inference"} <= set(rep)
    assert rep["training"]["ms_per_iteration"]["mean"] > 0
    tols = {r["tol"]: r for r in rep["inference"]["results"]}
    assert set(tols) == {1e-7, 1e-3}
    assert tols[1e-3]["nfe_mean"] <= tols[1e-7]["nfe_mean"]
    assert run("bench", "--out", tmp_path / "x") == 2


def test_help_lists_commands(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    for cmd in ("mock", "smear", "train", "sample", "unfold", "eval", "bench"):
        assert cmd in out
