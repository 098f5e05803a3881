"""End-to-end tests for the command-line surface (run in-process)."""

import hashlib
import json

import numpy as np
import pytest

from qmrf.cli import main
from qmrf.mrf import load_dataset
from qmrf.model_io import load_model, save_model
from qmrf.network import LayerParams, make_regression_network


def sha256(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def gen(tmp_path, name="data.qmrf", n=200, seed=7, length=16, extra=()):
    path = tmp_path / name
    rc = main(
        ["generate", "--n", str(n), "--seed", str(seed), "--length", str(length),
         "--out", str(path), *extra]
    )
    assert rc == 0
    return path


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def test_generate_count_contract(tmp_path):
    path = gen(tmp_path, n=50)
    ds = load_dataset(path)
    assert len(ds) == 50
    assert (tmp_path / "data.qmrf.manifest.json").exists()


def test_generate_deterministic_checksum(tmp_path):
    p1 = gen(tmp_path, name="a.qmrf", n=40, seed=9)
    p2 = gen(tmp_path, name="b.qmrf", n=40, seed=9)
    assert sha256(p1) == sha256(p2)


def test_generate_invalid_ranges_no_partial_file(tmp_path, capsys):
    out = tmp_path / "bad.qmrf"
    rc = main(["generate", "--n", "10", "--out", str(out),
               "--t1-min", "500", "--t1-max", "100"])
    assert rc == 1
    assert not out.exists()
    assert not (tmp_path / "bad.qmrf.tmp").exists()


def test_generate_spec_file(tmp_path):
    spec_file = tmp_path / "spec.json"
    spec_file.write_text(json.dumps({"n_samples": 12, "length": 8, "seed": 3}))
    out = tmp_path / "d.qmrf"
    rc = main(["generate", "--spec", str(spec_file), "--out", str(out)])
    assert rc == 0
    assert len(load_dataset(out)) == 12


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def net_file(tmp_path, input_dim=32, sizes=(8, 4, 2)):
    path = tmp_path / "net.json"
    path.write_text(json.dumps({"input_dim": input_dim, "layer_sizes": list(sizes)}))
    return path


def test_train_float_writes_model_and_loss_csv(tmp_path):
    data = gen(tmp_path)
    model = tmp_path / "model.qnn"
    rc = main(["train", "--data", str(data), "--out", str(model),
               "--net", str(net_file(tmp_path)),
               "--mode", "float", "--epochs", "3", "--steps", "30", "--seed", "1"])
    assert rc == 0
    loaded = load_model(model)
    assert loaded.params[0].quant is None
    csv = (tmp_path / "model.qnn.loss.csv").read_text().strip().splitlines()
    assert csv[0] == "epoch,mean_loss"
    assert len(csv) == 4
    losses = [float(line.split(",")[1]) for line in csv[1:]]
    assert all(np.isfinite(losses))
    assert (tmp_path / "model.qnn.manifest.json").exists()


def test_train_does_not_mutate_input_dataset(tmp_path):
    data = gen(tmp_path)
    before = sha256(data)
    main(["train", "--data", str(data), "--out", str(tmp_path / "m.qnn"),
          "--net", str(net_file(tmp_path)), "--epochs", "1", "--steps", "5"])
    assert sha256(data) == before


def test_train_zero_learning_rate_flat_loss(tmp_path):
    data = gen(tmp_path, n=1)  # one sample -> every step sees the same loss
    model = tmp_path / "m.qnn"
    rc = main(["train", "--data", str(data), "--out", str(model),
               "--net", str(net_file(tmp_path)),
               "--lr", "0", "--epochs", "3", "--steps", "10"])
    assert rc == 0
    csv = (tmp_path / "m.qnn.loss.csv").read_text().strip().splitlines()[1:]
    losses = {line.split(",")[1] for line in csv}
    assert len(losses) == 1


def test_train_qat_writes_integer_export(tmp_path):
    data = gen(tmp_path)
    model = tmp_path / "q.qnn"
    rc = main(["train", "--data", str(data), "--out", str(model),
               "--net", str(net_file(tmp_path)),
               "--mode", "qat", "--epochs", "2", "--steps", "20", "--seed", "2"])
    assert rc == 0
    loaded = load_model(model)
    assert all(lp.quant is not None for lp in loaded.params)


def test_train_config_file_with_flag_override(tmp_path):
    data = gen(tmp_path)
    cfg_file = tmp_path / "train.json"
    cfg_file.write_text(json.dumps({"epochs": 2, "steps_per_epoch": 10, "seed": 5}))
    model = tmp_path / "m.qnn"
    rc = main(["train", "--data", str(data), "--out", str(model),
               "--net", str(net_file(tmp_path)),
               "--train-config", str(cfg_file), "--epochs", "1"])
    assert rc == 0
    csv = (tmp_path / "m.qnn.loss.csv").read_text().strip().splitlines()
    assert len(csv) == 2  # header + 1 epoch (flag wins over file)


def test_train_missing_data_file(tmp_path):
    rc = main(["train", "--data", str(tmp_path / "nope.qmrf"),
               "--out", str(tmp_path / "m.qnn")])
    assert rc == 2


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def test_eval_memorizing_stub_model_gives_zero_metrics(tmp_path, capsys):
    # constant-target dataset + a model whose output bias is exactly the
    # normalized target: every metric must be 0
    data = gen(tmp_path, n=10, extra=("--t1-min", "800", "--t1-max", "800",
                                      "--t2-min", "80", "--t2-max", "80"))
    cfg = make_regression_network(32, [4, 2])
    params = [
        LayerParams(weights=np.zeros((4, 32)), biases=np.zeros(4)),
        LayerParams(weights=np.zeros((2, 4)), biases=np.array([800 / 4000, 80 / 2000])),
    ]
    model = tmp_path / "stub.qnn"
    save_model(model, cfg, params, normalization={"t1_max": 4000.0, "t2_max": 2000.0})
    capsys.readouterr()  # drop setup output
    rc = main(["eval", "--model", str(model), "--data", str(data), "--json"])
    assert rc == 0
    payload = json.loads(capsys.readouterr().out)
    for param in ("t1", "t2"):
        for metric in ("mape_percent", "mpe_percent", "rmse_ms"):
            assert payload["metrics"][param][metric] == 0.0


def test_eval_float_and_qat_reports(tmp_path, capsys):
    data = gen(tmp_path)
    test_data = gen(tmp_path, name="test.qmrf", n=50, seed=99)
    net = net_file(tmp_path)
    for mode in ("float", "qat"):
        main(["train", "--data", str(data), "--out", str(tmp_path / f"{mode}.qnn"),
              "--net", str(net), "--mode", mode, "--epochs", "2", "--steps", "20"])
    capsys.readouterr()  # drop setup output
    reports = {}
    for mode in ("float", "qat"):
        rc = main(["eval", "--model", str(tmp_path / f"{mode}.qnn"),
                   "--data", str(test_data), "--json"])
        assert rc == 0
        reports[mode] = json.loads(capsys.readouterr().out)
    assert reports["float"]["mode"] == "real"
    assert reports["qat"]["mode"] == "integer"
    ratio = (reports["qat"]["metrics"]["t1"]["mape_percent"]
             / reports["float"]["metrics"]["t1"]["mape_percent"])
    assert np.isfinite(ratio)


def test_eval_table_output(tmp_path, capsys):
    data = gen(tmp_path, n=30)
    model = tmp_path / "m.qnn"
    main(["train", "--data", str(data), "--out", str(model),
          "--net", str(net_file(tmp_path)), "--epochs", "1", "--steps", "10"])
    rc = main(["eval", "--model", str(model), "--data", str(data)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "MAPE (%)" in out and "manifest" in out


def test_eval_out_file_and_manifest(tmp_path):
    data = gen(tmp_path, n=30)
    model = tmp_path / "m.qnn"
    main(["train", "--data", str(data), "--out", str(model),
          "--net", str(net_file(tmp_path)), "--epochs", "1", "--steps", "10"])
    report = tmp_path / "metrics.json"
    rc = main(["eval", "--model", str(model), "--data", str(data), "--out", str(report)])
    assert rc == 0
    assert "metrics" in json.loads(report.read_text())
    assert (tmp_path / "metrics.json.manifest.json").exists()


def test_eval_missing_model_file(tmp_path):
    data = gen(tmp_path, n=5)
    rc = main(["eval", "--model", str(tmp_path / "nope.qnn"), "--data", str(data)])
    assert rc == 2


def test_eval_shape_mismatch(tmp_path):
    data = gen(tmp_path, n=5, length=8)  # 16 features
    model = tmp_path / "m.qnn"
    save_model(model, make_regression_network(32, [2]),
               [LayerParams(weights=np.zeros((2, 32)), biases=np.zeros(2))])
    rc = main(["eval", "--model", str(model), "--data", str(data)])
    assert rc == 2


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

@pytest.fixture
def qat_model(tmp_path):
    data = gen(tmp_path)
    model = tmp_path / "q.qnn"
    main(["train", "--data", str(data), "--out", str(model),
          "--net", str(net_file(tmp_path)),
          "--mode", "qat", "--epochs", "2", "--steps", "20", "--seed", "3"])
    return model


def test_verify_healthy_model_passes(qat_model, capsys):
    rc = main(["verify", "--model", str(qat_model), "--trials", "100", "--seed", "4"])
    assert rc == 0
    assert "PASS" in capsys.readouterr().out


def test_verify_zero_trials_vacuous_pass(qat_model, capsys):
    rc = main(["verify", "--model", str(qat_model), "--trials", "0"])
    assert rc == 0
    assert "WARNING" in capsys.readouterr().out


def test_verify_corrupted_requantizer_fails_with_layer(qat_model, capsys, monkeypatch):
    # corrupt the scalar node path only: scheduled and direct execution
    # must now disagree, and verify must locate the first bad layer
    import qmrf.network as network_mod
    from qmrf.quantization import requantize as real_requantize

    def off_by_one(acc, in_scale, out_p):
        v = real_requantize(acc, in_scale, out_p)
        return min(v + 1, out_p.qmax)

    monkeypatch.setattr(network_mod, "requantize", off_by_one)
    rc = main(["verify", "--model", str(qat_model), "--trials", "10", "--seed", "5"])
    assert rc == 3
    out = capsys.readouterr().out
    assert "FAIL" in out
    assert "first divergence at layer 0" in out


def test_verify_rejects_float_model(tmp_path):
    data = gen(tmp_path, n=20)
    model = tmp_path / "f.qnn"
    main(["train", "--data", str(data), "--out", str(model),
          "--net", str(net_file(tmp_path)), "--epochs", "1", "--steps", "5"])
    rc = main(["verify", "--model", str(model)])
    assert rc == 2


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------

def test_estimate_defaults_reproduce_calibration(capsys):
    rc = main(["estimate", "--json"])
    assert rc == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["cycles"]["forward_cycles"] == 56
    assert payload["cycles"]["backward_cycles"] == 104
    assert payload["training_time_seconds"] == 200
    assert payload["resources"]["totals"]["luts"] == 145_000
    assert payload["resources"]["totals"]["dsps"] == 5_000
    assert payload["resources"]["totals"]["ffs"] == 146_000


def test_estimate_pcie_adds_exact_block(capsys):
    main(["estimate", "--json"])
    base = json.loads(capsys.readouterr().out)
    main(["estimate", "--json", "--pcie"])
    pcie = json.loads(capsys.readouterr().out)
    assert pcie["resources"]["totals"]["luts"] - base["resources"]["totals"]["luts"] == 83_000
    assert pcie["resources"]["totals"]["ffs"] - base["resources"]["totals"]["ffs"] == 148_000
    assert pcie["resources"]["totals"]["brams"] - base["resources"]["totals"]["brams"] == 150


def test_estimate_250_mhz_gives_160_seconds(capsys):
    rc = main(["estimate", "--json", "--clock", "250"])
    assert rc == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["training_time_seconds"] == 160


def test_estimate_table_output(capsys):
    rc = main(["estimate"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "forward cycles          : 56" in out
    assert "backward cycles         : 104" in out
    assert "training time estimate    : 200 s" in out


def test_estimate_malformed_profile(tmp_path):
    bad = tmp_path / "hw.json"
    bad.write_text(json.dumps({"clock_speed": 200}))
    rc = main(["estimate", "--profile", str(bad)])
    assert rc == 1


def test_estimate_custom_profile(tmp_path, capsys):
    prof = tmp_path / "hw.toml"
    prof.write_text("clock_mhz = 100\n")
    rc = main(["estimate", "--profile", str(prof), "--json"])
    assert rc == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["training_time_seconds"] == 400


# ---------------------------------------------------------------------------
# usage errors
# ---------------------------------------------------------------------------

def test_unknown_flag_is_usage_error():
    assert main(["estimate", "--bogus"]) == 1


def test_missing_subcommand_is_usage_error():
    assert main([]) == 1


def test_unknown_net_config_keys(tmp_path):
    bad = tmp_path / "net.json"
    bad.write_text(json.dumps({"input_dim": 8, "layers": [4, 2]}))
    assert main(["estimate", "--net", str(bad)]) == 1
