import json
import math
from pathlib import Path

import numpy as np
import pytest
import yaml

from fedhm import cli, config
from fedhm import modelspec as ms

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _write(tmp_path, raw, name="c.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(raw))
    return p


def _smoke(tmp_path, **over):
    raw = yaml.safe_load((CONFIGS / "smoke.yaml").read_text())
    raw["output"] = {"dir": str(tmp_path / "out")}
    for key, value in over.items():
        section, _, field = key.partition("__")
        if field:
            raw.setdefault(section, {})[field] = value
        else:
            raw[section] = value
    return raw


# --- config ------------------------------------------------------------------------------


def test_defaults():
    cfg = config.from_dict({})
    f, o = cfg.federation, cfg.optim
    assert (f.clients, f.fraction, f.rounds, f.local_epochs, f.batch_size) == (20, 0.5, 160, 10, 64)
    assert (o.lr, o.momentum, o.weight_decay) == (0.1, 0.9, 1e-4)
    assert cfg.hetero.rank_ratios == [0.5, 0.25, 0.125, 0.083]


def test_tau_defaults_follow_schedule():
    assert math.isinf(config.from_dict({}).hetero.tau)
    assert config.from_dict({"hetero": {"schedule": "dynamic"}}).hetero.tau == 5.0
    assert config.from_dict({"hetero": {"schedule": "dynamic", "tau": 2}}).hetero.tau == 2.0


@pytest.mark.parametrize("raw,field", [
    ({"optim": {"lr": -0.1}}, "optim.lr"),
    ({"optim": {"lr": 0}}, "optim.lr"),
    ({"federation": {"fraction": 1.5}}, "federation.fraction"),
    ({"federation": {"clients": "many"}}, "federation.clients"),
    ({"hetero": {"rank_ratios": [0.5, 1.2]}}, "hetero.rank_ratios"),
    ({"hetero": {"tau": -1}}, "hetero.tau"),
    ({"hetero": {"rho": 1, "factorize_stages": [2]}}, "hetero.factorize_stages"),
    ({"federation": {"clients": 3}, "hetero": {"assignment": [1, 2]}}, "hetero.assignment"),
    ({"optim": {"learning_rate": 0.1}}, "optim.learning_rate"),
    ({"bogus": 1}, "bogus"),
    ({"method": "fedprox"}, "method"),
    ({"dataset": {"kind": "idx"}}, "dataset.train_images"),
    ({"output": {"format": "xml"}}, "output.format"),
])
def test_config_errors_name_field(raw, field):
    with pytest.raises(config.ConfigError) as info:
        config.from_dict(raw)
    assert info.value.field == field
    assert field in str(info.value)


def test_config_dump_round_trip(tmp_path):
    cfg = config.parse_config(CONFIGS / "desk_fedhm.yaml")
    config.dump_config(cfg, tmp_path / "r.yaml")
    again = config.parse_config(tmp_path / "r.yaml")
    assert again.to_dict() == cfg.to_dict()


def test_missing_config_file(tmp_path):
    with pytest.raises(config.ConfigError):
        config.parse_config(tmp_path / "nope.yaml")


# --- describe ------------------------------------------------------------------------------


def test_describe_resnet18(capsys):
    assert cli.main(["describe", str(CONFIGS / "resnet18_cifar10.yaml")]) == 0
    out = capsys.readouterr().out
    assert "11,173,962" in out


def test_describe_levels():
    cfg = config.from_dict({"model": {"name": "resnet18"}, "dataset": {"classes": 10, "shape": [3, 32, 32]},
                            "hetero": {"rank_ratios": [1.0, 0.25]}})
    rep = cli.describe_config(cfg)
    assert rep["full_params"] == 11_173_962
    assert rep["levels"][1]["params"] == rep["full_params"]
    assert rep["levels"][2]["bytes_per_transfer"] == 4 * rep["levels"][2]["params"]
    assert rep["levels"][2]["params"] < rep["full_params"]


def test_describe_widthslim():
    cfg = config.from_dict({"method": "widthslim-fedavg", "model": {"name": "resnet18"},
                            "dataset": {"classes": 10, "shape": [3, 32, 32]}, "hetero": {"slim_ratio": 0.5}})
    assert cli.describe_config(cfg)["levels"][1]["params"] == 2_797_610


def test_rho_out_of_range():
    cfg = config.from_dict({"hetero": {"rho": 99}})
    with pytest.raises(config.ConfigError, match="hetero.rho"):
        cli.describe_config(cfg)


def test_bad_config_exit_code(tmp_path, capsys):
    p = _write(tmp_path, {"optim": {"lr": -1}})
    assert cli.main(["run", str(p)]) == 2
    assert "optim.lr" in capsys.readouterr().err


# --- run -------------------------------------------------------------------------------------


def test_smoke_run_outputs(tmp_path):
    p = _write(tmp_path, _smoke(tmp_path))
    assert cli.main(["run", str(p)]) == 0
    out = tmp_path / "out"
    for name in ("metrics.csv", "final_model.bin", "final_spec.json", "config.resolved.yaml", "run_meta.json"):
        assert (out / name).exists(), name
    spec = ms.ModelSpec.from_dict(json.loads((out / "final_spec.json").read_text()))
    model = ms.load_weights(out / "final_model.bin", spec)
    assert model.params
    meta = json.loads((out / "run_meta.json").read_text())
    assert meta["partition"]["scheme"] == "iid" and meta["kernel_backend"] in ("cython", "python")
    header = (out / "metrics.csv").read_text().splitlines()[0]
    assert header == "round,level,params,acc_top1,bytes_up,bytes_down,cum_macs,seconds"


def test_flag_overrides(tmp_path):
    p = _write(tmp_path, _smoke(tmp_path))
    other = tmp_path / "elsewhere"
    assert cli.main(["run", str(p), "--out", str(other), "--format", "jsonl", "--seed-init", "3",
                     "--seed-sample", "4", "--seed-data", "5"]) == 0
    assert (other / "metrics.jsonl").exists()
    resolved = yaml.safe_load((other / "config.resolved.yaml").read_text())
    assert resolved["seeds"] == {"init": 3, "sample": 4, "data": 5}
    assert resolved["output"]["format"] == "jsonl"


def test_run_twice_byte_identical(tmp_path, monkeypatch):
    p = _write(tmp_path, _smoke(tmp_path, partition={"scheme": "dirichlet", "alpha": 0.5}))
    cli.main(["run", str(p), "--out", str(tmp_path / "a")])
    monkeypatch.setenv("FEDHM_THREADS", "2")
    cli.main(["run", str(p), "--out", str(tmp_path / "b")])
    for name in ("metrics.csv", "final_model.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_changes_results(tmp_path):
    p = _write(tmp_path, _smoke(tmp_path))
    cli.main(["run", str(p), "--out", str(tmp_path / "a")])
    cli.main(["run", str(p), "--out", str(tmp_path / "b"), "--seed-init", "9"])
    assert (tmp_path / "a" / "final_model.bin").read_bytes() != (tmp_path / "b" / "final_model.bin").read_bytes()


@pytest.mark.parametrize("method", ["fedavg", "heterofl-channel", "widthslim-fedavg"])
def test_other_methods_run(tmp_path, method):
    p = _write(tmp_path, _smoke(tmp_path, method=method))
    assert cli.main(["run", str(p)]) == 0
    rows = (tmp_path / "out" / "metrics.csv").read_text().splitlines()
    assert len(rows) > 1


def test_csv_dataset_run(tmp_path):
    rng = np.random.default_rng(0)
    for split, n in (("train", 40), ("test", 12)):
        labels = rng.integers(0, 2, n)
        feats = labels[:, None] * 2.0 + rng.normal(0, 0.3, (n, 6))
        np.savetxt(tmp_path / f"{split}.csv", np.column_stack([labels, feats]), delimiter=",")
    raw = {"model": {"name": "mlp", "hidden": 8}, "dataset": {"kind": "csv", "classes": 2,
           "train_csv": str(tmp_path / "train.csv"), "test_csv": str(tmp_path / "test.csv")},
           "federation": {"clients": 2, "rounds": 1, "local_epochs": 1}, "hetero": {"rank_ratios": [0.5]},
           "output": {"dir": str(tmp_path / "o")}}
    assert cli.main(["run", str(_write(tmp_path, raw))]) == 0


def test_zero_rounds(tmp_path, capsys):
    p = _write(tmp_path, _smoke(tmp_path, federation__rounds=0))
    assert cli.main(["run", str(p)]) == 0
    assert (tmp_path / "out" / "metrics.csv").read_text().strip() == ",".join(
        ["round", "level", "params", "acc_top1", "bytes_up", "bytes_down", "cum_macs", "seconds"])


def test_module_entry_point():
    import subprocess
    import sys

    out = subprocess.run([sys.executable, "-m", "fedhm", "describe", str(CONFIGS / "smoke.yaml")],
                         capture_output=True, text=True, check=True)
    assert "full params" in out.stdout
