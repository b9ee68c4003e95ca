"""End-to-end CLI behavior: exit codes, file inventories, determinism."""

import json
import os

import numpy as np

from ldnn import cli, nn, tasks


def write_config(tmp_path, name="exp.json", **overrides):
    cfg = {
        "task": "mnist1d",
        "seed": 1234,
        "n_seeds": 2,
        "hidden_width": 6,
        "activation_types": [
            {"kind": "subnet", "base": "sine", "hidden_width": 4},
            {"kind": "subnet", "base": "sine", "hidden_width": 4},
            {"kind": "builtin", "name": "relu"},
        ],
        "variants": {"mix": [0, 1], "relu": [2]},
        "data": {"m_train": 60, "m_val": 30, "seed": 7},
        "schedule": {"inner_lr": 0.01, "outer_lr": 0.001, "outer_period": 2,
                     "batch_size": 20, "epochs": 2, "optimizer": "adam"},
    }
    cfg.update(overrides)
    path = tmp_path / name
    path.write_text(json.dumps(cfg, indent=1))
    return str(path)


def slurp_tree(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            full = os.path.join(dirpath, f)
            out[os.path.relpath(full, root)] = open(full, "rb").read()
    return out


class TestTrain:
    def test_smoke_writes_artifacts(self, tmp_path, capsys):
        config = write_config(tmp_path)
        out = tmp_path / "out"
        assert cli.main(["train", config, "--out", str(out)]) == 0
        names = sorted(os.listdir(out))
        assert names == ["activation_type0.csv", "activation_type1.csv",
                         "history.csv", "params.json"]
        assert "validation accuracy" in capsys.readouterr().out

    def test_missing_config_exit_2(self, tmp_path, capsys):
        assert cli.main(["train", str(tmp_path / "nope.json")]) == 2
        assert "not found" in capsys.readouterr().err

    def test_bad_config_exit_2(self, tmp_path, capsys):
        config = write_config(tmp_path, variants={})
        assert cli.main(["train", config]) == 2

    def test_same_seed_byte_identical(self, tmp_path):
        config = write_config(tmp_path)
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        assert cli.main(["train", config, "--seed", "7", "--out", str(out1)]) == 0
        assert cli.main(["train", config, "--seed", "7", "--out", str(out2)]) == 0
        assert slurp_tree(out1) == slurp_tree(out2)

    def test_unknown_variant_exit_2(self, tmp_path):
        config = write_config(tmp_path)
        assert cli.main(["train", config, "--variant", "nope"]) == 2

    def test_unwritable_out_exit_4(self, tmp_path, capsys):
        config = write_config(tmp_path)
        blocker = tmp_path / "blocker"
        blocker.write_text("a file, not a directory")
        assert cli.main(["train", config, "--out", str(blocker / "sub")]) == 4
        assert "i/o error" in capsys.readouterr().err


class TestCampaign:
    def test_bookkeeping_and_tables(self, tmp_path, capsys):
        config = write_config(tmp_path)
        out = tmp_path / "camp"
        assert cli.main(["campaign", config, "--jobs", "1", "--out", str(out)]) == 0
        runs = (out / "runs.csv").read_text().splitlines()
        assert len(runs) == 1 + 2 * 2  # n_seeds * |roster|
        groups = (out / "groups.csv").read_text().splitlines()
        assert len(groups) == 1 + 2
        assert (out / "summary.json").exists()
        assert (out / "hist2d.csv").exists()
        printed = capsys.readouterr().out
        assert "mix:" in printed and "relu:" in printed

    def test_single_seed_degenerate_table(self, tmp_path):
        config = write_config(tmp_path, n_seeds=1)
        out = tmp_path / "camp1"
        assert cli.main(["campaign", config, "--jobs", "1", "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        for group in summary["groups"].values():
            assert group["count"] == 1
            assert group["median"] == group["mean"] == group["lo"] == group["hi"]

    def test_rerun_identical(self, tmp_path):
        config = write_config(tmp_path)
        out1, out2 = tmp_path / "c1", tmp_path / "c2"
        assert cli.main(["campaign", config, "--jobs", "1", "--out", str(out1)]) == 0
        assert cli.main(["campaign", config, "--jobs", "1", "--out", str(out2)]) == 0
        assert slurp_tree(out1) == slurp_tree(out2)

    def test_worker_pool_matches_serial(self, tmp_path):
        config = write_config(tmp_path)
        serial, pooled = tmp_path / "ser", tmp_path / "par"
        assert cli.main(["campaign", config, "--jobs", "1", "--out", str(serial)]) == 0
        assert cli.main(["campaign", config, "--jobs", "2", "--out", str(pooled)]) == 0
        assert slurp_tree(serial) == slurp_tree(pooled)


class TestSizeSweep:
    def test_per_size_tables(self, tmp_path):
        config = write_config(tmp_path, sizes=[4, 6], n_seeds=1)
        out = tmp_path / "sweep"
        assert cli.main(["size-sweep", config, "--jobs", "1", "--out", str(out)]) == 0
        assert (out / "size_4" / "runs.csv").exists()
        assert (out / "size_6" / "runs.csv").exists()
        lines = (out / "sizes.csv").read_text().splitlines()
        assert lines[0].startswith("width,variant")
        assert len(lines) == 1 + 2 * 2  # two widths x two variants

    def test_single_size_equals_campaign(self, tmp_path):
        config = write_config(tmp_path, sizes=[6], n_seeds=1)
        sweep_out = tmp_path / "sweep1"
        camp_out = tmp_path / "camp1"
        assert cli.main(["size-sweep", config, "--jobs", "1", "--out", str(sweep_out)]) == 0
        assert cli.main(["campaign", config, "--jobs", "1", "--out", str(camp_out)]) == 0
        assert slurp_tree(sweep_out / "size_6") == slurp_tree(camp_out)

    def test_zero_width_rejected(self, tmp_path):
        config = write_config(tmp_path, sizes=[0])
        assert cli.main(["size-sweep", config]) == 2

    def test_missing_sizes_rejected(self, tmp_path):
        config = write_config(tmp_path)
        assert cli.main(["size-sweep", config]) == 2


class TestGenData:
    def test_vdp_container(self, tmp_path):
        out = tmp_path / "vdp"
        assert cli.main(["gen-data", "vdp", "--seed", "3", "--m", "100",
                         "--out", str(out)]) == 0
        train = tasks.load_dataset(out / "train.dsv")
        assert train.task == "regression"
        assert train.n_features == 2 and train.targets.shape[1] == 2

    def test_mnist1d_container(self, tmp_path):
        out = tmp_path / "digits"
        assert cli.main(["gen-data", "mnist1d-synth", "--seed", "3", "--m", "200",
                         "--out", str(out)]) == 0
        train = tasks.load_dataset(out / "train.dsv")
        val = tasks.load_dataset(out / "val.dsv")
        assert train.task == "classification"
        assert train.n_features == 40 and train.num_classes == 10
        assert train.n_examples == 200 and val.n_examples == 50

    def test_same_seed_identical_files(self, tmp_path):
        o1, o2 = tmp_path / "a", tmp_path / "b"
        for out in (o1, o2):
            assert cli.main(["gen-data", "mnist1d-synth", "--seed", "5", "--m", "50",
                             "--out", str(out)]) == 0
        assert slurp_tree(o1) == slurp_tree(o2)


class TestExportAndReuse:
    def train_once(self, tmp_path, **overrides):
        config = write_config(tmp_path, **overrides)
        out = tmp_path / "trained"
        assert cli.main(["train", config, "--out", str(out)]) == 0
        return config, out / "params.json"

    def test_export_roundtrip_close_to_subnet(self, tmp_path):
        _, params_path = self.train_once(tmp_path)
        act_path = tmp_path / "act0.json"
        assert cli.main(["export-activation", str(params_path), "--type", "0",
                         "--range", "-4", "4", "--points", "301",
                         "--out", str(act_path)]) == 0
        spec = nn.load_activation_json(act_path)
        params, config = nn.load_params(params_path)
        probe = np.linspace(-4, 4, 1201)
        direct = nn.eval_activation(config.activations[0], probe, params.subnets[0])
        assert np.abs(nn.eval_activation(spec, probe) - direct).max() < 1e-3

    def test_export_builtin_only_fails(self, tmp_path, capsys):
        _, params_path = self.train_once(tmp_path, variants={"relu": [2]})
        assert cli.main(["export-activation", str(params_path), "--type", "2",
                         "--out", str(tmp_path / "x.json")]) == 2
        assert "no subnet at index 2" in capsys.readouterr().err

    def test_export_index_out_of_range(self, tmp_path):
        _, params_path = self.train_once(tmp_path)
        assert cli.main(["export-activation", str(params_path), "--type", "9",
                         "--out", str(tmp_path / "x.json")]) == 2

    def test_reuse_frozen_tabulated_has_no_outer_params(self, tmp_path):
        _, params_path = self.train_once(tmp_path)
        for t in (0, 1):
            assert cli.main(["export-activation", str(params_path), "--type", str(t),
                             "--out", str(tmp_path / f"act{t}.json")]) == 0
        reuse_config = write_config(
            tmp_path, name="reuse.json",
            activation_types=[{"kind": "tabulated", "path": f"act{t}.json"} for t in (0, 1)],
            variants={"frozen-mix": [0, 1]},
        )
        out = tmp_path / "reuse-out"
        assert cli.main(["train", reuse_config, "--out", str(out)]) == 0
        params, _ = nn.load_params(out / "params.json")
        assert nn.theta_a_size(params) == 0  # parameter census: no outer-loop weights

    def test_diagnose(self, tmp_path, capsys):
        config_path, params_path = self.train_once(tmp_path)
        data_dir = tmp_path / "d"
        assert cli.main(["gen-data", "mnist1d-synth", "--seed", "7", "--m", "60",
                         "--out", str(data_dir)]) == 0
        report = tmp_path / "diag.json"
        assert cli.main(["diagnose", str(params_path), "--data", str(data_dir / "val.dsv"),
                         "--out", str(report)]) == 0
        obj = json.loads(report.read_text())
        assert {"metric", "participation_ratio", "normalized_participation_ratio",
                "theta_params", "theta_a_params"} <= obj.keys()
        assert 1.0 <= obj["participation_ratio"] <= 6.0


class TestSeedDerivation:
    def test_stable_and_distinct(self):
        a = cli.derive_run_seed(1234, "mix", 0)
        assert a == cli.derive_run_seed(1234, "mix", 0)
        assert a != cli.derive_run_seed(1234, "mix", 1)
        assert a != cli.derive_run_seed(1234, "type1", 0)
        assert a != cli.derive_run_seed(1235, "mix", 0)
