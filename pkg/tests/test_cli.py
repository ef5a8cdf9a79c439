import json
import struct

import numpy as np
import pytest

from mplstm import cli
from mplstm.data import read_dataset
from mplstm.experiment import (
    CSV_HEADER, ExperimentConfig, ModelFormatError, emit_metrics_csv, load_model, read_metrics_csv,
    save_model,
)
from mplstm.mathcore import Rng
from mplstm.network import ConfigError, Network, ScoreFusion
from mplstm.training import GradcheckRow, build_model, evaluate


@pytest.fixture
def workdir(tmp_path):
    prefix = tmp_path / "toy"
    code = cli.run(["synth", "--task", "modsum", "--k", "3", "--n", "3", "--noise", "0.25",
                    "--train-samples", "40", "--test-samples", "20", "--seed", "3",
                    "--out-prefix", str(prefix)])
    assert code == 0
    return tmp_path


def write_config(path, **kw):
    doc = {"hidden": 4, "epochs": 3, "batch_size": 8, "seed": 1}
    doc.update(kw)
    path.write_text(json.dumps(doc))
    return path


def train(workdir, name, **kw):
    cfg = write_config(workdir / f"{name}.json", **kw)
    code = cli.run(["train", "--config", str(cfg), "--train", str(workdir / "toy.train.mps"),
                    "--val", str(workdir / "toy.test.mps"), "--out", str(workdir / f"{name}.mpm1"),
                    "--metrics", str(workdir / f"{name}.csv")])
    assert code == 0
    return workdir / f"{name}.mpm1", workdir / f"{name}.csv"


class TestSynth:
    def test_writes_both_splits(self, workdir):
        train_set = read_dataset(workdir / "toy.train.mps")
        test_set = read_dataset(workdir / "toy.test.mps")
        assert len(train_set) == 40 and len(test_set) == 20
        assert train_set.shape == (2, 3, 3) and train_set.num_classes == 3


class TestTrainEval:
    def test_csv_schema(self, workdir):
        _, csv = train(workdir, "a")
        lines = csv.read_text().splitlines()
        assert lines[0] == CSV_HEADER
        assert len(lines) == 4
        assert csv.read_text().endswith("\n")

    def test_byte_identical_reruns(self, workdir):
        m1, c1 = train(workdir, "a")
        m2, c2 = train(workdir, "b")
        assert m1.read_bytes() == m2.read_bytes()
        assert c1.read_bytes() == c2.read_bytes()

    def test_zero_learning_rate_rows_repeat(self, workdir):
        _, csv = train(workdir, "z", lr=0.0, dropout=0.0)
        rows = csv.read_text().splitlines()[1:]
        assert len({r.split(",", 1)[1] for r in rows}) == 1

    def test_eval_matches_final_row(self, workdir, capsys):
        model, csv = train(workdir, "e")
        capsys.readouterr()
        assert cli.run(["eval", "--model", str(model), "--data", str(workdir / "toy.test.mps")]) == 0
        out = capsys.readouterr().out.splitlines()
        last = read_metrics_csv(csv)[-1]
        assert float(out[0].split()[1]) == pytest.approx(last[3], abs=1e-9)
        assert float(out[1].split()[1]) == pytest.approx(last[4], abs=1e-9)
        confusion = np.array([[int(c) for c in line.split()] for line in out[3:]])
        assert confusion.sum() == 20

    @pytest.mark.parametrize("extra", [
        {"cell": "ablation_b", "bidirectional": False},
        {"cell": "vanilla", "fusion": "feature_time", "attention": False},
        {"cell": "vanilla", "fusion": "score"},
    ])
    def test_other_modes(self, workdir, extra):
        model, _ = train(workdir, "x", **extra)
        loaded, exp = load_model(model)
        assert exp.cell == extra["cell"]
        if extra.get("fusion") == "score":
            assert isinstance(loaded, ScoreFusion) and len(loaded.models) == 2

    def test_bench(self, workdir, capsys):
        cfg = write_config(workdir / "bench.json")
        assert cli.run(["bench", "--config", str(cfg), "--data", str(workdir / "toy.test.mps"), "--reps", "2"]) == 0
        out = capsys.readouterr().out
        assert "epoch_seconds_median" in out and "forward_seconds_per_sequence" in out


class TestErrors:
    def test_unknown_command(self):
        assert cli.run(["fly"]) == cli.EXIT_UNKNOWN_COMMAND

    def test_unknown_flag(self):
        assert cli.run(["gradcheck", "--sed", "3"]) == cli.EXIT_USAGE
        assert cli.run([]) == cli.EXIT_USAGE

    def test_missing_file(self, workdir):
        cfg = write_config(workdir / "c.json")
        code = cli.run(["train", "--config", str(cfg), "--train", str(workdir / "nope.mps"),
                        "--val", str(workdir / "toy.test.mps"), "--out", str(workdir / "m"),
                        "--metrics", str(workdir / "c.csv")])
        assert code == cli.EXIT_IO

    def test_config_violation(self, workdir):
        cfg = workdir / "bad.json"
        cfg.write_text(json.dumps({"hiden": 4}))
        code = cli.run(["bench", "--config", str(cfg), "--data", str(workdir / "toy.test.mps")])
        assert code == cli.EXIT_CONFIG

    def test_bad_model_file(self, workdir):
        path = workdir / "junk.mpm1"
        path.write_bytes(b"nonsense")
        assert cli.run(["eval", "--model", str(path), "--data", str(workdir / "toy.test.mps")]) == cli.EXIT_BAD_FILE

    def test_gradcheck_failure_exit(self, monkeypatch, capsys):
        monkeypatch.setattr(cli, "gradcheck", lambda seed: [GradcheckRow("fake", {"w": 1e-3})])
        assert cli.run(["gradcheck"]) == cli.EXIT_GRADCHECK_FAILED
        assert "FAIL" in capsys.readouterr().out

    def test_distinct_codes(self):
        codes = [cli.EXIT_GRADCHECK_FAILED, cli.EXIT_USAGE, cli.EXIT_UNKNOWN_COMMAND,
                 cli.EXIT_IO, cli.EXIT_CONFIG, cli.EXIT_BAD_FILE]
        assert len(set(codes)) == len(codes) and 0 not in codes


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert (cfg.hidden, cfg.dropout, cfg.lr, cfg.rho, cfg.epsilon) == (32, 0.1, 1e-3, 0.9, 1e-8)
        assert cfg.bidirectional and cfg.attention

    def test_rejects_unknown_and_bad_values(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            ExperimentConfig.from_dict({"hidden": 3, "colour": "red"})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"hidden": True})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"cell": "gru"})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"dropout": 1.5})


class TestModelFile:
    def test_round_trip_is_exact(self, tmp_path):
        exp = ExperimentConfig(hidden=3)
        net = build_model(exp.network_config(2, 4, 3), 7)
        path = tmp_path / "m.mpm1"
        save_model(path, net, exp)
        loaded, exp2 = load_model(path)
        assert exp2 == exp
        for name, theta in net.parameters().items():
            assert np.array_equal(theta, loaded.parameters()[name])
        raw = path.read_bytes()
        assert raw[:4] == b"MPM1"
        (length,) = struct.unpack("<I", raw[4:8])
        header = json.loads(raw[8:8 + length])
        assert header["shape"] == {"m": 2, "d": 4, "k": 3}
        assert len(raw) == 8 + length + 8 * sum(t.size for t in net.parameters().values())

    def test_parameter_order(self):
        net = Network.init(ExperimentConfig(hidden=2).network_config(2, 3, 3), Rng(0))
        assert list(net.parameters()) == [
            "fwd.w_s", "fwd.w_h", "fwd.w_c", "fwd.b", "bwd.w_s", "bwd.w_h", "bwd.w_c", "bwd.b",
            "head.w_a", "head.v_a", "head.b_a", "head.w_out", "head.b_out",
        ]

    def test_rejects_shape_mismatch(self, tmp_path):
        exp = ExperimentConfig(hidden=3)
        path = tmp_path / "m.mpm1"
        save_model(path, build_model(exp.network_config(2, 4, 3), 0), exp)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ModelFormatError):
            load_model(path)
        path.write_bytes(b"MPM0" + b"\0" * 20)
        with pytest.raises(ModelFormatError):
            load_model(path)


class TestMetricsCsv:
    def test_precision_and_shape(self, tmp_path):
        rows = [(1, 1.3862943611198906, 0.25, 1.38, 0.2512345678),
                (2, 0.123456789, 0.5, 0.0009876543, 0.75),
                (3, 1e-7, 1.0, 2.5, 1.0)]
        path = tmp_path / "m.csv"
        emit_metrics_csv(path, rows)
        text = path.read_text()
        assert text.count("\n") == 4
        back = read_metrics_csv(path)
        for a, b in zip(rows, back):
            assert a[0] == b[0]
            np.testing.assert_allclose(b[1:], a[1:], atol=1e-5, rtol=0)

    def test_empty_rows_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            emit_metrics_csv(tmp_path / "m.csv", [])

    def test_eval_of_saved_model_matches_memory(self, tmp_path):
        from mplstm.data import ModSumSpec, gen_modsum

        data = gen_modsum(ModSumSpec(3, 3, 0.25, 30), Rng(1))
        exp = ExperimentConfig(hidden=3)
        net = build_model(exp.network_config(2, 3, 3), 2)
        save_model(tmp_path / "m.mpm1", net, exp)
        loaded, _ = load_model(tmp_path / "m.mpm1")
        assert evaluate(loaded, data).loss == evaluate(net, data).loss
