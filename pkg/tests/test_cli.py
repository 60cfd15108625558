import json
import subprocess
import sys

import numpy as np
import pytest

from p2be.cli import main
from p2be.corruptions import KINDS
from p2be.imageio import read_pgm, read_ppm, write_ppm

TINY = {"train": {"epochs": 2, "dim": 4, "batch_size": 16},
        "data": {"n_train": 32, "n_test": 16, "n_classes": 3}}


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps({**TINY, "output_dir": str(d / "out")}))
    assert main(["train", str(cfg)]) == 0
    return d


@pytest.fixture
def ppm(tmp_path, rng):
    path = tmp_path / "img.ppm"
    write_ppm(path, rng.integers(0, 256, (3, 6, 6), dtype=np.uint8))
    return path


class TestTrain:
    def test_outputs(self, run_dir):
        out = run_dir / "out"
        for name in ("checkpoint.p2be", "metrics.csv", "steps.csv"):
            assert (out / name).exists()
        header = (out / "metrics.csv").read_text().splitlines()[0]
        assert header == "epoch,lr,L_ce,L_consistency,L_smooth,train_acc,clean_test_err"
        assert (out / "steps.csv").read_text().startswith("step,L_ce,L_consistency,L_smooth,L_total\n")

    def test_stdout(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({**TINY, "output_dir": str(tmp_path / "o")}))
        code, out, _ = run(["train", cfg], capsys)
        lines = out.splitlines()
        assert code == 0
        assert lines[0].startswith("clean_error,") and lines[1].startswith("checkpoint,")

    def test_seed_override(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(TINY))
        for name, seed in (("a", 1), ("b", 1), ("c", 2)):
            assert run(["train", cfg, "--seed", seed, "--out", tmp_path / name], capsys)[0] == 0
        read = lambda n: (tmp_path / n / "metrics.csv").read_bytes()  # noqa: E731
        assert read("a") == read("b")
        assert read("a") != read("c")

    def test_missing_config(self, tmp_path, capsys):
        code, _, err = run(["train", tmp_path / "nope.json"], capsys)
        assert code == 2 and "nope.json" in err

    @pytest.mark.parametrize("doc,field", [({"train": {"dim": "x"}}, "train.dim"),
                                           ({"train": {"bogus": 1}}, "bogus"),
                                           ({"attack": {"steps": 0}}, "attack"),
                                           ({"corruptions": {"fog": [0] * 5}}, "fog")])
    def test_bad_config(self, tmp_path, capsys, doc, field):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps(doc))
        code, _, err = run(["train", cfg], capsys)
        assert code == 2 and field in err

    def test_invalid_json(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text("{")
        assert run(["train", cfg], capsys)[0] == 2


class TestEval:
    def test_clean_golden(self, run_dir, capsys):
        code, out, _ = run(["eval", run_dir / "out" / "checkpoint.p2be"], capsys)
        lines = out.splitlines()
        assert code == 0
        assert lines[0] == "metric,value"
        assert lines[1].startswith("clean_error,") and len(lines) == 2

    def test_corruptions_need_baseline(self, run_dir, capsys):
        code, _, err = run(["eval", run_dir / "out" / "checkpoint.p2be", "--corruptions"], capsys)
        assert code == 2 and "baseline" in err

    def test_self_baseline_gives_one(self, run_dir, tmp_path, capsys):
        ckpt = run_dir / "out" / "checkpoint.p2be"
        errs = tmp_path / "errors.csv"
        code, out, _ = run(["eval", ckpt, "--corruptions", "--no-ce", "--errors-csv", errs], capsys)
        assert code == 0
        assert errs.read_text().startswith("kind,severity,error\n")
        # a kind with zero summed error cannot act as a baseline
        text = errs.read_text()
        rows = [r.split(",") for r in text.splitlines()[1:]]
        if any(float(r[2]) == 0 for r in rows):
            pytest.skip("model is error-free under some corruption kind")
        code, out, _ = run(["eval", ckpt, "--corruptions", "--baseline-csv", errs], capsys)
        lines = out.splitlines()
        assert code == 0
        assert lines[3] == "kind,mean_error,CE"
        assert [ln.split(",")[0] for ln in lines[4:11]] == list(KINDS)
        assert all(ln.endswith(",1.000") for ln in lines[4:11])
        assert lines[11] == "mCE,,1.000"
        assert lines[12].startswith("mean_corrupted_error,") and lines[12].endswith(",")

    def test_attack_golden(self, run_dir, tmp_path, capsys):
        csv_path = tmp_path / "atk.csv"
        code, out, _ = run(["eval", run_dir / "out" / "checkpoint.p2be", "--attack",
                            "--steps", 2, "--attack-csv", csv_path], capsys)
        lines = out.splitlines()
        assert code == 0
        assert lines[3] == "encoder,epsilon,clean_error_pct,attacked_error_pct,summary"
        fields = lines[4].split(",")
        assert fields[0] == "p2be" and fields[1] == "0.031373"
        assert float(fields[3]) >= float(fields[2])
        rows = csv_path.read_text().splitlines()
        assert rows[0] == "index,clean_correct,adv_correct,relaxed_loss_trace"
        assert len(rows) == 17 and len(rows[1].split(",")[3].split(";")) == 2

    def test_attack_epsilon_zero(self, run_dir, capsys):
        code, out, _ = run(["eval", run_dir / "out" / "checkpoint.p2be", "--attack",
                            "--epsilon", 0], capsys)
        fields = out.splitlines()[4].split(",")
        assert code == 0 and fields[2] == fields[3]

    def test_missing_checkpoint(self, tmp_path, capsys):
        assert run(["eval", tmp_path / "x.p2be"], capsys)[0] == 2

    def test_corrupt_checkpoint_is_runtime_failure(self, run_dir, tmp_path, capsys):
        data = bytearray((run_dir / "out" / "checkpoint.p2be").read_bytes())
        data[20] ^= 1
        bad = tmp_path / "bad.p2be"
        bad.write_bytes(bytes(data))
        code, _, err = run(["eval", bad], capsys)
        assert code == 1 and "checksum" in err


class TestCorrupt:
    def test_prints_parameter(self, ppm, tmp_path, capsys):
        code, out, _ = run(["corrupt", ppm, "contrast", 2, "--out", tmp_path / "o.ppm"], capsys)
        assert code == 0
        assert out.splitlines() == ["kind,severity,parameter", "contrast,2,0.5"]
        assert read_ppm(tmp_path / "o.ppm").shape == (3, 6, 6)

    def test_noise_reproducible(self, ppm, tmp_path, capsys):
        for name in ("a", "b"):
            run(["corrupt", ppm, "gaussian-noise", 3, "--seed", 7, "--out", tmp_path / f"{name}.ppm"],
                capsys)
        assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()

    def test_brightness_ladder(self, tmp_path, capsys):
        src = tmp_path / "flat.ppm"
        write_ppm(src, np.full((3, 4, 4), 60, dtype=np.uint8))
        means = []
        for s in range(1, 6):
            run(["corrupt", src, "brightness", s, "--out", tmp_path / f"{s}.ppm"], capsys)
            means.append(read_ppm(tmp_path / f"{s}.ppm").mean())
        assert all(b > a for a, b in zip(means, means[1:]))

    def test_unknown_kind(self, ppm, tmp_path, capsys):
        code, _, err = run(["corrupt", ppm, "fog", 1, "--out", tmp_path / "o.ppm"], capsys)
        assert code == 2 and "gaussian-noise" in err

    @pytest.mark.parametrize("sev", [0, 6])
    def test_bad_severity(self, ppm, tmp_path, capsys, sev):
        assert run(["corrupt", ppm, "contrast", sev, "--out", tmp_path / "o.ppm"], capsys)[0] == 2

    def test_config_override(self, ppm, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"corruptions": {"contrast": [0.1, 0.2, 0.3, 0.4, 0.5]}}))
        code, out, _ = run(["corrupt", ppm, "contrast", 4, "--config", cfg,
                            "--out", tmp_path / "o.ppm"], capsys)
        assert code == 0 and out.splitlines()[1] == "contrast,4,0.4"


class TestExportSim:
    def test_one_hot_identity(self, tmp_path, capsys):
        code, out, _ = run(["export-sim", "--encoder", "one-hot", "--dim", 256,
                            "--out", tmp_path / "oh"], capsys)
        assert code == 0 and out.splitlines()[0] == "encoder,dim,pgm,csv"
        np.testing.assert_array_equal(read_pgm(tmp_path / "oh.pgm"), 255 * np.eye(256, dtype=np.uint8))

    def test_thermometer_banded(self, tmp_path, capsys):
        run(["export-sim", "--encoder", "thermometer", "--dim", 64, "--out", tmp_path / "t"], capsys)
        img = read_pgm(tmp_path / "t.pgm").astype(int)
        assert np.all(np.diag(img) == 255)
        # similarity to magnitude 0 falls off as the other magnitude grows
        assert np.all(np.diff(img[0]) <= 0)
        rows = (tmp_path / "t_codebook.csv").read_text().splitlines()
        assert rows[0] == "magnitude,code" and len(rows) == 257

    def test_p2be_symmetric(self, tmp_path, capsys):
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            assert run(["export-sim", "--encoder", "p2be", "--dim", 16, "--seed", 3,
                        "--out", tmp_path / "p"], capsys)[0] == 0
        sim = np.loadtxt(tmp_path / "p.csv", delimiter=",")
        assert sim.shape == (256, 256)
        np.testing.assert_array_equal(sim, sim.T)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_from_checkpoint(self, run_dir, tmp_path, capsys):
        code, out, _ = run(["export-sim", run_dir / "out" / "checkpoint.p2be",
                            "--out", tmp_path / "ck"], capsys)
        assert code == 0 and out.splitlines()[1].startswith("p2be,4,")

    def test_rgb_rejected(self, tmp_path, capsys):
        assert run(["export-sim", "--encoder", "rgb", "--out", tmp_path / "r"], capsys)[0] == 2

    def test_dim_range(self, tmp_path, capsys):
        assert run(["export-sim", "--encoder", "one-hot", "--dim", 300,
                    "--out", tmp_path / "r"], capsys)[0] == 2


def test_defaults_round_trip(tmp_path, capsys):
    code, out, _ = run(["defaults"], capsys)
    doc = json.loads(out)
    assert code == 0
    assert doc["train"]["alpha"] == 12.0 and set(doc["corruptions"]) == set(KINDS)
    cfg = tmp_path / "d.json"
    cfg.write_text(out)
    from p2be.config import load_run_config
    assert load_run_config(cfg).train.dim == 64


def test_entry_point_help():
    proc = subprocess.run([sys.executable, "-m", "p2be.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("train", "eval", "corrupt", "export-sim", "defaults"):
        assert cmd in proc.stdout


def test_unknown_subcommand():
    with pytest.raises(SystemExit) as exc:
        main(["fly"])
    assert exc.value.code == 2
