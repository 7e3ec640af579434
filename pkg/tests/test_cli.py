import csv
import json

import numpy as np
import pytest

from curvesig.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from curvesig.datasets import CurveDataset, load_collections, load_curves, save_curves
from curvesig.geometry import PlanarCurve
from conftest import circle_points

TINY_TRAIN = ["--epochs", "2", "--steps", "5", "--half-width", "4", "--batch", "8", "--negatives", "2",
              "--width", "8", "--layers", "1", "--blocks", "2"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(d / "train.json"), "--curves", "6", "--samples", "96", "--seed", "1"]) == 0
    assert main(["gen-data", "--out", str(d / "val.json"), "--curves", "2", "--samples", "96", "--seed", "2",
                 "--split", "validation"]) == 0
    assert main(["gen-data", "--out", str(d / "cols.json"), "--collections", "2", "--members", "3",
                 "--samples", "96", "--seed", "3"]) == 0
    return d


class TestGenData:
    def test_files_load_back(self, workdir):
        assert len(load_curves(workdir / "train.json")) == 6
        assert load_curves(workdir / "val.json").split == "validation"
        assert [len(c) for c in load_collections(workdir / "cols.json")] == [3, 3]

    def test_rerun_identical(self, workdir, tmp_path):
        main(["gen-data", "--out", str(tmp_path / "again.json"), "--curves", "6", "--samples", "96", "--seed", "1"])
        assert (tmp_path / "again.json").read_bytes() == (workdir / "train.json").read_bytes()

    def test_zero_curves_rejected(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path / "x.json"), "--curves", "0"]) == EXIT_USAGE
        assert not (tmp_path / "x.json").exists()

    def test_manifest(self, workdir):
        doc = json.loads((workdir / "train.json.manifest.json").read_text())
        assert doc["command"] == "gen-data" and doc["seed"] == 1
        assert doc["outputs"] == [str(workdir / "train.json")]
        assert {"python", "numpy"} <= set(doc["versions"]) and "seconds" in doc["wall_clock"]


class TestTrain:
    def test_smoke_and_determinism(self, workdir, tmp_path):
        args = ["train", "--train", str(workdir / "train.json"), "--val", str(workdir / "val.json"), *TINY_TRAIN]
        assert main(args + ["--out-ckpt", str(tmp_path / "a.json")]) == EXIT_OK
        assert main(args + ["--out-ckpt", str(tmp_path / "b.json")]) == EXIT_OK
        rows = read_csv(tmp_path / "a.json.metrics.csv")
        assert rows[0] == ["epoch", "train_loss", "val_loss", "val_invariance", "val_orthogonality"]
        assert len(rows) == 1 + 3
        assert (tmp_path / "a.json.metrics.csv").read_bytes() == (tmp_path / "b.json.metrics.csv").read_bytes()

    def test_missing_dataset(self, workdir, tmp_path, capsys):
        code = main(["train", "--train", str(tmp_path / "missing.json"), "--val", str(workdir / "val.json"),
                     "--out-ckpt", str(tmp_path / "c.json")])
        assert code == EXIT_DATA
        assert "missing.json" in capsys.readouterr().err


class TestSignature:
    def test_circle_constant_kappa(self, tmp_path):
        save_curves(CurveDataset([PlanarCurve(circle_points(64, 2.0))]), tmp_path / "circle.json")
        out = tmp_path / "sig.csv"
        assert main(["signature", "--axiomatic", "euclidean", "--curve", str(tmp_path / "circle.json"),
                     "--out", str(out)]) == EXIT_OK
        rows = read_csv(out)
        assert rows[0] == ["index", "x", "y", "kappa", "kappa_s", "valid"]
        assert len(rows) == 1 + 64
        np.testing.assert_allclose([float(r[3]) for r in rows[1:]], 0.5, rtol=1e-3)
        assert all(r[5] == "1" for r in rows[1:])

    def test_invalid_points_flagged(self, tmp_path):
        # a straight run makes the five-point conics degenerate there
        pts = circle_points(64)
        pts[10:20] = np.linspace(pts[10], pts[19], 10)
        save_curves(CurveDataset([PlanarCurve(pts)]), tmp_path / "flat.json")
        out = tmp_path / "sig.csv"
        assert main(["signature", "--axiomatic", "equiaffine", "--curve", str(tmp_path / "flat.json"),
                     "--out", str(out)]) == EXIT_OK
        flags = [r[5] for r in read_csv(out)[1:]]
        assert "0" in flags and "1" in flags

    def test_with_checkpoint(self, workdir, tmp_path):
        ck = tmp_path / "m.json"
        main(["train", "--train", str(workdir / "train.json"), "--val", str(workdir / "val.json"),
              "--out-ckpt", str(ck), *TINY_TRAIN])
        out = tmp_path / "sig.csv"
        assert main(["signature", "--ckpt", str(ck), "--curve", str(workdir / "val.json"), "--index", "1",
                     "--out", str(out)]) == EXIT_OK
        assert len(read_csv(out)) == 1 + 96

    def test_bad_index(self, workdir, tmp_path):
        assert main(["signature", "--axiomatic", "euclidean", "--curve", str(workdir / "val.json"),
                     "--index", "7", "--out", str(tmp_path / "s.csv")]) == EXIT_USAGE


class TestBenchmark:
    def test_identity_and_grid(self, workdir, tmp_path, capsys):
        out = tmp_path / "b.csv"
        code = main(["benchmark", "--collections", str(workdir / "cols.json"), "--estimator", "euclidean",
                     "--flavors", "1,1;2,2", "--rates", "1,0.7,0.5", "--out", str(out)])
        assert code == EXIT_OK
        rows = read_csv(out)[1:]
        assert len(rows) == 2 * 2 * 3
        assert all(float(r[4]) == 1.0 for r in rows if r[1:4] == ["1.0", "1.0", "1.0"])
        assert "Sampling rate" in capsys.readouterr().out

    def test_deterministic_and_thread_independent(self, workdir, tmp_path):
        base = ["benchmark", "--collections", str(workdir / "cols.json"), "--estimator", "euclidean",
                "--flavors", "2,2", "--rates", "0.8", "--seed", "4"]
        main(base + ["--out", str(tmp_path / "a.csv")])
        main(base + ["--out", str(tmp_path / "b.csv"), "--threads", "2"])
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_bad_flavor(self, workdir, tmp_path):
        assert main(["benchmark", "--collections", str(workdir / "cols.json"), "--estimator", "euclidean",
                     "--flavors", "2", "--out", str(tmp_path / "b.csv")]) == EXIT_USAGE

    def test_unknown_estimator(self, workdir, tmp_path):
        assert main(["benchmark", "--collections", str(workdir / "cols.json"), "--estimator", "projective",
                     "--out", str(tmp_path / "b.csv")]) == EXIT_DATA


class TestPearson:
    def test_rows_and_reproducible(self, tmp_path):
        args = ["pearson", "--counts", "2,50,200", "--num-curves", "4", "--samples", "128", "--seed", "3"]
        assert main(args + ["--out", str(tmp_path / "a.csv")]) == EXIT_OK
        main(args + ["--out", str(tmp_path / "b.csv")])
        rows = read_csv(tmp_path / "a.csv")
        assert rows[0] == ["M", "abs_rho"] and len(rows) == 4
        assert float(rows[1][1]) == pytest.approx(1.0, abs=1e-12)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_counts_validated(self, tmp_path):
        assert main(["pearson", "--counts", "1", "--out", str(tmp_path / "p.csv")]) == EXIT_USAGE


def test_usage_errors(capsys):
    assert main([]) == EXIT_USAGE
    assert main(["bogus"]) == EXIT_USAGE
    assert main(["pearson", "--out", "x.csv", "--threads", "0"]) == EXIT_USAGE


def test_threads_env(monkeypatch):
    from curvesig.cli import build_parser
    monkeypatch.setenv("CURVESIG_THREADS", "3")
    assert build_parser().parse_args(["pearson", "--out", "p.csv"]).threads == 3
