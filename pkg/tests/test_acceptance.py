"""Acceptance criteria A1-A9, one PASS/FAIL line per criterion."""

import contextlib
import csv
import os
import subprocess
import sys
import time

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler

from aspcnet import dataio, selftest
from aspcnet.checkpoint import load_checkpoint, save_checkpoint
from aspcnet.cli import main, predict_positions
from aspcnet.metrics import ConfusionMatrix
from aspcnet.tensor import Tensor, no_grad

A5_TRAIN = ["--pca-dims", "8", "--width-scale", "0.25", "--patch", "15", "--dilation", "2", "--epochs", "30",
            "--batch", "32", "--threads", "1", "--seed", "0"]


@contextlib.contextmanager
def criterion(capsys, code, title):
    t0, ok = time.perf_counter(), False
    try:
        yield
        ok = True
    finally:
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {code} {title} [{time.perf_counter() - t0:.1f}s]")


def assert_selftest_criterion(code, budget=None):
    ok, results, secs = selftest.run_criterion(code)
    failed = [r.line() for r in results if not r.passed]
    assert ok, "\n".join(failed)
    if budget is not None:
        assert secs < budget, f"{code} took {secs:.1f}s (budget {budget}s)"


class TestAcceptance:
    def test_a1_operator_equivalence(self, capsys):
        with criterion(capsys, "A1", "ASP = dilated, dilated(1) = conv, deformable(0) = conv"):
            assert_selftest_criterion("A1", budget=30)

    def test_a2_gradients(self, capsys):
        with criterion(capsys, "A2", "finite-difference gradient suite"):
            assert_selftest_criterion("A2", budget=120)

    def test_a3_routing(self, capsys):
        with criterion(capsys, "A3", "routing invariants over 1000 instances"):
            assert_selftest_criterion("A3")

    def test_a4_shapes(self, capsys):
        with criterion(capsys, "A4", "layer shape trace for T in {9, 15, 16}"):
            assert_selftest_criterion("A4")

    @pytest.mark.slow
    def test_a5_synthetic_learning(self, capsys, tmp_path):
        with criterion(capsys, "A5", "synthetic scene: test OA >= 95%, kappa >= 0.93, < 10 min"):
            scene = tmp_path / "scene"
            assert main(["synth", "--out", str(scene), "--seed", "0"]) == 0
            assert main(["split", "--labels", str(scene / "labels.gt"), "--per-class", "40", "--seed", "0",
                         "--out", str(tmp_path / "split.txt")]) == 0
            cube = dataio.load_cube(scene / "cube.hsi")
            labels = dataio.load_labels(scene / "labels.gt")
            split = dataio.load_split(tmp_path / "split.txt", labels)
            assert split.n_train == 160

            # the threshold is only meaningful if the task is spectrally separable
            spectra = cube.channels_last()
            xtr = spectra[split.train[:, 0], split.train[:, 1]]
            xte = spectra[split.test[:, 0], split.test[:, 1]]
            ytr = labels.labels[split.train[:, 0], split.train[:, 1]]
            yte = labels.labels[split.test[:, 0], split.test[:, 1]]
            scaler = StandardScaler().fit(xtr)
            baseline = LogisticRegression(max_iter=2000).fit(scaler.transform(xtr), ytr)
            assert baseline.score(scaler.transform(xte), yte) >= 0.90

            t0 = time.perf_counter()
            data = ["--cube", str(scene / "cube.hsi"), "--labels", str(scene / "labels.gt"),
                    "--split", str(tmp_path / "split.txt")]
            assert main(["train", *data, *A5_TRAIN, "--out", str(tmp_path / "run")]) == 0
            with open(tmp_path / "run" / "train_log.csv", newline="") as fh:
                rows = list(csv.DictReader(fh))
            assert len(rows) == 30 and float(rows[-1]["train_oa"]) >= 0.99

            net = load_checkpoint(tmp_path / "run" / "final.ckpt")
            image = dataio.apply_pca(net.checkpoint.pca(), cube).channels_last()
            pred = predict_positions(net, image, split.test)
            cm = ConfusionMatrix(labels.classes).accumulate(yte - 1, pred)
            elapsed = time.perf_counter() - t0
            with capsys.disabled():
                print(f"\n  A5 measured: OA {cm.oa():.4f} kappa {cm.kappa():.4f} "
                      f"train+eval {elapsed:.0f}s")
            assert cm.oa() >= 0.95
            assert cm.kappa() >= 0.93
            assert elapsed < 600

    def test_a6_formulas(self, capsys):
        with criterion(capsys, "A6", "dilated extents, margin bounds, kappa of a degenerate matrix"):
            assert_selftest_criterion("A6")

    def test_a7_oracles(self, capsys):
        with criterion(capsys, "A7", "bilinear, kappa and digital-caps oracles"):
            assert_selftest_criterion("A7")

    def test_a8_determinism_and_persistence(self, capsys, tmp_path):
        with criterion(capsys, "A8", "byte-identical reruns, bit-exact checkpoint round trip"):
            scene = tmp_path / "scene"
            assert main(["synth", "--out", str(scene), "--seed", "5"]) == 0
            assert main(["split", "--labels", str(scene / "labels.gt"), "--per-class", "8", "--seed", "5",
                         "--out", str(tmp_path / "split.txt")]) == 0
            data = ["--cube", str(scene / "cube.hsi"), "--labels", str(scene / "labels.gt"),
                    "--split", str(tmp_path / "split.txt")]
            tiny = ["--pca-dims", "4", "--width-scale", "0.125", "--patch", "9", "--epochs", "2", "--batch", "8",
                    "--seed", "5", "--deterministic"]
            for name in ("a", "b"):
                assert main(["train", *data, *tiny, "--out", str(tmp_path / name)]) == 0
            for name in ("train_log.csv", "best.ckpt", "final.ckpt"):
                assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name

            net = load_checkpoint(tmp_path / "a" / "final.ckpt")
            save_checkpoint(net, tmp_path / "copy.ckpt", pca=net.checkpoint.pca())
            copy = load_checkpoint(tmp_path / "copy.ckpt")
            x = np.random.default_rng(5).normal(size=(6, 9, 9, 4)).astype(np.float32)
            with no_grad():
                np.testing.assert_array_equal(copy.forward(Tensor(x)).data, net.forward(Tensor(x)).data)

    def test_a9_selftest_command(self, capsys):
        with criterion(capsys, "A9", "aspcnet selftest exits 0 in under 3 minutes"):
            env = dict(os.environ, PYTHONPATH=os.pathsep.join(filter(None, [
                os.path.join(os.path.dirname(__file__), "..", "src"), os.environ.get("PYTHONPATH")])))
            t0 = time.perf_counter()
            proc = subprocess.run([sys.executable, "-m", "aspcnet.cli", "selftest"], capture_output=True,
                                  text=True, env=env, timeout=600)
            elapsed = time.perf_counter() - t0
            assert proc.returncode == 0, proc.stdout[-2000:] + proc.stderr[-2000:]
            assert "selftest passed" in proc.stdout
            assert elapsed < 180, f"selftest took {elapsed:.0f}s"
