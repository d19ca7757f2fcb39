import json
from pathlib import Path

import numpy as np
import pytest

from ctnodule import cli, heads
from ctnodule.ct_io import CtVolume, write_metaimage_file
from ctnodule.encoder import EncoderConfig, random_encoder_params, save_encoder

CONFIG = EncoderConfig(
    image_size=56, patch_size=14, embed_dim=32, depth=2, num_heads=4, pretrain_grid=4
)


def make_scan(seed, n_pos=6, n_neg=6, nx=72, ny=72, nz=32):
    """Synthetic scan: dark lung background with bright spherical nodules."""
    rng = np.random.default_rng(seed)
    spacing = (0.7, 0.7, 1.25)
    origin = (-25.0, -25.0, -20.0)
    voxels = rng.integers(-900, -700, size=(nz, ny, nx)).astype(np.int16)

    annotations, candidates = [], []
    centers = []
    for _ in range(n_pos):
        cx = int(rng.integers(20, nx - 20))
        cy = int(rng.integers(20, ny - 20))
        cz = int(rng.integers(12, nz - 12))
        centers.append((cx, cy, cz))
        z, y, x = np.ogrid[:nz, :ny, :nx]
        r2 = (
            ((x - cx) * spacing[0]) ** 2
            + ((y - cy) * spacing[1]) ** 2
            + ((z - cz) * spacing[2]) ** 2
        )
        voxels[r2 <= 16.0] = 200  # 8 mm diameter nodule
        world = (
            origin[0] + cx * spacing[0],
            origin[1] + cy * spacing[1],
            origin[2] + cz * spacing[2],
        )
        annotations.append((world, 8.0))
        candidates.append((world, 1))
    for _ in range(n_neg):
        while True:
            cx = int(rng.integers(14, nx - 14))
            cy = int(rng.integers(14, ny - 14))
            cz = int(rng.integers(10, nz - 10))
            # stay > 10 mm from every nodule center (world distance)
            if all(
                ((cx - px) * spacing[0]) ** 2
                + ((cy - py) * spacing[1]) ** 2
                + ((cz - pz) * spacing[2]) ** 2
                > 100.0
                for px, py, pz in centers
            ):
                break
        world = (
            origin[0] + cx * spacing[0],
            origin[1] + cy * spacing[1],
            origin[2] + cz * spacing[2],
        )
        candidates.append((world, 0))
    volume = CtVolume((nx, ny, nz), spacing, origin, np.eye(3), voxels)
    return volume, annotations, candidates


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    scans = root / "scans"
    scans.mkdir()
    ann_rows, cand_rows = [], []
    for i in range(8):
        sid = f"scan{i:02d}"
        volume, annotations, candidates = make_scan(seed=100 + i)
        write_metaimage_file(volume, scans / f"{sid}.mhd")
        for world, diameter in annotations:
            ann_rows.append(f"{sid},{world[0]},{world[1]},{world[2]},{diameter}")
        for world, label in candidates:
            cand_rows.append(f"{sid},{world[0]},{world[1]},{world[2]},{label}")
    (root / "annotations.csv").write_text(
        "seriesuid,coordX,coordY,coordZ,diameter_mm\n" + "\n".join(ann_rows) + "\n"
    )
    (root / "candidates.csv").write_text(
        "seriesuid,coordX,coordY,coordZ,class\n" + "\n".join(cand_rows) + "\n"
    )
    (root / "encoder.nsta").write_bytes(
        save_encoder(CONFIG, random_encoder_params(CONFIG, seed=21))
    )
    return root


def run_pipeline(corpus, out_root, seed=5):
    args_common = dict(corpus=corpus, out=out_root)
    rc = cli.main([
        "preprocess",
        "--scans-dir", str(corpus / "scans"),
        "--annotations", str(corpus / "annotations.csv"),
        "--candidates", str(corpus / "candidates.csv"),
        "--out", str(out_root / "patches"),
        "--window", "24",
        "--image-size", "56",
        "--seed", str(seed),
    ])
    assert rc == 0
    rc = cli.main([
        "featurize",
        "--patches", str(out_root / "patches"),
        "--archive", str(corpus / "encoder.nsta"),
        "--out", str(out_root / "features"),
    ])
    assert rc == 0
    rc = cli.main([
        "train-heads",
        "--features", str(out_root / "features"),
        "--out", str(out_root / "heads"),
        "--lr", "0.01",
        "--epochs", "40",
    ])
    assert rc == 0
    rc = cli.main([
        "train-classifier",
        "--features", str(out_root / "features"),
        "--out", str(out_root / "rf"),
        "--model", "rf",
        "--n-trees", "25",
    ])
    assert rc == 0
    rc = cli.main([
        "evaluate",
        "--features", str(out_root / "features"),
        "--model", str(out_root / "heads"),
        "--out", str(out_root / "eval_heads"),
    ])
    assert rc == 0
    rc = cli.main([
        "evaluate",
        "--features", str(out_root / "features"),
        "--model", str(out_root / "rf"),
        "--out", str(out_root / "eval_rf"),
    ])
    assert rc == 0


@pytest.fixture(scope="module")
def pipeline_run(corpus, tmp_path_factory):
    out_root = tmp_path_factory.mktemp("run1")
    run_pipeline(corpus, out_root)
    return out_root


class TestPreprocess:
    def test_outputs(self, pipeline_run):
        patches = pipeline_run / "patches"
        for part in ("train", "val", "test"):
            assert (patches / f"patches_{part}.bin").exists()
            assert (patches / f"patches_{part}.csv").exists()
        split = json.loads((patches / "split.json").read_text())
        assert len(split["train"]) == 6
        assert len(split["val"]) == 1 and len(split["test"]) == 1
        n_rows = sum(
            len((patches / f"patches_{p}.csv").read_text().splitlines()) - 1
            for p in ("train", "val", "test")
        )
        assert n_rows == 8 * 12  # 6 positives + 6 sampled negatives per scan

    def test_empty_candidates_is_data_error(self, corpus, tmp_path):
        empty = tmp_path / "empty.csv"
        empty.write_text("seriesuid,coordX,coordY,coordZ,class\n")
        rc = cli.main([
            "preprocess",
            "--scans-dir", str(corpus / "scans"),
            "--annotations", str(corpus / "annotations.csv"),
            "--candidates", str(empty),
            "--out", str(tmp_path / "out"),
        ])
        assert rc == 2

    def test_usage_error(self):
        assert cli.main(["preprocess"]) == 1


class TestFeaturize:
    def test_shapes(self, pipeline_run):
        features = pipeline_run / "features"
        n_train = len(
            (pipeline_run / "patches" / "patches_train.csv").read_text().splitlines()
        ) - 1
        blob = (features / "features_train_cls.bin").read_bytes()
        assert len(blob) == n_train * 32 * 4
        gap = (features / "features_train_gap.bin").read_bytes()
        assert len(gap) == len(blob)

    def test_corrupt_archive_magic(self, corpus, pipeline_run, tmp_path):
        bad = tmp_path / "bad.nsta"
        data = bytearray((corpus / "encoder.nsta").read_bytes())
        data[:4] = b"XXXX"
        bad.write_bytes(bytes(data))
        rc = cli.main([
            "featurize",
            "--patches", str(pipeline_run / "patches"),
            "--archive", str(bad),
            "--out", str(tmp_path / "f"),
        ])
        assert rc == 2


class TestTrainingAndEvaluate:
    def test_heads_artifacts(self, pipeline_run):
        assert (pipeline_run / "heads" / "heads.nsta").exists()
        history = (pipeline_run / "heads" / "history.csv").read_text().splitlines()
        assert history[0] == "epoch,train_loss,val_loss,val_acc"
        assert len(history) == 41

    def test_metrics_reasonable(self, pipeline_run):
        doc = json.loads((pipeline_run / "eval_heads" / "metrics.json").read_text())
        assert 0.0 <= doc["accuracy"] <= 1.0
        assert doc["accuracy"] >= 0.9  # blobs vs noise is easy
        assert (pipeline_run / "eval_heads" / "roc.csv").exists()
        assert (pipeline_run / "eval_heads" / "roc.svg").read_text().startswith("<svg")

    def test_rf_metrics(self, pipeline_run):
        doc = json.loads((pipeline_run / "eval_rf" / "metrics.json").read_text())
        assert doc["accuracy"] >= 0.9

    def test_mismatched_config_hash(self, corpus, pipeline_run, tmp_path_factory):
        # features produced under a different seed don't match the model
        other = tmp_path_factory.mktemp("other")
        rc = cli.main([
            "preprocess",
            "--scans-dir", str(corpus / "scans"),
            "--annotations", str(corpus / "annotations.csv"),
            "--candidates", str(corpus / "candidates.csv"),
            "--out", str(other / "patches"),
            "--window", "24",
            "--image-size", "56",
            "--seed", "99",
        ])
        assert rc == 0
        rc = cli.main([
            "featurize",
            "--patches", str(other / "patches"),
            "--archive", str(corpus / "encoder.nsta"),
            "--out", str(other / "features"),
        ])
        assert rc == 0
        rc = cli.main([
            "evaluate",
            "--features", str(other / "features"),
            "--model", str(pipeline_run / "heads"),
            "--out", str(other / "eval"),
        ])
        assert rc == 2


class TestDeterminism:
    def test_byte_identical_metrics(self, corpus, tmp_path_factory):
        out_a = tmp_path_factory.mktemp("det_a")
        out_b = tmp_path_factory.mktemp("det_b")
        run_pipeline(corpus, out_a, seed=7)
        run_pipeline(corpus, out_b, seed=7)
        for sub in ("eval_heads", "eval_rf"):
            a = (out_a / sub / "metrics.json").read_bytes()
            b = (out_b / sub / "metrics.json").read_bytes()
            assert a == b
        assert (out_a / "patches" / "patches_train.csv").read_bytes() == (
            out_b / "patches" / "patches_train.csv"
        ).read_bytes()


class TestPredict:
    def test_zero_heads_centered_half_box(self, corpus, tmp_path):
        heads_path = tmp_path / "heads.nsta"
        cls_head = heads.ClassifierHead(np.zeros((2, 32)), np.zeros(2))
        det_head = heads.DetectionHead(np.zeros((4, 32)), np.zeros(4))
        heads_path.write_bytes(
            heads.save_heads(cls_head, det_head, heads.TrainConfig(), heads.SceConfig())
        )
        scan = sorted((corpus / "scans").glob("*.mhd"))[0]
        overlay = tmp_path / "overlay.svg"
        rc = cli.main([
            "predict",
            "--scan", str(scan),
            "--center", "0", "0", "0",
            "--archive", str(corpus / "encoder.nsta"),
            "--heads", str(heads_path),
            "--window", "24",
            "--overlay", str(overlay),
        ])
        assert rc == 0
        svg = overlay.read_text()
        # logistic(0) = 0.5 every component: centered box of half the image
        assert 'x="14.0"' in svg and 'width="28.0"' in svg

    def test_prints_summary(self, corpus, tmp_path, capsys):
        heads_path = tmp_path / "heads.nsta"
        heads_path.write_bytes(
            heads.save_heads(
                heads.ClassifierHead(np.zeros((2, 32)), np.zeros(2)),
                None,
                heads.TrainConfig(),
                heads.SceConfig(),
            )
        )
        scan = sorted((corpus / "scans").glob("*.mhd"))[0]
        rc = cli.main([
            "predict",
            "--scan", str(scan),
            "--center", "0", "0", "0",
            "--archive", str(corpus / "encoder.nsta"),
            "--heads", str(heads_path),
            "--window", "24",
        ])
        assert rc == 0
        out = capsys.readouterr().out
        assert "label=" in out and "prob=0.500000" in out


class TestArchiveInspect:
    def test_lists_tensors(self, corpus, capsys):
        rc = cli.main(["archive-inspect", "--archive", str(corpus / "encoder.nsta")])
        assert rc == 0
        out = capsys.readouterr().out
        assert "cls_token" in out and '"embed_dim": 32' in out
