import json

import numpy as np
import pytest

from mate import dataio
from mate.errors import DataError, IngestError, MMTSFormatError


class TestMMTSRoundTrip:
    def test_write_read_identity(self, tmp_path):
        rng = np.random.default_rng(0)
        arr = rng.standard_normal((5, 7, 3)).astype(np.float32)
        path = tmp_path / "a.mmts"
        dataio.write_mmts(arr, path)
        back = dataio.read_mmts(path)
        assert back.dtype == np.float32
        np.testing.assert_array_equal(back, arr)

    def test_round_trip_random_shapes(self, tmp_path):
        rng = np.random.default_rng(1)
        for trial in range(10):
            shape = tuple(rng.integers(1, 9, size=3))
            arr = rng.standard_normal(shape).astype(np.float32)
            path = tmp_path / f"t{trial}.mmts"
            dataio.write_mmts(arr, path)
            np.testing.assert_array_equal(dataio.read_mmts(path), arr)

    def test_minimal_file_is_24_bytes(self, tmp_path):
        path = tmp_path / "one.mmts"
        dataio.write_mmts(np.zeros((1, 1, 1), dtype=np.float32), path)
        assert path.stat().st_size == 24

    def test_header_magic_bytes(self, tmp_path):
        path = tmp_path / "m.mmts"
        dataio.write_mmts(np.zeros((1, 1, 1), dtype=np.float32), path)
        assert path.read_bytes()[:4] == bytes([0x4D, 0x4D, 0x54, 0x53])

    def test_nonfinite_rejected(self, tmp_path):
        arr = np.full((1, 1, 1), np.nan, dtype=np.float32)
        with pytest.raises(DataError):
            dataio.write_mmts(arr, tmp_path / "bad.mmts")


class TestMMTSFormatErrors:
    def _valid_bytes(self, tmp_path):
        path = tmp_path / "v.mmts"
        dataio.write_mmts(np.zeros((2, 3, 1), dtype=np.float32), path)
        return bytearray(path.read_bytes()), path

    def test_bad_magic_names_field(self, tmp_path):
        raw, path = self._valid_bytes(tmp_path)
        raw[:4] = b"MMTX"
        path.write_bytes(raw)
        with pytest.raises(MMTSFormatError, match="magic"):
            dataio.read_mmts(path)

    def test_bad_version(self, tmp_path):
        raw, path = self._valid_bytes(tmp_path)
        raw[4] = 9
        path.write_bytes(raw)
        with pytest.raises(MMTSFormatError, match="version"):
            dataio.read_mmts(path)

    def test_bad_dtype(self, tmp_path):
        raw, path = self._valid_bytes(tmp_path)
        raw[5] = 7
        path.write_bytes(raw)
        with pytest.raises(MMTSFormatError, match="dtype"):
            dataio.read_mmts(path)

    def test_nonzero_reserved(self, tmp_path):
        raw, path = self._valid_bytes(tmp_path)
        raw[6] = 1
        path.write_bytes(raw)
        with pytest.raises(MMTSFormatError, match="reserved"):
            dataio.read_mmts(path)

    def test_truncated_payload_reports_byte_counts(self, tmp_path):
        raw, path = self._valid_bytes(tmp_path)
        path.write_bytes(raw[:-4])  # one float short
        with pytest.raises(MMTSFormatError, match=r"20 bytes.*24|payload is 20"):
            dataio.read_mmts(path)


class TestWindowing:
    def test_exact_halves(self):
        series = np.arange(256 * 2, dtype=np.float64).reshape(256, 2)
        windows = dataio.window_raw_series(series, 128, 128)
        assert windows.shape == (2, 128, 2)
        np.testing.assert_array_equal(windows[0], series[:128])
        np.testing.assert_array_equal(windows[1], series[128:])

    def test_single_window(self):
        series = np.ones((16, 3))
        windows = dataio.window_raw_series(series, 16, 1)
        assert windows.shape == (1, 16, 3)

    def test_matches_slicing_oracle(self):
        rng = np.random.default_rng(3)
        series = rng.standard_normal((101, 4))
        t, stride = 17, 5
        windows = dataio.window_raw_series(series, t, stride)
        expected_n = (101 - t) // stride + 1
        assert windows.shape == (expected_n, t, 4)
        for i in range(expected_n):
            np.testing.assert_array_equal(windows[i], series[i * stride : i * stride + t])

    def test_window_too_long(self):
        with pytest.raises(DataError):
            dataio.window_raw_series(np.zeros((4, 1)), 5, 1)


def _write_small_dataset(tmp_path, n=6, t=8, channels=(3, 2), num_classes=2):
    rng = np.random.default_rng(7)
    entries = []
    for m, c in enumerate(channels):
        arr = rng.standard_normal((n, t, c)).astype(np.float32)
        fname = f"mod{m}.mmts"
        dataio.write_mmts(arr, tmp_path / fname)
        entries.append({"name": f"mod{m}", "file": fname})
    labels = rng.integers(0, num_classes, size=n)
    (tmp_path / "labels.txt").write_text("\n".join(map(str, labels)) + "\n")
    manifest = dataio.DatasetManifest(
        name="tiny",
        modalities=entries,
        labels_file="labels.txt",
        num_classes=num_classes,
        window_length=t,
        root=tmp_path,
    )
    path = tmp_path / "manifest.json"
    dataio.write_manifest(manifest, path)
    return path, labels


class TestManifest:
    def test_load_round_trip(self, tmp_path):
        path, labels = _write_small_dataset(tmp_path)
        ds = dataio.load_dataset(path)
        assert ds.num_windows == 6
        assert ds.obs_dims == (3, 2)
        np.testing.assert_array_equal(ds.labels, labels)

    def test_missing_file_rejected(self, tmp_path):
        path, _ = _write_small_dataset(tmp_path)
        (tmp_path / "mod0.mmts").unlink()
        with pytest.raises(DataError, match="missing"):
            dataio.read_manifest(path)

    def test_mismatched_window_count_rejected(self, tmp_path):
        path, _ = _write_small_dataset(tmp_path)
        dataio.write_mmts(np.zeros((5, 8, 3), dtype=np.float32), tmp_path / "mod0.mmts")
        with pytest.raises(DataError, match="N"):
            dataio.load_dataset(path)

    def test_normalization_applied(self, tmp_path):
        path, _ = _write_small_dataset(tmp_path, channels=(2,))
        doc = json.loads(path.read_text())
        doc["normalization"] = {"mod0": {"mean": [1.0, 2.0], "std": [2.0, 4.0]}}
        path.write_text(json.dumps(doc))
        raw = dataio.load_dataset(path, normalize=False)
        norm = dataio.load_dataset(path, normalize=True)
        np.testing.assert_allclose(
            norm.modalities[0],
            (raw.modalities[0] - np.array([1.0, 2.0], dtype=np.float32))
            / np.array([2.0, 4.0], dtype=np.float32),
            rtol=1e-6,
        )


def _fake_ucihar(tmp_path, n_train=12, n_test=5):
    rng = np.random.default_rng(11)
    for split, count in (("train", n_train), ("test", n_test)):
        sig_dir = tmp_path / split / "Inertial Signals"
        sig_dir.mkdir(parents=True)
        for prefix in ("body_acc", "total_acc", "body_gyro"):
            for axis in "xyz":
                data = rng.standard_normal((count, 128))
                np.savetxt(sig_dir / f"{prefix}_{axis}_{split}.txt", data, fmt="%.6e")
        labels = rng.integers(1, 7, size=count)
        np.savetxt(tmp_path / split / f"y_{split}.txt", labels, fmt="%d")
    return tmp_path


class TestIngestUcihar:
    def test_layout_and_classes(self, tmp_path):
        raw = _fake_ucihar(tmp_path / "raw")
        out = tmp_path / "out"
        manifests = dataio.ingest_ucihar(raw, out)
        train = dataio.load_dataset(manifests["train"], normalize=False)
        assert train.window_length == 128
        assert train.num_classes == 6
        assert train.obs_dims == (3, 3, 3)
        assert set(train.modality_names) == {"body_acc", "total_acc", "gyro"}
        assert train.labels.min() >= 0 and train.labels.max() <= 5

    def test_label_histogram_matches_raw_counts(self, tmp_path):
        raw = _fake_ucihar(tmp_path / "raw")
        out = tmp_path / "out"
        manifests = dataio.ingest_ucihar(raw, out)
        train = dataio.load_dataset(manifests["train"], normalize=False)
        # independent oracle: count lines per label value in the raw file
        raw_lines = (raw / "train" / "y_train.txt").read_text().split()
        for c in range(6):
            expected = sum(1 for v in raw_lines if int(v) == c + 1)
            assert int(np.sum(train.labels == c)) == expected

    def test_idempotent_byte_identical(self, tmp_path):
        raw = _fake_ucihar(tmp_path / "raw")
        out = tmp_path / "out"
        dataio.ingest_ucihar(raw, out)
        first = {p.name: p.read_bytes() for p in out.iterdir()}
        dataio.ingest_ucihar(raw, out)
        second = {p.name: p.read_bytes() for p in out.iterdir()}
        assert first == second

    def test_missing_files_listed(self, tmp_path):
        raw = _fake_ucihar(tmp_path / "raw")
        victim = raw / "train" / "Inertial Signals" / "body_acc_x_train.txt"
        victim.unlink()
        with pytest.raises(IngestError, match="body_acc_x_train"):
            dataio.ingest_ucihar(raw, tmp_path / "out")

    def test_train_stats_stored_in_both_manifests(self, tmp_path):
        raw = _fake_ucihar(tmp_path / "raw")
        out = tmp_path / "out"
        manifests = dataio.ingest_ucihar(raw, out)
        train_doc = json.loads(manifests["train"].read_text())
        test_doc = json.loads(manifests["test"].read_text())
        assert train_doc["normalization"] == test_doc["normalization"]
        assert set(train_doc["normalization"]) == {"body_acc", "total_acc", "gyro"}
