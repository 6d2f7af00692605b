"""Dataset file formats, manifests, windowing, and the UCIHAR ingestion recipe.

File formats owned by this module:

MMTS binary tensor (one windowed array per file)
    offset  size  field
    0       4     magic, ASCII "MMTS"
    4       1     version, 0x01
    5       1     dtype code, 0x01 = IEEE-754 float32 little-endian
    6       2     reserved, must be zero
    8       12    N, T, C as three uint32 little-endian
    20      -     payload: N*T*C float32 values, row-major (window, time, channel)

Dataset manifest (JSON)
    name            dataset name
    modalities      array of {"name": str, "file": str}, files relative to the manifest
    labels_file     newline-delimited integers, one per window (N lines)
    num_classes     integer
    window_length   T, must match every modality file
    latents         optional {"latent_c": file, "latent_s_<m>": file} ground-truth arrays
    normalization   optional per-modality {"mean": [C], "std": [C]} z-score statistics,
                    computed on the training split only

Checkpoint archive (written by the trainer, documented here)
    A NumPy .npz archive with entries:
        config/json            uint8 bytes of the ExperimentConfig JSON
        model/<param name>     one array per model weight
        optim/<param name>/exp_avg, .../exp_avg_sq, .../step   AdamW state
        rng/torch              uint8 torch generator state
        rng/numpy              uint8 bytes of the JSON-encoded numpy bit-generator state
        meta/global_step, meta/epoch    int64 scalars
    Weight arrays round-trip bit-exactly.
"""

from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
import numpy as np

from .errors import DataError, IngestError, MMTSFormatError

MMTS_MAGIC = b"MMTS"
MMTS_VERSION = 1
MMTS_DTYPE_F32 = 1
_HEADER = struct.Struct("<4sBBHIII")  # magic, version, dtype, reserved, N, T, C


def write_mmts(array: np.ndarray, path: str | Path) -> None:
    """Write a [N, T, C] array as an MMTS file (values cast to float32)."""
    arr = np.asarray(array)
    if arr.ndim != 3:
        raise DataError(f"MMTS arrays are 3-D [N, T, C], got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError("MMTS payload must be finite")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    n, t, c = arr.shape
    header = _HEADER.pack(MMTS_MAGIC, MMTS_VERSION, MMTS_DTYPE_F32, 0, n, t, c)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def read_mmts(path: str | Path) -> np.ndarray:
    """Read an MMTS file back into a float32 [N, T, C] array."""
    with open(path, "rb") as fh:
        raw_header = fh.read(_HEADER.size)
        if len(raw_header) < _HEADER.size:
            raise MMTSFormatError(
                f"{path}: truncated header, expected {_HEADER.size} bytes, got {len(raw_header)}"
            )
        magic, version, dtype_code, reserved, n, t, c = _HEADER.unpack(raw_header)
        if magic != MMTS_MAGIC:
            raise MMTSFormatError(f"{path}: bad magic {magic!r}, expected {MMTS_MAGIC!r}")
        if version != MMTS_VERSION:
            raise MMTSFormatError(f"{path}: unsupported version {version}, expected {MMTS_VERSION}")
        if dtype_code != MMTS_DTYPE_F32:
            raise MMTSFormatError(f"{path}: unknown dtype code {dtype_code}, expected {MMTS_DTYPE_F32}")
        if reserved != 0:
            raise MMTSFormatError(f"{path}: reserved bytes must be zero, got {reserved:#06x}")
        expected = n * t * c * 4
        payload = fh.read()
    if len(payload) != expected:
        raise MMTSFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected} for shape ({n}, {t}, {c})"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(n, t, c).copy()


def window_raw_series(series: np.ndarray, window_length: int, stride: int) -> np.ndarray:
    """Cut a continuous [L, C] series into [N, T, C] non-padded windows.

    N = floor((L - T) / stride) + 1; trailing samples that do not fill a
    window are dropped.
    """
    series = np.asarray(series)
    if series.ndim != 2:
        raise DataError(f"expected a [L, C] series, got shape {series.shape}")
    if window_length < 1 or stride < 1:
        raise DataError("window_length and stride must be positive")
    total = series.shape[0]
    if window_length > total:
        raise DataError(f"window_length {window_length} exceeds series length {total}")
    count = (total - window_length) // stride + 1
    starts = np.arange(count) * stride
    return np.stack([series[s : s + window_length] for s in starts])


@dataclass
class DatasetManifest:
    """Parsed manifest plus the directory its relative paths resolve against."""

    name: str
    modalities: list[dict]
    labels_file: str
    num_classes: int
    window_length: int
    latents: dict = field(default_factory=dict)
    normalization: dict = field(default_factory=dict)
    root: Path = field(default_factory=Path)

    def to_json_dict(self) -> dict:
        doc = {
            "name": self.name,
            "modalities": self.modalities,
            "labels_file": self.labels_file,
            "num_classes": self.num_classes,
            "window_length": self.window_length,
        }
        if self.latents:
            doc["latents"] = self.latents
        if self.normalization:
            doc["normalization"] = self.normalization
        return doc


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(manifest.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    required = {"name", "modalities", "labels_file", "num_classes", "window_length"}
    missing = required - doc.keys()
    if missing:
        raise DataError(f"{path}: manifest missing keys {sorted(missing)}")
    manifest = DatasetManifest(
        name=doc["name"],
        modalities=doc["modalities"],
        labels_file=doc["labels_file"],
        num_classes=int(doc["num_classes"]),
        window_length=int(doc["window_length"]),
        latents=doc.get("latents", {}),
        normalization=doc.get("normalization", {}),
        root=path.parent,
    )
    _validate_manifest_files(manifest)
    return manifest


def _validate_manifest_files(manifest: DatasetManifest) -> None:
    referenced = [m["file"] for m in manifest.modalities]
    referenced.append(manifest.labels_file)
    referenced.extend(manifest.latents.values())
    absent = [f for f in referenced if not (manifest.root / f).exists()]
    if absent:
        raise DataError(f"manifest references missing files: {absent}")


@dataclass
class MultiModalDataset:
    """In-memory windowed multi-modal dataset with optional ground-truth latents."""

    name: str
    modality_names: list[str]
    modalities: list[np.ndarray]  # each [N, T, C_m]
    labels: np.ndarray  # [N] int64
    num_classes: int
    latents: dict = field(default_factory=dict)

    def __post_init__(self):
        counts = {arr.shape[0] for arr in self.modalities}
        lengths = {arr.shape[1] for arr in self.modalities}
        if len(counts) != 1 or len(lengths) != 1:
            raise DataError(
                f"modalities disagree on N/T: counts={sorted(counts)}, lengths={sorted(lengths)}"
            )
        if self.labels.shape[0] != next(iter(counts)):
            raise DataError(
                f"labels length {self.labels.shape[0]} != window count {next(iter(counts))}"
            )

    @property
    def num_windows(self) -> int:
        return self.modalities[0].shape[0]

    @property
    def window_length(self) -> int:
        return self.modalities[0].shape[1]

    @property
    def obs_dims(self) -> tuple[int, ...]:
        return tuple(arr.shape[2] for arr in self.modalities)

    def subset(self, indices: np.ndarray) -> "MultiModalDataset":
        return MultiModalDataset(
            name=self.name,
            modality_names=list(self.modality_names),
            modalities=[arr[indices] for arr in self.modalities],
            labels=self.labels[indices],
            num_classes=self.num_classes,
            latents={k: v[indices] for k, v in self.latents.items()},
        )


def _num_workers() -> int:
    raw = os.environ.get("MATE_NUM_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def read_labels(path: str | Path) -> np.ndarray:
    labels = np.loadtxt(path, dtype=np.int64, ndmin=1)
    return labels


def load_dataset(manifest_path: str | Path, normalize: bool = True) -> MultiModalDataset:
    """Load every modality referenced by a manifest.

    Modality files are read in parallel when MATE_NUM_WORKERS > 1. When the
    manifest carries normalization statistics and ``normalize`` is set, each
    channel is z-scored with the stored (training-split) mean and std.
    """
    manifest = read_manifest(manifest_path)
    paths = [manifest.root / m["file"] for m in manifest.modalities]
    workers = _num_workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            arrays = list(pool.map(read_mmts, paths))
    else:
        arrays = [read_mmts(p) for p in paths]

    counts = {arr.shape[0] for arr in arrays}
    lengths = {arr.shape[1] for arr in arrays}
    if len(counts) != 1 or len(lengths) != 1:
        raise DataError(
            f"{manifest_path}: modality files disagree on N/T "
            f"(N={sorted(counts)}, T={sorted(lengths)})"
        )
    if next(iter(lengths)) != manifest.window_length:
        raise DataError(
            f"{manifest_path}: window_length {manifest.window_length} "
            f"!= file length {next(iter(lengths))}"
        )

    if normalize and manifest.normalization:
        for i, mod in enumerate(manifest.modalities):
            stats = manifest.normalization.get(mod["name"])
            if stats is None:
                continue
            mean = np.asarray(stats["mean"], dtype=np.float32)
            std = np.asarray(stats["std"], dtype=np.float32)
            arrays[i] = (arrays[i] - mean) / np.where(std > 0, std, 1.0)

    labels = read_labels(manifest.root / manifest.labels_file)
    if labels.shape[0] != next(iter(counts)):
        raise DataError(
            f"{manifest_path}: {labels.shape[0]} labels for {next(iter(counts))} windows"
        )

    latents = {k: read_mmts(manifest.root / f) for k, f in manifest.latents.items()}
    return MultiModalDataset(
        name=manifest.name,
        modality_names=[m["name"] for m in manifest.modalities],
        modalities=arrays,
        labels=labels,
        num_classes=manifest.num_classes,
        latents=latents,
    )


# ---------------------------------------------------------------------------
# UCIHAR ingestion
# ---------------------------------------------------------------------------

_UCIHAR_MODALITIES = {
    "body_acc": ["body_acc_x", "body_acc_y", "body_acc_z"],
    "total_acc": ["total_acc_x", "total_acc_y", "total_acc_z"],
    "gyro": ["body_gyro_x", "body_gyro_y", "body_gyro_z"],
}
UCIHAR_WINDOW = 128
UCIHAR_CLASSES = 6


def ingest_ucihar(raw_dir: str | Path, out_dir: str | Path) -> dict[str, Path]:
    """Convert the public UCIHAR layout into MMTS files plus manifests.

    Emits three modalities (body_acc, total_acc, gyro), each [N, 128, 3],
    labels remapped from 1..6 to 0..5, and one manifest per official split
    (train_manifest.json, test_manifest.json). Per-channel z-score statistics
    are computed on the training split and stored in both manifests. Repeated
    runs produce byte-identical outputs.
    """
    raw_dir = Path(raw_dir)
    out_dir = Path(out_dir)

    needed: list[Path] = []
    for split in ("train", "test"):
        needed.append(raw_dir / split / f"y_{split}.txt")
        for channels in _UCIHAR_MODALITIES.values():
            for ch in channels:
                needed.append(raw_dir / split / "Inertial Signals" / f"{ch}_{split}.txt")
    absent = [str(p) for p in needed if not p.exists()]
    if absent:
        raise IngestError(f"UCIHAR raw files missing: {absent}")

    out_dir.mkdir(parents=True, exist_ok=True)
    manifests: dict[str, Path] = {}
    stats: dict[str, dict] = {}

    for split in ("train", "test"):
        arrays = {}
        for mod_name, channels in _UCIHAR_MODALITIES.items():
            per_axis = [
                np.loadtxt(raw_dir / split / "Inertial Signals" / f"{ch}_{split}.txt")
                for ch in channels
            ]
            arrays[mod_name] = np.stack(per_axis, axis=2).astype(np.float32)
            if arrays[mod_name].shape[1] != UCIHAR_WINDOW:
                raise IngestError(
                    f"{mod_name} {split}: window {arrays[mod_name].shape[1]} != {UCIHAR_WINDOW}"
                )
        labels = np.loadtxt(raw_dir / split / f"y_{split}.txt", dtype=np.int64) - 1
        if labels.min() < 0 or labels.max() >= UCIHAR_CLASSES:
            raise IngestError(f"{split}: labels out of range after 1..6 -> 0..5 remap")

        if split == "train":
            for mod_name, arr in arrays.items():
                flat = arr.reshape(-1, arr.shape[2]).astype(np.float64)
                stats[mod_name] = {
                    "mean": [float(v) for v in flat.mean(axis=0)],
                    "std": [float(v) for v in flat.std(axis=0)],
                }

        modality_entries = []
        for mod_name, arr in arrays.items():
            fname = f"{split}_{mod_name}.mmts"
            write_mmts(arr, out_dir / fname)
            modality_entries.append({"name": mod_name, "file": fname})
        labels_fname = f"{split}_labels.txt"
        with open(out_dir / labels_fname, "w") as fh:
            fh.write("\n".join(str(int(v)) for v in labels))
            fh.write("\n")

        manifest = DatasetManifest(
            name=f"ucihar_{split}",
            modalities=modality_entries,
            labels_file=labels_fname,
            num_classes=UCIHAR_CLASSES,
            window_length=UCIHAR_WINDOW,
            normalization=stats,
            root=out_dir,
        )
        manifest_path = out_dir / f"{split}_manifest.json"
        write_manifest(manifest, manifest_path)
        manifests[split] = manifest_path

    return manifests


def write_report(report: dict, path: str | Path) -> None:
    """Write an evaluation report as deterministic JSON."""
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
