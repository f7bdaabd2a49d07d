"""
Data pipeline - manifest ingestion, per-dataset resize protocols, synthetic
unaligned-pair construction and the bundled toy dataset.

Manifest (manifest.json in the dataset directory):

    {"dataset": "toy", "mode": "aligned" | "unaligned",
     "pairs": [{"id": "0001", "source": "aligned/source/0001.png",
                "target": "aligned/target/0001.png", "split": "train" | "test",
                "dp": "dp/0001.txt"}]}

"dp" is only read in unaligned mode for test pairs. Pixels are normalized
to [-1, 1] on load.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator
import hashlib
import json
import logging

import cv2
import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from .errors import DataError, LeakageError, ManifestMismatch, MissingFile, PatchTooLarge
from .geometry import CornerDisplacement, Homography, compose, random_homography, warp

logger = logging.getLogger(__name__)

SPLITS = ("train", "test")


@dataclass(frozen=True)
class DatasetProfile:
    name: str
    resize: tuple[int, int] | None = None  # (width, height)
    patch: int = 128
    rho: float = 32.0
    oversample: int = 1
    pregenerated: bool = False


DATASETS = {
    "GoogleEarth": DatasetProfile("GoogleEarth", patch=128, pregenerated=True),
    "RGB_IR_AI": DatasetProfile("RGB_IR_AI", patch=128),
    "Depth_VIS": DatasetProfile("Depth_VIS", patch=128, oversample=10),
    "SAR_Opt_OS": DatasetProfile("SAR_Opt_OS", resize=(192, 192), patch=128, oversample=5),
    "VIS_IR_LowLight": DatasetProfile("VIS_IR_LowLight", resize=(240, 192), patch=128),
    "toy": DatasetProfile("toy", patch=64, rho=8.0),
}


def get_profile(tag: str) -> DatasetProfile:
    if tag not in DATASETS:
        raise ManifestMismatch(f"Unknown dataset tag: {tag}")
    return DATASETS[tag]


@dataclass(frozen=True, eq=False)
class PairRecord:
    """One (source, target) pair; images are paths or arrays in [-1, 1]"""
    source: Path | np.ndarray
    target: Path | np.ndarray
    split: str
    dataset: str = "toy"
    pair_id: str = ""
    gt_dp: CornerDisplacement | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ManifestMismatch(f"Unknown split {self.split!r} for pair {self.pair_id}")
        if self.split == "train" and self.gt_dp is not None:
            raise LeakageError(f"Training pair {self.pair_id} carries a ground-truth displacement")

    def load(self, channels: int = 1) -> tuple[np.ndarray, np.ndarray]:
        return _as_image(self.source, channels), _as_image(self.target, channels)


def load_image(path: str | Path, channels: int = 1) -> np.ndarray:
    """Read an 8/16-bit image as float32 in [-1, 1], shape (H, W) or (H, W, 3)"""
    path = Path(path)
    if not path.exists():
        raise MissingFile(path)
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise MissingFile(path)
    scale = 65535.0 if raw.dtype == np.uint16 else 255.0
    img = raw.astype(np.float32) / scale
    if img.ndim == 3 and img.shape[2] == 4:
        img = img[..., :3]
    if channels == 1 and img.ndim == 3:
        img = cv2.cvtColor(img, cv2.COLOR_BGR2GRAY)
    elif channels == 3 and img.ndim == 2:
        img = cv2.cvtColor(img, cv2.COLOR_GRAY2BGR)
    return img * 2.0 - 1.0


def save_image(img: np.ndarray, path: str | Path) -> Path:
    """Lossless 16-bit PNG of an image in [-1, 1]"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.round((np.clip(img, -1.0, 1.0) + 1.0) / 2.0 * 65535.0).astype(np.uint16)
    cv2.imwrite(str(path), pixels)
    return path


def _as_image(img, channels: int) -> np.ndarray:
    if isinstance(img, np.ndarray):
        return img.astype(np.float32)
    return load_image(img, channels)


def to_tensor(img: np.ndarray) -> torch.Tensor:
    """(H, W) or (H, W, C) array -> (C, H, W) float32 tensor"""
    if img.ndim == 2:
        img = img[..., None]
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float()


def read_manifest(dataset_dir: str | Path, manifest: dict | str | Path | None = None) -> dict:
    dataset_dir = Path(dataset_dir)
    if manifest is None:
        manifest = dataset_dir / "manifest.json"
    if not isinstance(manifest, dict):
        if not Path(manifest).exists():
            raise MissingFile(manifest)
        manifest = json.loads(Path(manifest).read_text())
    for key in ("dataset", "pairs"):
        if key not in manifest:
            raise ManifestMismatch(f"Manifest lacks '{key}'")
    if manifest.get("mode", "aligned") not in ("aligned", "unaligned"):
        raise ManifestMismatch(f"Unknown manifest mode: {manifest['mode']}")
    return manifest


def read_displacement(path: str | Path) -> CornerDisplacement:
    path = Path(path)
    if not path.exists():
        raise MissingFile(path)
    values = np.loadtxt(path, dtype=np.float64)
    if values.shape != (4, 2):
        raise ManifestMismatch(f"{path}: expected a 4x2 displacement, got {values.shape}")
    return CornerDisplacement(values)


def write_displacement(dp: CornerDisplacement, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, dp.dp, fmt="%.10f")
    return path


def ingest(dataset_dir: str | Path, manifest: dict | str | Path | None = None, oversample: int = 1, seed: int = 0) -> Iterator[PairRecord]:
    """Records in manifest order; training pairs are repeated `oversample` times,
    each copy with its own perturbation seed.
    """
    dataset_dir = Path(dataset_dir)
    manifest = read_manifest(dataset_dir, manifest)
    dataset = manifest["dataset"]
    unaligned = manifest.get("mode", "aligned") == "unaligned"
    if oversample < 1:
        raise ManifestMismatch(f"Oversampling factor must be >= 1, got {oversample}")

    next_seed = seed
    for index, entry in enumerate(manifest["pairs"]):
        try:
            source = dataset_dir / entry["source"]
            target = dataset_dir / entry["target"]
            split = entry["split"]
        except KeyError as e:
            raise ManifestMismatch(f"Pair {index} lacks {e}") from e
        for path in (source, target):
            if not path.exists():
                raise MissingFile(path)
        pair_id = str(entry.get("id", source.stem))

        gt_dp = None
        if unaligned and split == "test":
            if "dp" not in entry:
                raise ManifestMismatch(f"Test pair {pair_id} has no displacement sidecar")
            gt_dp = read_displacement(dataset_dir / entry["dp"])
        elif "dp" in entry and split == "train":
            logger.warning(f"Ignoring ground-truth displacement of training pair {pair_id}")

        copies = oversample if split == "train" else 1
        for j in range(copies):
            rec_id = pair_id if copies == 1 else f"{pair_id}_{j}"
            yield PairRecord(source, target, split, dataset, rec_id, gt_dp, seed=next_seed)
            next_seed += 1


def resize_protocol(img: np.ndarray, tag: str) -> np.ndarray:
    profile = get_profile(tag)
    if profile.resize is None:
        return img
    width, height = profile.resize
    if img.shape[:2] == (height, width):
        return img
    return cv2.resize(img, (width, height), interpolation=cv2.INTER_LINEAR)


def make_unaligned(rec: PairRecord, rho: float, patch: int, seed: int, channels: int = 1) -> PairRecord:
    """Co-located crops with the target patch perturbed by a random homography.

    The source patch is the crop at offset o; the target patch samples the full
    target at H^-1 q + o, so warp(source_patch, H) lines up with target_patch
    and dp = corners of H is what register(source, target) should predict.
    """
    source, target = rec.load(channels)
    source = resize_protocol(source, rec.dataset) if rec.dataset in DATASETS else source
    target = resize_protocol(target, rec.dataset) if rec.dataset in DATASETS else target
    height, width = source.shape[:2]
    if target.shape[:2] != (height, width):
        raise ManifestMismatch(f"Pair {rec.pair_id}: source {source.shape[:2]} and target {target.shape[:2]} differ")
    margin = int(np.ceil(rho))
    if patch + 2 * margin > min(height, width):
        raise PatchTooLarge(f"Patch {patch} with margin {margin} does not fit a {width}x{height} image")

    rng = np.random.default_rng(seed)
    ox = int(rng.integers(margin, width - patch - margin + 1))
    oy = int(rng.integers(margin, height - patch - margin + 1))
    h, dp = random_homography(rng, rho, (patch, patch))

    src_patch = source[oy:oy + patch, ox:ox + patch].copy()
    sampler = compose(h, Homography.translation(-ox, -oy))
    tgt_tensor, _ = warp(to_tensor(target).double(), sampler, out_size=(patch, patch))
    tgt_patch = tgt_tensor.numpy().transpose(1, 2, 0).astype(np.float32)
    if tgt_patch.shape[2] == 1:
        tgt_patch = tgt_patch[..., 0]

    gt_dp = dp if rec.split == "test" else None
    return PairRecord(src_patch, tgt_patch, rec.split, rec.dataset, rec.pair_id, gt_dp, seed=seed)


def _toy_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    noise = rng.standard_normal((size, size)).astype(np.float32)
    img = cv2.GaussianBlur(noise, (0, 0), sigmaX=size / 24)
    img = (img - img.min()) / max(float(np.ptp(img)), 1e-6) * 120 + 60
    for _ in range(int(rng.integers(4, 8))):
        color = float(rng.uniform(0, 255))
        cx, cy = (int(v) for v in rng.integers(0, size, 2))
        if rng.random() < 0.5:
            w, h = (int(v) for v in rng.integers(size // 10, size // 3, 2))
            cv2.rectangle(img, (cx, cy), (cx + w, cy + h), color, -1)
        else:
            cv2.circle(img, (cx, cy), int(rng.integers(size // 16, size // 5)), color, -1)
    return np.clip(img, 0, 255).astype(np.uint8)


def _toy_counterpart(img: np.ndarray) -> np.ndarray:
    """Inverted, blurred copy blended with its edge magnitude"""
    inverted = 255.0 - cv2.GaussianBlur(img, (5, 5), 1.5).astype(np.float32)
    gx = cv2.Sobel(img, cv2.CV_32F, 1, 0, ksize=3)
    gy = cv2.Sobel(img, cv2.CV_32F, 0, 1, ksize=3)
    edges = cv2.magnitude(gx, gy)
    edges = edges / max(float(edges.max()), 1e-6) * 255.0
    return np.clip(0.6 * inverted + 0.4 * edges, 0, 255).astype(np.uint8)


def make_toy_dataset(root: str | Path, n_pairs: int = 32, size: int = 96, n_train: int = 24, seed: int = 0) -> Path:
    """Write the procedural cross-"modality" toy set and its aligned manifest"""
    root = Path(root)
    if not 0 <= n_train <= n_pairs:
        raise ValueError(f"n_train must lie in [0, {n_pairs}]")
    rng = np.random.default_rng(seed)
    (root / "aligned" / "source").mkdir(parents=True, exist_ok=True)
    (root / "aligned" / "target").mkdir(parents=True, exist_ok=True)

    pairs = []
    for i in range(n_pairs):
        pair_id = f"{i:04d}"
        img = _toy_texture(rng, size)
        cv2.imwrite(str(root / "aligned" / "source" / f"{pair_id}.png"), img)
        cv2.imwrite(str(root / "aligned" / "target" / f"{pair_id}.png"), _toy_counterpart(img))
        pairs.append({
            "id": pair_id,
            "source": f"aligned/source/{pair_id}.png",
            "target": f"aligned/target/{pair_id}.png",
            "split": "train" if i < n_train else "test",
        })

    manifest = {"dataset": "toy", "mode": "aligned", "pairs": pairs}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return root


@dataclass
class PreparedDataset:
    root: Path
    dataset: str
    counts: dict = field(default_factory=dict)
    fingerprint: str = ""
    reused: bool = False


def _fingerprint(manifest: dict, rho: float, patch: int, oversample: int, seed: int, channels: int) -> str:
    payload = json.dumps({"manifest": manifest, "rho": rho, "patch": patch, "oversample": oversample, "seed": seed, "channels": channels}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def prepare_dataset(
    dataset_dir: str | Path,
    out_dir: str | Path,
    rho: float | None = None,
    patch: int | None = None,
    oversample: int | None = None,
    seed: int = 0,
    channels: int = 1,
) -> PreparedDataset:
    """Freeze unaligned train/test pairs to disk; a rerun with the same inputs is a no-op"""
    dataset_dir, out_dir = Path(dataset_dir), Path(out_dir)
    manifest = read_manifest(dataset_dir)
    profile = get_profile(manifest["dataset"])
    rho = profile.rho if rho is None else rho
    patch = profile.patch if patch is None else patch
    oversample = profile.oversample if oversample is None else oversample
    fingerprint = _fingerprint(manifest, rho, patch, oversample, seed, channels)

    index_file = out_dir / "records.json"
    if index_file.exists():
        index = json.loads(index_file.read_text())
        if index.get("fingerprint") == fingerprint:
            counts = {split: len(index["records"][split]) for split in SPLITS}
            return PreparedDataset(out_dir, manifest["dataset"], counts, fingerprint, reused=True)

    records = {split: [] for split in SPLITS}
    pregenerated = manifest.get("mode") == "unaligned"
    for rec in ingest(dataset_dir, manifest, oversample=oversample, seed=seed):
        if pregenerated:
            src, tgt = rec.load(channels)
            rec = PairRecord(src, tgt, rec.split, rec.dataset, rec.pair_id, rec.gt_dp, rec.seed)
        else:
            rec = make_unaligned(rec, rho, patch, rec.seed, channels)
        base = out_dir / rec.split
        entry = {
            "id": rec.pair_id,
            "source": str(save_image(rec.source, base / "source" / f"{rec.pair_id}.png").relative_to(out_dir)),
            "target": str(save_image(rec.target, base / "target" / f"{rec.pair_id}.png").relative_to(out_dir)),
            "seed": rec.seed,
        }
        if rec.gt_dp is not None:
            entry["dp"] = str(write_displacement(rec.gt_dp, base / "dp" / f"{rec.pair_id}.txt").relative_to(out_dir))
        records[rec.split].append(entry)

    index = {"dataset": manifest["dataset"], "fingerprint": fingerprint, "rho": rho, "patch": patch, "records": records}
    out_dir.mkdir(parents=True, exist_ok=True)
    index_file.write_text(json.dumps(index, indent=2))
    counts = {split: len(records[split]) for split in SPLITS}
    return PreparedDataset(out_dir, manifest["dataset"], counts, fingerprint)


def load_prepared(prepared_dir: str | Path, split: str) -> list[PairRecord]:
    prepared_dir = Path(prepared_dir)
    index_file = prepared_dir / "records.json"
    if not index_file.exists():
        raise MissingFile(index_file)
    index = json.loads(index_file.read_text())
    if split not in index["records"]:
        raise ManifestMismatch(f"Prepared dataset has no split {split!r}")
    out = []
    for entry in index["records"][split]:
        gt_dp = read_displacement(prepared_dir / entry["dp"]) if split == "test" else None
        if split == "test" and gt_dp is None:
            raise ManifestMismatch(f"Test pair {entry['id']} lacks a displacement")
        out.append(PairRecord(prepared_dir / entry["source"], prepared_dir / entry["target"], split, index["dataset"], entry["id"], gt_dp, entry.get("seed")))
    return out


class PairDataset(Dataset):
    """Tensors (source, target, dp) for a list of records; dp is zeros without ground truth"""

    def __init__(self, records: list[PairRecord], channels: int = 1):
        self.records = records
        self.channels = channels
        self._cache: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int):
        if index not in self._cache:
            src, tgt = self.records[index].load(self.channels)
            self._cache[index] = (to_tensor(src), to_tensor(tgt))
        src, tgt = self._cache[index]
        rec = self.records[index]
        dp = rec.gt_dp.dp if rec.gt_dp is not None else np.zeros((4, 2))
        return src, tgt, torch.as_tensor(dp, dtype=torch.float32)


def pair_loader(records: list[PairRecord], batch_size: int, seed: int = 0, shuffle: bool = True, channels: int = 1) -> DataLoader:
    """Batch order is a pure function of seed"""
    generator = torch.Generator().manual_seed(seed)
    return DataLoader(PairDataset(records, channels), batch_size=batch_size, shuffle=shuffle, generator=generator, drop_last=False)


def infinite_batches(records: list[PairRecord], batch_size: int, seed: int = 0, channels: int = 1):
    """Endless stream of shuffled batches; epoch e reshuffles with seed + e"""
    dataset = PairDataset(records, channels)
    if len(dataset) == 0:
        raise DataError("No records to batch")
    epoch = 0
    while True:
        generator = torch.Generator().manual_seed(seed + epoch)
        yield from DataLoader(dataset, batch_size=min(batch_size, len(dataset)), shuffle=True, generator=generator)
        epoch += 1
