"""Image I/O, augmentation, manifests and batching.

Images are 2-D float64 arrays with values in ``[0, 1]`` until they are
normalised and stacked into ``[b, 1, H, W]`` float32 batches for a model.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, DataError, ImageFormatError, ManifestError, ValidationError
from .rng import seeded_rng

logger = logging.getLogger(__name__)

UNANNOTATED = None  # label marker for "/" cells


# -- image files ---------------------------------------------------------
def _pgm_tokens(blob: bytes, count: int):
    """Parse ``count`` whitespace-separated header integers after the magic; returns (values, data offset)."""
    values = []
    pos = 2
    n = len(blob)
    while len(values) < count:
        while pos < n and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < n and blob[pos : pos + 1] == b"#":
            while pos < n and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and blob[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError("malformed PGM header")
        values.append(int(blob[start:pos]))
    return values, pos + 1  # exactly one whitespace byte precedes the raster


def decode_pgm(blob: bytes) -> np.ndarray:
    (width, height, maxval), offset = _pgm_tokens(blob, 3)
    if not 0 < maxval < 65536 or width < 1 or height < 1:
        raise ImageFormatError(f"unsupported PGM header {width}x{height} maxval {maxval}")
    dtype = ">u1" if maxval < 256 else ">u2"
    count = width * height
    if len(blob) - offset < count * np.dtype(dtype).itemsize:
        raise ImageFormatError("PGM raster is truncated")
    raw = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    return raw.reshape(height, width).astype(np.float64) / maxval


def encode_pgm(img: np.ndarray, maxval: int = 255) -> bytes:
    """Binary (P5) PGM from values in [0, 1], rounded to the nearest level."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ImageFormatError(f"PGM needs a 2-D image, got shape {img.shape}")
    levels = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    dtype = ">u1" if maxval < 256 else ">u2"
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode()
    return header + levels.astype(dtype).tobytes()


def load_image(path) -> np.ndarray:
    """Read a grayscale PGM (P5, 8/16-bit) or PNG as float64 in [0, 1]."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"image not found: {path}") from None
    if blob[:2] == b"P5":
        return decode_pgm(blob)
    if blob[:8] == b"\x89PNG\r\n\x1a\n":
        return _decode_png(path)
    raise ImageFormatError(f"unsupported image format in {path.name}: magic bytes {blob[:8]!r}")


def _decode_png(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        mode = im.mode
        if mode == "L":
            return np.asarray(im, dtype=np.float64) / 255.0
        if mode in ("I;16", "I;16B", "I"):
            return np.asarray(im, dtype=np.float64) / 65535.0
    raise ImageFormatError(f"{path.name}: PNG mode {mode!r} is not grayscale")


def save_pgm(path, img: np.ndarray, maxval: int = 255) -> None:
    Path(path).write_bytes(encode_pgm(img, maxval))


# -- geometry ------------------------------------------------------------
def resize_cubic(img: np.ndarray, side) -> np.ndarray:
    """Catmull-Rom bicubic resize (a = -0.5, edge clamped) to ``side`` or ``(h, w)``."""
    h, w = (side, side) if np.isscalar(side) else side
    if h < 1 or w < 1:
        raise ConfigError(f"resize target must be >= 1, got {(h, w)}")
    return kernels.resize_bicubic(np.asarray(img, dtype=np.float64), int(h), int(w))


@dataclass
class AugmentConfig:
    resize_side: int = 512
    out_side: int = 224
    crop_scale: tuple = (0.2, 1.0)
    crop_ratio: tuple = (3 / 4, 4 / 3)
    hflip_prob: float = 0.5
    mean: float = 0.5
    std: float = 0.25

    def problems(self) -> list:
        out = []
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            out.append(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        rlo, rhi = self.crop_ratio
        if not 0 < rlo <= rhi:
            out.append(f"crop_ratio must satisfy 0 < lo <= hi, got {self.crop_ratio}")
        if not 0 <= self.hflip_prob <= 1:
            out.append("hflip_prob must lie in [0, 1]")
        if self.std <= 0:
            out.append("std must be > 0")
        if self.resize_side < 1 or self.out_side < 1:
            out.append("resize_side and out_side must be >= 1")
        return out


def sample_crop_box(height: int, width: int, scale, ratio, rng, attempts: int = 10):
    """Pick ``(top, left, h, w)`` for a random resized crop.

    The area fraction is drawn uniformly from ``scale``. The log aspect
    ratio is drawn uniformly from ``ratio`` restricted to the values that
    keep the crop inside the image at that area, so no area draw is ever
    rejected on a square image. After ``attempts`` infeasible area draws
    the largest centred square is returned.
    """
    area = height * width
    log_lo, log_hi = math.log(ratio[0]), math.log(ratio[1])
    for _ in range(attempts):
        frac = rng.uniform(scale[0], scale[1])
        target = frac * area
        # w = sqrt(target * r) <= width and h = sqrt(target / r) <= height
        r_hi = min(log_hi, math.log(width * width / target))
        r_lo = max(log_lo, math.log(target / (height * height)))
        if r_lo > r_hi:
            continue
        aspect = math.exp(rng.uniform(r_lo, r_hi))
        w = min(width, max(1, int(round(math.sqrt(target * aspect)))))
        h = min(height, max(1, int(round(math.sqrt(target / aspect)))))
        top = int(rng.integers(0, height - h + 1))
        left = int(rng.integers(0, width - w + 1))
        return top, left, h, w
    s = min(height, width)
    return (height - s) // 2, (width - s) // 2, s, s


def random_resized_crop(img: np.ndarray, config: AugmentConfig, rng) -> np.ndarray:
    top, left, h, w = sample_crop_box(img.shape[0], img.shape[1], config.crop_scale,
                                      config.crop_ratio, rng)
    return resize_cubic(img[top : top + h, left : left + w], config.out_side)


def hflip(img: np.ndarray, p: float, rng) -> np.ndarray:
    if not 0 <= p <= 1:
        raise ConfigError(f"flip probability must lie in [0, 1], got {p}")
    if rng.random() < p:
        return img[..., ::-1].copy()
    return img


def normalize(img: np.ndarray, mean: float, std: float) -> np.ndarray:
    if std <= 0:
        raise ConfigError(f"normalisation std must be > 0, got {std}")
    return (img - mean) / std


def denormalize(img: np.ndarray, mean: float, std: float) -> np.ndarray:
    return img * std + mean


def train_transform(img: np.ndarray, config: AugmentConfig, rng) -> np.ndarray:
    """Resize, random crop to ``out_side``, flip and normalise."""
    img = np.clip(resize_cubic(img, config.resize_side), 0.0, 1.0)
    img = np.clip(random_resized_crop(img, config, rng), 0.0, 1.0)
    img = hflip(img, config.hflip_prob, rng)
    return normalize(img, config.mean, config.std)


def eval_transform(img: np.ndarray, config: AugmentConfig) -> np.ndarray:
    """Deterministic path: resize to ``resize_side`` then to ``out_side``, normalise."""
    img = np.clip(resize_cubic(img, config.resize_side), 0.0, 1.0)
    img = np.clip(resize_cubic(img, config.out_side), 0.0, 1.0)
    return normalize(img, config.mean, config.std)


def otsu_threshold(img: np.ndarray, bins: int = 256) -> float:
    hist, edges = np.histogram(img, bins=bins, range=(0.0, 1.0))
    centers = (edges[:-1] + edges[1:]) / 2
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * centers)
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = m0 / w0
        mu1 = (m0[-1] - m0) / w1
        between = w0 * w1 * (mu0 - mu1) ** 2
    between = np.nan_to_num(between, nan=-1.0)
    return float(centers[int(np.argmax(between))])


def chest_region(img: np.ndarray) -> tuple:
    """Bounding box ``(top, left, bottom, right)`` of the largest above-Otsu region."""
    from scipy import ndimage

    fg = img > otsu_threshold(img)
    labels, count = ndimage.label(fg)
    if count == 0:
        return 0, 0, img.shape[0], img.shape[1]
    sizes = ndimage.sum_labels(fg, labels, index=np.arange(1, count + 1))
    rows, cols = np.nonzero(labels == 1 + int(np.argmax(sizes)))
    return int(rows.min()), int(cols.min()), int(rows.max()) + 1, int(cols.max()) + 1


# -- manifests -----------------------------------------------------------
@dataclass(frozen=True)
class Box:
    class_id: int
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)


@dataclass
class SampleRecord:
    id: str
    image_path: str
    labels: tuple
    boxes: tuple = ()
    split: str = "train"
    width: Optional[int] = None
    height: Optional[int] = None

    def to_json(self) -> dict:
        out = {"id": self.id, "image": self.image_path, "labels": list(self.labels),
               "split": self.split}
        if self.boxes:
            out["boxes"] = [[b.class_id, b.x_min, b.y_min, b.x_max, b.y_max] for b in self.boxes]
        if self.width is not None:
            out["width"] = self.width
            out["height"] = self.height
        return out


@dataclass
class Manifest:
    classes: list
    records: list = field(default_factory=list)
    mean: float = 0.5
    std: float = 0.25
    root: Path = field(default_factory=Path)
    name: str = ""

    def image_path(self, record: SampleRecord) -> Path:
        p = Path(record.image_path)
        return p if p.is_absolute() else self.root / p

    def split(self, name: str) -> "Manifest":
        return Manifest(self.classes, [r for r in self.records if r.split == name],
                        self.mean, self.std, self.root, self.name)

    def label_matrix(self):
        """``(values, known)``: float 0/1 labels and a mask of annotated entries."""
        k = len(self.classes)
        values = np.zeros((len(self.records), k))
        known = np.zeros((len(self.records), k), dtype=bool)
        for i, r in enumerate(self.records):
            for j, v in enumerate(r.labels):
                if v is not None:
                    values[i, j] = v
                    known[i, j] = True
        return values, known


_LABEL_VALUES = {1: 1, 0: 0, True: 1, False: 0, None: None, "/": None}


def _parse_label(value, record_id):
    try:
        return _LABEL_VALUES[value]
    except (KeyError, TypeError):
        raise ValidationError(f"record {record_id}: invalid label value {value!r}") from None


def validate_record(record: SampleRecord, num_classes: int) -> None:
    if len(record.labels) != num_classes:
        raise ValidationError(
            f"record {record.id}: {len(record.labels)} labels for {num_classes} classes"
        )
    for b in record.boxes:
        if not (b.x_min < b.x_max and b.y_min < b.y_max):
            raise ValidationError(f"record {record.id}: degenerate box {b}")
        if not 0 <= b.class_id < num_classes:
            raise ValidationError(f"record {record.id}: box class {b.class_id} out of range")
        if b.x_min < 0 or b.y_min < 0:
            raise ValidationError(f"record {record.id}: box {b} outside image")
        if record.width is not None and (b.x_max > record.width or b.y_max > record.height):
            raise ValidationError(
                f"record {record.id}: box {b} outside {record.width}x{record.height} image"
            )


def _record_from_json(obj: dict, num_classes: int, line: int) -> SampleRecord:
    if not isinstance(obj, dict):
        raise ManifestError(f"line {line}: record must be a JSON object", line=line)
    rid = str(obj.get("id", f"line{line}"))
    try:
        labels = tuple(_parse_label(v, rid) for v in obj["labels"])
        boxes = tuple(Box(int(b[0]), *map(float, b[1:5])) for b in obj.get("boxes") or ())
        record = SampleRecord(
            id=rid,
            image_path=str(obj["image"]),
            labels=labels,
            boxes=boxes,
            split=str(obj.get("split", "train")),
            width=obj.get("width"),
            height=obj.get("height"),
        )
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ManifestError(f"line {line}: malformed record ({exc!r})", line=line) from None
    validate_record(record, num_classes)
    return record


def parse_manifest(path) -> Manifest:
    """Read a line-delimited JSON manifest: a header line, then one record per line."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    if not lines:
        raise ManifestError("manifest is empty (missing header line)", line=1)
    try:
        header = json.loads(lines[0])
        classes = [str(c) for c in header["classes"]]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ManifestError(f"line 1: invalid header ({exc})", line=1) from None
    manifest = Manifest(classes, [], float(header.get("mean", 0.5)), float(header.get("std", 0.25)),
                        path.parent, str(header.get("name", path.stem)))
    seen = set()
    for i, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"line {i}: {exc.msg}", line=i) from None
        record = _record_from_json(obj, len(classes), i)
        if record.id in seen:
            raise ValidationError(f"record {record.id}: duplicate id")
        seen.add(record.id)
        manifest.records.append(record)
    return manifest


def write_manifest(path, manifest: Manifest) -> None:
    header = {"classes": manifest.classes, "mean": manifest.mean, "std": manifest.std}
    if manifest.name:
        header["name"] = manifest.name
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for r in manifest.records:
            fh.write(json.dumps(r.to_json()) + "\n")


def image_stats(images: Sequence[np.ndarray]) -> tuple:
    total = sum(img.size for img in images)
    mean = sum(float(img.sum()) for img in images) / total
    var = sum(float(((img - mean) ** 2).sum()) for img in images) / total
    return mean, max(math.sqrt(var), 1e-6)


class ImageDataset:
    """Manifest records loaded lazily; each item is the image resized to ``resize_side``."""

    def __init__(self, manifest: Manifest, resize_side: int, cache: bool = True):
        self.manifest = manifest
        self.resize_side = resize_side
        self._cache = {} if cache else None

    def __len__(self) -> int:
        return len(self.manifest.records)

    def __getitem__(self, i: int) -> np.ndarray:
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        img = load_image(self.manifest.image_path(self.manifest.records[i]))
        img = np.clip(resize_cubic(img, self.resize_side), 0.0, 1.0)
        if self._cache is not None:
            self._cache[i] = img
        return img


# -- batching ------------------------------------------------------------
def batch_indices(n: int, batch_size: int, seed: int, epoch: int = 0, shuffle: bool = True) -> list:
    """Seeded per-epoch order split into batches; the last batch may be short."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = seeded_rng(seed, 1, epoch).permutation(n) if shuffle else np.arange(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def batch_iterator(dataset: Sequence, batch_size: int, seed: int, epoch: int = 0,
                   transform: Optional[Callable] = None, threads: int = 1, shuffle: bool = True):
    """Yield ``(indices, images[b, 1, H, W] float32)``.

    ``transform(image, rng)`` receives a generator keyed by (seed, epoch,
    index). The emission order is fixed before any work is dispatched, so the
    worker count never changes the output.
    """

    def load(i):
        img = dataset[int(i)]
        if transform is not None:
            img = transform(img, seeded_rng(seed, 3, epoch, int(i)))
        img = np.asarray(img, dtype=np.float32)
        return img[None] if img.ndim == 2 else img

    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for idx in batch_indices(len(dataset), batch_size, seed, epoch, shuffle):
            items = list(pool.map(load, idx)) if pool else [load(i) for i in idx]
            yield idx, np.stack(items)
    finally:
        if pool:
            pool.shutdown()
